//! Binary container for named tensors.
//!
//! ```text
//! "SSEPCKPT" | version u32 | count u32 |
//!   { name_len u16 | name | dtype u8 | rank u8 | extents u32 x rank | values }*
//! ```
//!
//! All integers and values are little-endian.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use super::ModelParams;
use crate::error::{Error, Result};
use crate::tensor::{DType, Real, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"SSEPCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn encode_checkpoint<T: Real>(params: &ModelParams<T>) -> Result<Vec<u8>> {
    let bad = |m: String| Error::invalid("encode_checkpoint", m);
    let mut out = Vec::with_capacity(16 + params.count() * T::DTYPE.size());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    let count = u32::try_from(params.tensors.len()).map_err(|_| bad("too many entries".into()))?;
    out.extend_from_slice(&count.to_le_bytes());
    for (name, t) in &params.tensors {
        let len = u16::try_from(name.len()).map_err(|_| bad(format!("name too long: {name}")))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(T::DTYPE.code());
        let rank = u8::try_from(t.rank()).map_err(|_| bad(format!("rank too large: {name}")))?;
        out.push(rank);
        for &d in t.shape() {
            let d = u32::try_from(d).map_err(|_| bad(format!("extent too large: {name}")))?;
            out.extend_from_slice(&d.to_le_bytes());
        }
        for &v in t.data() {
            v.to_le_bytes_vec(&mut out);
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| format!("truncated at byte {} (needed {n} more)", self.pos))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> std::result::Result<u8, String> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> std::result::Result<u16, String> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

/// Decode a container. Values stored in another precision are converted to `T`.
pub fn decode_checkpoint<T: Real>(bytes: &[u8], path: &Path) -> Result<ModelParams<T>> {
    let fail = |message: String| Error::Checkpoint {
        path: path.to_path_buf(),
        message,
    };
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8).map_err(fail)? != CHECKPOINT_MAGIC {
        return Err(fail("bad magic".into()));
    }
    let version = r.u32().map_err(fail)?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::CheckpointVersion {
            expected: CHECKPOINT_VERSION,
            found: version,
        });
    }
    let count = r.u32().map_err(fail)?;
    let mut tensors = BTreeMap::new();
    for _ in 0..count {
        let len = r.u16().map_err(fail)? as usize;
        let name = std::str::from_utf8(r.take(len).map_err(fail)?)
            .map_err(|e| fail(format!("entry name is not UTF-8: {e}")))?
            .to_string();
        let code = r.u8().map_err(fail)?;
        let dtype = DType::from_code(code).ok_or_else(|| fail(format!("`{name}`: unknown dtype {code}")))?;
        let rank = r.u8().map_err(fail)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32().map_err(fail)? as usize);
        }
        let n = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| fail(format!("`{name}`: element count overflows")))?;
        let raw = r
            .take(n.checked_mul(dtype.size()).ok_or_else(|| fail("size overflow".into()))?)
            .map_err(fail)?;
        let data: Vec<T> = match dtype {
            DType::F64 => raw.chunks_exact(8).map(|c| T::from_real(f64::from_le_slice(c))).collect(),
            DType::F32 => raw
                .chunks_exact(4)
                .map(|c| T::from_real(f64::from(f32::from_le_slice(c))))
                .collect(),
        };
        if tensors.insert(name.clone(), Tensor::new(shape, data)?).is_some() {
            return Err(fail(format!("duplicate entry `{name}`")));
        }
    }
    if r.pos != bytes.len() {
        return Err(fail(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(ModelParams { tensors })
}

pub fn save_params<T: Real>(params: &ModelParams<T>, path: &Path) -> Result<()> {
    fs::write(path, encode_checkpoint(params)?)?;
    Ok(())
}

pub fn load_params<T: Real>(path: &Path) -> Result<ModelParams<T>> {
    let bytes = fs::read(path).map_err(|e| Error::Checkpoint {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    decode_checkpoint(&bytes, path)
}
