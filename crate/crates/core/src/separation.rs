//! Inference: mixture waveform to per-source waveforms.

use serde::{Deserialize, Serialize};

use crate::dsp::{apply_mixture_phase, extract_patches, istft, merge_patches, stft, StftConfig};
use crate::error::{Error, Result};
use crate::mmdense::MmDenseNet;
use crate::tensor::{Real, Tensor};

/// Sum of estimates below which a bin's mixture magnitude is shared equally.
pub const DEGENERATE_SUM: f64 = 1e-12;

/// Anything that maps `[B, C, bins, frames]` mixture magnitudes to source
/// magnitudes of the same shape.
pub trait MagnitudeModel: Sync {
    fn input_channels(&self) -> usize;
    fn bins(&self) -> usize;
    fn predict(&self, batch: &Tensor<f64>) -> Result<Tensor<f64>>;
}

impl<T: Real> MagnitudeModel for MmDenseNet<T> {
    fn input_channels(&self) -> usize {
        self.config.input_channels
    }

    fn bins(&self) -> usize {
        self.config.bins
    }

    fn predict(&self, batch: &Tensor<f64>) -> Result<Tensor<f64>> {
        Ok(self.infer(&batch.cast())?.cast())
    }
}

/// Returns its input unchanged.
#[derive(Debug, Clone, Copy)]
pub struct IdentityModel {
    pub channels: usize,
    pub bins: usize,
}

impl MagnitudeModel for IdentityModel {
    fn input_channels(&self) -> usize {
        self.channels
    }

    fn bins(&self) -> usize {
        self.bins
    }

    fn predict(&self, batch: &Tensor<f64>) -> Result<Tensor<f64>> {
        Ok(batch.clone())
    }
}

/// Rescale per-bin so the estimates sum to the mixture magnitude:
/// `out_i = est_i^p * mix / sum_j est_j^p`.
pub fn wiener_scale(estimates: &[Tensor<f64>], mixture: &Tensor<f64>, exponent: f64) -> Result<Vec<Tensor<f64>>> {
    if !(exponent.is_finite() && exponent > 0.0) {
        return Err(Error::config("separation.wiener_exponent", format!("must be positive, got {exponent}")));
    }
    if estimates.is_empty() {
        return Err(Error::invalid("wiener_scale", "no estimates"));
    }
    for e in estimates {
        if e.shape() != mixture.shape() {
            return Err(Error::shape("wiener_scale", e.shape(), mixture.shape()));
        }
    }
    if estimates.len() == 1 {
        return Ok(vec![mixture.clone()]);
    }
    let share = 1.0 / estimates.len() as f64;
    let pow = |v: f64| if exponent == 1.0 { v } else { v.powf(exponent) };
    let mut out: Vec<Vec<f64>> = vec![vec![0.0; mixture.len()]; estimates.len()];
    let mut powered = vec![0.0; estimates.len()];
    for (i, &mix) in mixture.data().iter().enumerate() {
        for (p, e) in powered.iter_mut().zip(estimates) {
            *p = pow(e.data()[i]);
        }
        let total: f64 = powered.iter().sum();
        for (o, &p) in out.iter_mut().zip(&powered) {
            o[i] = if total < DEGENERATE_SUM { mix * share } else { p * mix / total };
        }
    }
    out.into_iter()
        .map(|d| Tensor::new(mixture.shape().to_vec(), d))
        .collect()
}

/// Magnitudes produced along the way, kept for inspection and tests. They
/// describe the edge-padded mixture (see [`edge_padding`]).
#[derive(Debug, Clone)]
pub struct Separation {
    pub sources: Vec<String>,
    pub audio: Vec<Vec<Vec<f64>>>,
    pub raw_magnitudes: Vec<Tensor<f64>>,
    pub magnitudes: Vec<Tensor<f64>>,
    pub mixture_magnitude: Tensor<f64>,
}

/// Per-source magnitude estimates for a whole `[C, bins, frames]` mixture
/// magnitude, one patch batch of `batch_size` at a time.
pub fn estimate_magnitude(
    model: &dyn MagnitudeModel,
    mixture_mag: &Tensor<f64>,
    patch_frames: usize,
    batch_size: usize,
) -> Result<Tensor<f64>> {
    let (patches, coverage) = extract_patches(mixture_mag, patch_frames)?;
    let mut outputs = Vec::with_capacity(patches.len());
    for chunk in patches.chunks(batch_size.max(1)) {
        let stacked: Vec<Tensor<f64>> = chunk.iter().map(|p| p.clone().unsqueeze0()).collect();
        let batch = Tensor::cat(&stacked.iter().collect::<Vec<_>>(), 0)?;
        let pred = model.predict(&batch)?;
        if pred.shape() != batch.shape() {
            return Err(Error::shape("separate", pred.shape(), batch.shape()));
        }
        for b in 0..chunk.len() {
            let item = pred.narrow(0, b, 1)?;
            let shape = item.shape()[1..].to_vec();
            outputs.push(item.reshape(shape)?);
        }
    }
    merge_patches(&outputs, &coverage)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeparationConfig {
    /// Patches per inference batch.
    pub batch_size: usize,
    pub wiener_exponent: f64,
}

impl Default for SeparationConfig {
    fn default() -> Self {
        Self {
            batch_size: 8,
            wiener_exponent: 1.0,
        }
    }
}

/// Separate `mixture` (`[channel][sample]`) into one waveform per model.
/// Zeros to add before and after `len` samples so that every original sample
/// sits where the overlapped squared window is at full strength. Near an
/// unpadded edge the WOLA division by a vanishing window sum amplifies any
/// inconsistency a modified spectrogram carries.
pub fn edge_padding(config: &StftConfig, len: usize) -> (usize, usize) {
    let (n, hop) = (config.fft_size, config.hop);
    let lead = n - hop;
    // whole frames, reaching at least `lead` past the last sample
    let needed = (2 * lead + len).max(n);
    let total = n + (needed - n).div_ceil(hop) * hop;
    (lead, total - lead - len)
}

pub fn separate(
    mixture: &[Vec<f64>],
    models: &[(String, &dyn MagnitudeModel)],
    config: &StftConfig,
    options: &SeparationConfig,
) -> Result<Separation> {
    if models.is_empty() {
        return Err(Error::invalid("separate", "at least one source is required"));
    }
    for (name, m) in models {
        if m.input_channels() != mixture.len() || m.bins() != config.bins() {
            return Err(Error::invalid(
                "separate",
                format!(
                    "model `{name}` expects {} channels x {} bins, input has {} channels x {} bins",
                    m.input_channels(),
                    m.bins(),
                    mixture.len(),
                    config.bins()
                ),
            ));
        }
    }
    let len = mixture.first().map_or(0, Vec::len);
    let (lead, trail) = edge_padding(config, len);
    let padded: Vec<Vec<f64>> = mixture
        .iter()
        .map(|c| {
            let mut p = vec![0.0; lead];
            p.extend_from_slice(c);
            p.resize(lead + len + trail, 0.0);
            p
        })
        .collect();
    let spec = stft(&padded, config)?;
    let raw = models
        .iter()
        .map(|(_, m)| estimate_magnitude(*m, &spec.magnitude, config.patch_frames, options.batch_size))
        .collect::<Result<Vec<_>>>()?;
    let magnitudes = if raw.len() > 1 {
        wiener_scale(&raw, &spec.magnitude, options.wiener_exponent)?
    } else {
        raw.clone()
    };
    let audio = magnitudes
        .iter()
        .map(|m| {
            let out = istft(&apply_mixture_phase(m, &spec)?)?;
            Ok(out.into_iter().map(|c| c[lead..lead + len].to_vec()).collect())
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Separation {
        sources: models.iter().map(|(n, _)| n.clone()).collect(),
        audio,
        raw_magnitudes: raw,
        magnitudes,
        mixture_magnitude: spec.magnitude,
    })
}
