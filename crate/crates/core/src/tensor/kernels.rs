//! Forward and backward kernels on raw tensors. Batch items are processed in
//! parallel; per-item partial reductions are summed in batch order so results
//! do not depend on the thread count.

use rayon::prelude::*;

use super::{c, Real, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub in_ch: usize,
    pub height: usize,
    pub width: usize,
    pub out_ch: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    pub fn new<T: Real>(
        input: &Tensor<T>,
        kernel: &Tensor<T>,
        stride: usize,
        pad: usize,
    ) -> Result<Self> {
        let (batch, in_ch, height, width) = input.dims4("conv2d")?;
        let (out_ch, kc, kh, kw) = kernel.dims4("conv2d")?;
        if kc != in_ch {
            return Err(Error::shape("conv2d", input.shape(), kernel.shape()));
        }
        if stride == 0 {
            return Err(Error::invalid("conv2d", "stride must be at least 1"));
        }
        if kh > height + 2 * pad || kw > width + 2 * pad || kh == 0 || kw == 0 {
            return Err(Error::invalid(
                "conv2d",
                format!(
                    "kernel {kh}x{kw} does not fit padded input {}x{} (input {:?}, kernel {:?})",
                    height + 2 * pad,
                    width + 2 * pad,
                    input.shape(),
                    kernel.shape()
                ),
            ));
        }
        Ok(Self {
            batch,
            in_ch,
            height,
            width,
            out_ch,
            kh,
            kw,
            stride,
            pad,
            out_h: (height + 2 * pad - kh) / stride + 1,
            out_w: (width + 2 * pad - kw) / stride + 1,
        })
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }

    fn patch_len(&self) -> usize {
        self.in_ch * self.kh * self.kw
    }

    fn out_pixels(&self) -> usize {
        self.out_h * self.out_w
    }

    fn in_plane(&self) -> usize {
        self.in_ch * self.height * self.width
    }

    fn out_plane(&self) -> usize {
        self.out_ch * self.out_pixels()
    }
}

fn im2col<T: Real>(g: &ConvGeom, x: &[T], cols: &mut [T]) {
    let p = g.out_pixels();
    let (h, w) = (g.height as isize, g.width as isize);
    for ci in 0..g.in_ch {
        let plane = &x[ci * g.height * g.width..(ci + 1) * g.height * g.width];
        for i in 0..g.kh {
            for j in 0..g.kw {
                let row = (ci * g.kh + i) * g.kw + j;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oh in 0..g.out_h {
                    let ih = (oh * g.stride + i) as isize - g.pad as isize;
                    let line = &mut dst[oh * g.out_w..(oh + 1) * g.out_w];
                    if ih < 0 || ih >= h {
                        line.fill(T::zero());
                        continue;
                    }
                    let src = &plane[ih as usize * g.width..(ih as usize + 1) * g.width];
                    for (ow, d) in line.iter_mut().enumerate() {
                        let iw = (ow * g.stride + j) as isize - g.pad as isize;
                        *d = if iw < 0 || iw >= w {
                            T::zero()
                        } else {
                            src[iw as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im<T: Real>(g: &ConvGeom, cols: &[T], dx: &mut [T]) {
    let p = g.out_pixels();
    let (h, w) = (g.height as isize, g.width as isize);
    for ci in 0..g.in_ch {
        let plane = &mut dx[ci * g.height * g.width..(ci + 1) * g.height * g.width];
        for i in 0..g.kh {
            for j in 0..g.kw {
                let row = (ci * g.kh + i) * g.kw + j;
                let src = &cols[row * p..(row + 1) * p];
                for oh in 0..g.out_h {
                    let ih = (oh * g.stride + i) as isize - g.pad as isize;
                    if ih < 0 || ih >= h {
                        continue;
                    }
                    let dst = &mut plane[ih as usize * g.width..(ih as usize + 1) * g.width];
                    for ow in 0..g.out_w {
                        let iw = (ow * g.stride + j) as isize - g.pad as isize;
                        if iw >= 0 && iw < w {
                            dst[iw as usize] += src[oh * g.out_w + ow];
                        }
                    }
                }
            }
        }
    }
}

/// Stride-1 convolutions run as one GEMM per kernel offset over a padded copy
/// of the input. Outputs are computed on a grid as wide as the padded input;
/// the extra `kw - 1` columns per row are discarded.
struct Shifted {
    wp: usize,
    plane: usize,
    grid: usize,
    slack: usize,
}

impl Shifted {
    fn new(g: &ConvGeom) -> Self {
        let (hp, wp) = (g.height + 2 * g.pad, g.width + 2 * g.pad);
        Self {
            wp,
            plane: hp * wp,
            grid: g.out_h * wp,
            slack: g.kw - 1,
        }
    }

    fn padded_len(&self, channels: usize) -> usize {
        channels * self.plane + self.slack
    }

    fn pad_input<T: Real>(&self, g: &ConvGeom, x: &[T]) -> Vec<T> {
        let mut xp = vec![T::zero(); self.padded_len(g.in_ch)];
        for ci in 0..g.in_ch {
            for h in 0..g.height {
                let src = &x[(ci * g.height + h) * g.width..][..g.width];
                let dst = ci * self.plane + (h + g.pad) * self.wp + g.pad;
                xp[dst..dst + g.width].copy_from_slice(src);
            }
        }
        xp
    }

    fn offset(&self, i: usize, j: usize) -> usize {
        i * self.wp + j
    }
}

pub(crate) fn conv2d_forward<T: Real>(
    g: &ConvGeom,
    x: &[T],
    kernel: &[T],
    bias: Option<&[T]>,
) -> Vec<T> {
    let mut out = vec![T::zero(); g.batch * g.out_plane()];
    let p = g.out_pixels();
    let k = g.patch_len();
    let kk = g.kh * g.kw;
    out.par_chunks_mut(g.out_plane().max(1))
        .enumerate()
        .for_each(|(b, out_b)| {
            let x_b = &x[b * g.in_plane()..(b + 1) * g.in_plane()];
            if g.is_pointwise() {
                T::gemm(
                    g.out_ch, k, p, T::one(), kernel, k as isize, 1, x_b, p as isize, 1, T::zero(),
                    out_b, p as isize, 1,
                );
            } else if g.stride == 1 {
                let s = Shifted::new(g);
                let xp = s.pad_input(g, x_b);
                let mut grid = vec![T::zero(); g.out_ch * s.grid];
                for i in 0..g.kh {
                    for j in 0..g.kw {
                        T::gemm(
                            g.out_ch, g.in_ch, s.grid, T::one(),
                            &kernel[i * g.kw + j..], k as isize, kk as isize,
                            &xp[s.offset(i, j)..], s.plane as isize, 1,
                            T::one(), &mut grid, s.grid as isize, 1,
                        );
                    }
                }
                for co in 0..g.out_ch {
                    for oh in 0..g.out_h {
                        let src = &grid[co * s.grid + oh * s.wp..][..g.out_w];
                        out_b[(co * g.out_h + oh) * g.out_w..][..g.out_w].copy_from_slice(src);
                    }
                }
            } else {
                let mut cols = vec![T::zero(); k * p];
                im2col(g, x_b, &mut cols);
                T::gemm(
                    g.out_ch, k, p, T::one(), kernel, k as isize, 1, &cols, p as isize, 1, T::zero(),
                    out_b, p as isize, 1,
                );
            }
            if let Some(bias) = bias {
                for (co, row) in out_b.chunks_mut(p).enumerate() {
                    row.iter_mut().for_each(|v| *v += bias[co]);
                }
            }
        });
    out
}

pub(crate) struct ConvGrads<T> {
    pub input: Option<Vec<T>>,
    pub kernel: Option<Vec<T>>,
    pub bias: Option<Vec<T>>,
}

fn conv_item_backward_shifted<T: Real>(
    g: &ConvGeom,
    x_b: &[T],
    kernel: &[T],
    d_b: &[T],
    need_input: bool,
    need_kernel: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>) {
    let s = Shifted::new(g);
    let k = g.patch_len();
    let kk = g.kh * g.kw;
    let mut dgrid = vec![T::zero(); g.out_ch * s.grid];
    for co in 0..g.out_ch {
        for oh in 0..g.out_h {
            let src = &d_b[(co * g.out_h + oh) * g.out_w..][..g.out_w];
            dgrid[co * s.grid + oh * s.wp..][..g.out_w].copy_from_slice(src);
        }
    }
    let dw = need_kernel.then(|| {
        let xp = s.pad_input(g, x_b);
        let mut dw = vec![T::zero(); g.out_ch * k];
        for i in 0..g.kh {
            for j in 0..g.kw {
                let off = i * g.kw + j;
                T::gemm(
                    g.out_ch, s.grid, g.in_ch, T::one(),
                    &dgrid, s.grid as isize, 1,
                    &xp[s.offset(i, j)..], 1, s.plane as isize,
                    T::zero(), &mut dw[off..], k as isize, kk as isize,
                );
            }
        }
        dw
    });
    let dx = need_input.then(|| {
        let mut dxp = vec![T::zero(); s.padded_len(g.in_ch)];
        for i in 0..g.kh {
            for j in 0..g.kw {
                T::gemm(
                    g.in_ch, g.out_ch, s.grid, T::one(),
                    &kernel[i * g.kw + j..], kk as isize, k as isize,
                    &dgrid, s.grid as isize, 1,
                    T::one(), &mut dxp[s.offset(i, j)..], s.plane as isize, 1,
                );
            }
        }
        let mut dx = vec![T::zero(); g.in_plane()];
        for ci in 0..g.in_ch {
            for h in 0..g.height {
                let src = &dxp[ci * s.plane + (h + g.pad) * s.wp + g.pad..][..g.width];
                dx[(ci * g.height + h) * g.width..][..g.width].copy_from_slice(src);
            }
        }
        dx
    });
    (dx, dw)
}

fn conv_item_backward_im2col<T: Real>(
    g: &ConvGeom,
    x_b: &[T],
    kernel: &[T],
    d_b: &[T],
    need_input: bool,
    need_kernel: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>) {
    let p = g.out_pixels();
    let k = g.patch_len();
    let pointwise = g.is_pointwise();
    let cols = if need_kernel && !pointwise {
        let mut cols = vec![T::zero(); k * p];
        im2col(g, x_b, &mut cols);
        Some(cols)
    } else {
        None
    };
    let dw = need_kernel.then(|| {
        let mut dw = vec![T::zero(); g.out_ch * k];
        let src: &[T] = cols.as_deref().unwrap_or(x_b);
        // dW[co, kk] = sum_p dout[co, p] * cols[kk, p]
        T::gemm(
            g.out_ch, p, k, T::one(), d_b, p as isize, 1, src, 1, p as isize, T::zero(),
            &mut dw, k as isize, 1,
        );
        dw
    });
    drop(cols);
    let dx = need_input.then(|| {
        let mut dx = vec![T::zero(); g.in_plane()];
        if pointwise {
            T::gemm(
                k, g.out_ch, p, T::one(), kernel, 1, k as isize, d_b, p as isize, 1,
                T::zero(), &mut dx, p as isize, 1,
            );
        } else {
            let mut dcols = vec![T::zero(); k * p];
            T::gemm(
                k, g.out_ch, p, T::one(), kernel, 1, k as isize, d_b, p as isize, 1,
                T::zero(), &mut dcols, p as isize, 1,
            );
            col2im(g, &dcols, &mut dx);
        }
        dx
    });
    (dx, dw)
}

pub(crate) fn conv2d_backward<T: Real>(
    g: &ConvGeom,
    x: &[T],
    kernel: &[T],
    dout: &[T],
    need_input: bool,
    need_kernel: bool,
    need_bias: bool,
) -> ConvGrads<T> {
    let p = g.out_pixels();
    let wlen = g.out_ch * g.patch_len();

    let per_item: Vec<(Option<Vec<T>>, Option<Vec<T>>)> = (0..g.batch)
        .into_par_iter()
        .map(|b| {
            let x_b = &x[b * g.in_plane()..(b + 1) * g.in_plane()];
            let d_b = &dout[b * g.out_plane()..(b + 1) * g.out_plane()];
            if g.stride == 1 && !g.is_pointwise() {
                conv_item_backward_shifted(g, x_b, kernel, d_b, need_input, need_kernel)
            } else {
                conv_item_backward_im2col(g, x_b, kernel, d_b, need_input, need_kernel)
            }
        })
        .collect();

    let mut input = need_input.then(|| Vec::with_capacity(g.batch * g.in_plane()));
    let mut kernel_grad = need_kernel.then(|| vec![T::zero(); wlen]);
    for (dx, dw) in per_item {
        if let (Some(acc), Some(dx)) = (input.as_mut(), dx) {
            acc.extend_from_slice(&dx);
        }
        if let (Some(acc), Some(dw)) = (kernel_grad.as_mut(), dw) {
            for (a, v) in acc.iter_mut().zip(dw) {
                *a += v;
            }
        }
    }
    let bias = need_bias.then(|| {
        let mut db = vec![T::zero(); g.out_ch];
        for b in 0..g.batch {
            let d_b = &dout[b * g.out_plane()..(b + 1) * g.out_plane()];
            for (co, row) in d_b.chunks(p).enumerate() {
                db[co] += row.iter().copied().sum::<T>();
            }
        }
        db
    });
    ConvGrads {
        input,
        kernel: kernel_grad,
        bias,
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct PoolGeom {
    pub planes: usize,
    pub height: usize,
    pub width: usize,
    pub window: usize,
    pub stride: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl PoolGeom {
    pub fn new<T: Real>(input: &Tensor<T>, window: usize, stride: usize) -> Result<Self> {
        let (b, ch, height, width) = input.dims4("pool2d")?;
        if window == 0 || stride == 0 {
            return Err(Error::invalid("pool2d", "window and stride must be at least 1"));
        }
        if window > height || window > width {
            return Err(Error::invalid(
                "pool2d",
                format!("window {window} exceeds spatial extents {height}x{width}"),
            ));
        }
        Ok(Self {
            planes: b * ch,
            height,
            width,
            window,
            stride,
            out_h: (height - window) / stride + 1,
            out_w: (width - window) / stride + 1,
        })
    }
}

/// Returns pooled values and, per output, the flat in-plane index of the
/// first maximum in row-major order.
pub(crate) fn max_pool_forward<T: Real>(g: &PoolGeom, x: &[T]) -> (Vec<T>, Vec<u32>) {
    let (hw, ohw) = (g.height * g.width, g.out_h * g.out_w);
    let mut out = vec![T::zero(); g.planes * ohw];
    let mut arg = vec![0u32; g.planes * ohw];
    for pl in 0..g.planes {
        let plane = &x[pl * hw..(pl + 1) * hw];
        for oh in 0..g.out_h {
            for ow in 0..g.out_w {
                let mut best = T::neg_infinity();
                let mut best_idx = 0usize;
                for i in 0..g.window {
                    for j in 0..g.window {
                        let idx = (oh * g.stride + i) * g.width + ow * g.stride + j;
                        if plane[idx] > best {
                            best = plane[idx];
                            best_idx = idx;
                        }
                    }
                }
                out[pl * ohw + oh * g.out_w + ow] = best;
                arg[pl * ohw + oh * g.out_w + ow] = best_idx as u32;
            }
        }
    }
    (out, arg)
}

pub(crate) fn max_pool_backward<T: Real>(g: &PoolGeom, arg: &[u32], dout: &[T]) -> Vec<T> {
    let (hw, ohw) = (g.height * g.width, g.out_h * g.out_w);
    let mut dx = vec![T::zero(); g.planes * hw];
    for pl in 0..g.planes {
        for o in 0..ohw {
            dx[pl * hw + arg[pl * ohw + o] as usize] += dout[pl * ohw + o];
        }
    }
    dx
}

pub(crate) fn avg_pool_forward<T: Real>(g: &PoolGeom, x: &[T]) -> Vec<T> {
    let (hw, ohw) = (g.height * g.width, g.out_h * g.out_w);
    let inv = c::<T>(1.0 / (g.window * g.window) as f64);
    let mut out = vec![T::zero(); g.planes * ohw];
    for pl in 0..g.planes {
        let plane = &x[pl * hw..(pl + 1) * hw];
        for oh in 0..g.out_h {
            for ow in 0..g.out_w {
                let mut acc = T::zero();
                for i in 0..g.window {
                    let row = (oh * g.stride + i) * g.width + ow * g.stride;
                    for j in 0..g.window {
                        acc += plane[row + j];
                    }
                }
                out[pl * ohw + oh * g.out_w + ow] = acc * inv;
            }
        }
    }
    out
}

pub(crate) fn avg_pool_backward<T: Real>(g: &PoolGeom, dout: &[T]) -> Vec<T> {
    let (hw, ohw) = (g.height * g.width, g.out_h * g.out_w);
    let inv = c::<T>(1.0 / (g.window * g.window) as f64);
    let mut dx = vec![T::zero(); g.planes * hw];
    for pl in 0..g.planes {
        for oh in 0..g.out_h {
            for ow in 0..g.out_w {
                let d = dout[pl * ohw + oh * g.out_w + ow] * inv;
                for i in 0..g.window {
                    let row = pl * hw + (oh * g.stride + i) * g.width + ow * g.stride;
                    for j in 0..g.window {
                        dx[row + j] += d;
                    }
                }
            }
        }
    }
    dx
}

/// Per-channel batch mean and biased variance over `(batch, height, width)`,
/// accumulated in double precision.
pub(crate) fn channel_moments<T: Real>(x: &Tensor<T>) -> Result<(Vec<f64>, Vec<f64>)> {
    let (b, ch, h, w) = x.dims4("batch_norm")?;
    let hw = h * w;
    let n = (b * hw) as f64;
    let data = x.data();
    let mut mean = vec![0.0; ch];
    let mut var = vec![0.0; ch];
    for c in 0..ch {
        let mut s = 0.0;
        for bi in 0..b {
            let base = (bi * ch + c) * hw;
            s += data[base..base + hw].iter().map(|v| v.as_f64()).sum::<f64>();
        }
        let m = s / n;
        let mut ss = 0.0;
        for bi in 0..b {
            let base = (bi * ch + c) * hw;
            ss += data[base..base + hw]
                .iter()
                .map(|v| {
                    let d = v.as_f64() - m;
                    d * d
                })
                .sum::<f64>();
        }
        mean[c] = m;
        var[c] = ss / n;
    }
    Ok((mean, var))
}

/// `y = gamma * (x - mean) * inv_std + beta`, per channel.
pub(crate) fn affine_normalize<T: Real>(
    x: &Tensor<T>,
    mean: &[T],
    inv_std: &[T],
    gamma: &[T],
    beta: &[T],
) -> Vec<T> {
    let shape = x.shape();
    let (b, ch) = (shape[0], shape[1]);
    let hw = shape[2] * shape[3];
    let mut out = Vec::with_capacity(x.len());
    for bi in 0..b {
        for c in 0..ch {
            let base = (bi * ch + c) * hw;
            let scale = gamma[c] * inv_std[c];
            let shift = beta[c] - mean[c] * scale;
            out.extend(x.data()[base..base + hw].iter().map(|&v| v * scale + shift));
        }
    }
    out
}

pub(crate) struct NormGrads<T> {
    pub input: Vec<T>,
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
}

/// Backward of batch normalization. With `batch_stats` the mean and variance
/// are functions of the input (training mode); otherwise they are constants.
pub(crate) fn batch_norm_backward<T: Real>(
    x: &Tensor<T>,
    mean: &[T],
    inv_std: &[T],
    gamma: &[T],
    dout: &[T],
    batch_stats: bool,
) -> NormGrads<T> {
    let shape = x.shape();
    let (b, ch) = (shape[0], shape[1]);
    let hw = shape[2] * shape[3];
    let n = c::<T>((b * hw) as f64);
    let data = x.data();
    let mut dgamma = vec![T::zero(); ch];
    let mut dbeta = vec![T::zero(); ch];
    for c in 0..ch {
        for bi in 0..b {
            let base = (bi * ch + c) * hw;
            for i in base..base + hw {
                let xhat = (data[i] - mean[c]) * inv_std[c];
                dgamma[c] += dout[i] * xhat;
                dbeta[c] += dout[i];
            }
        }
    }
    let mut dx = vec![T::zero(); x.len()];
    for c in 0..ch {
        for bi in 0..b {
            let base = (bi * ch + c) * hw;
            for i in base..base + hw {
                dx[i] = if batch_stats {
                    let xhat = (data[i] - mean[c]) * inv_std[c];
                    gamma[c] * inv_std[c] / n * (n * dout[i] - dbeta[c] - xhat * dgamma[c])
                } else {
                    gamma[c] * inv_std[c] * dout[i]
                };
            }
        }
    }
    NormGrads {
        input: dx,
        gamma: dgamma,
        beta: dbeta,
    }
}

pub(crate) fn upsample_forward<T: Real>(x: &Tensor<T>, factor: usize) -> Result<Tensor<T>> {
    let (b, ch, h, w) = x.dims4("upsample2d")?;
    let (oh, ow) = (h * factor, w * factor);
    let mut out = Vec::with_capacity(b * ch * oh * ow);
    for plane in x.data().chunks(h * w) {
        for r in 0..oh {
            let src = &plane[(r / factor) * w..(r / factor + 1) * w];
            for cidx in 0..ow {
                out.push(src[cidx / factor]);
            }
        }
    }
    Ok(Tensor::from_parts(vec![b, ch, oh, ow], out))
}

pub(crate) fn upsample_backward<T: Real>(shape: &[usize], factor: usize, dout: &[T]) -> Vec<T> {
    let (h, w) = (shape[2], shape[3]);
    let (oh, ow) = (h * factor, w * factor);
    let planes = shape[0] * shape[1];
    let mut dx = vec![T::zero(); planes * h * w];
    for pl in 0..planes {
        let d = &dout[pl * oh * ow..(pl + 1) * oh * ow];
        let dst = &mut dx[pl * h * w..(pl + 1) * h * w];
        for r in 0..oh {
            for cidx in 0..ow {
                dst[(r / factor) * w + cidx / factor] += d[r * ow + cidx];
            }
        }
    }
    dx
}

/// Batched Gram matrices `psi psi^T / (C*H*W)` for `[B, C, H, W]` features.
pub(crate) fn gram_forward<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (b, ch, h, w) = x.dims4("gram_matrix")?;
    let p = h * w;
    let norm = c::<T>(1.0 / (ch * p) as f64);
    let mut out = vec![T::zero(); b * ch * ch];
    for bi in 0..b {
        let psi = &x.data()[bi * ch * p..(bi + 1) * ch * p];
        T::gemm(
            ch,
            p,
            ch,
            norm,
            psi,
            p as isize,
            1,
            psi,
            1,
            p as isize,
            T::zero(),
            &mut out[bi * ch * ch..(bi + 1) * ch * ch],
            ch as isize,
            1,
        );
    }
    Ok(Tensor::from_parts(vec![b, ch, ch], out))
}

pub(crate) fn gram_backward<T: Real>(x: &Tensor<T>, dout: &[T]) -> Vec<T> {
    let s = x.shape();
    let (b, ch, p) = (s[0], s[1], s[2] * s[3]);
    let norm = c::<T>(1.0 / (ch * p) as f64);
    let mut dx = vec![T::zero(); x.len()];
    for bi in 0..b {
        let psi = &x.data()[bi * ch * p..(bi + 1) * ch * p];
        let d = &dout[bi * ch * ch..(bi + 1) * ch * ch];
        let mut sym = vec![T::zero(); ch * ch];
        for i in 0..ch {
            for j in 0..ch {
                sym[i * ch + j] = (d[i * ch + j] + d[j * ch + i]) * norm;
            }
        }
        T::gemm(
            ch,
            ch,
            p,
            T::one(),
            &sym,
            ch as isize,
            1,
            psi,
            p as isize,
            1,
            T::zero(),
            &mut dx[bi * ch * p..(bi + 1) * ch * p],
            p as isize,
            1,
        );
    }
    dx
}
