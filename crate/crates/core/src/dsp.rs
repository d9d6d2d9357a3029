//! STFT analysis and weighted overlap-add synthesis, mixture-phase
//! reapplication, and fixed-width patching of magnitude spectrograms.
//!
//! The forward transform is unnormalized (a plain DFT sum), so magnitudes are
//! `sqrt(fft_size)` times their orthonormal values; the inverse divides by `fft_size`.
//! Framing is uncentred: frame `m` covers samples `[m*hop, m*hop + fft_size)`.

use std::f64::consts::PI;

use num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WindowKind {
    /// Periodic Hann: `0.5 - 0.5 cos(2 pi n / N)`.
    Hann,
    Rectangular,
}

impl WindowKind {
    pub fn samples(self, len: usize) -> Vec<f64> {
        match self {
            WindowKind::Hann => (0..len)
                .map(|n| 0.5 - 0.5 * (2.0 * PI * n as f64 / len as f64).cos())
                .collect(),
            WindowKind::Rectangular => vec![1.0; len],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StftConfig {
    pub fft_size: usize,
    pub hop: usize,
    pub window: WindowKind,
    pub patch_frames: usize,
    pub sample_rate: u32,
    /// Keep the Nyquist bin (`fft_size/2 + 1` bins) or drop it (`fft_size/2`).
    pub keep_nyquist: bool,
}

impl Default for StftConfig {
    fn default() -> Self {
        Self {
            fft_size: 2048,
            hop: 1024,
            window: WindowKind::Hann,
            patch_frames: 128,
            sample_rate: 44100,
            keep_nyquist: true,
        }
    }
}

impl StftConfig {
    pub fn bins(&self) -> usize {
        if self.keep_nyquist {
            self.fft_size / 2 + 1
        } else {
            self.fft_size / 2
        }
    }

    pub fn frames_for(&self, len: usize) -> usize {
        if len < self.fft_size {
            0
        } else {
            1 + (len - self.fft_size) / self.hop
        }
    }

    pub fn window_samples(&self) -> Vec<f64> {
        self.window.samples(self.fft_size)
    }

    /// Largest deviation of `sum_m w(n - m*hop)` from its mean over one hop
    /// period of the steady state.
    pub fn cola_deviation(&self) -> f64 {
        overlap_sum_deviation(&self.window_samples(), self.hop, |w| w)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, msg: String| Err(Error::config(format!("stft.{field}"), msg));
        if self.fft_size < 2 || !self.fft_size.is_multiple_of(2) {
            return bad("fft_size", format!("must be even and at least 2, got {}", self.fft_size));
        }
        if self.hop == 0 || self.hop > self.fft_size {
            return bad("hop", format!("must be in 1..={}, got {}", self.fft_size, self.hop));
        }
        if self.patch_frames == 0 {
            return bad("patch_frames", "must be at least 1".into());
        }
        if self.sample_rate == 0 {
            return bad("sample_rate", "must be positive".into());
        }
        let dev = self.cola_deviation();
        if dev > 1e-10 {
            return bad(
                "hop",
                format!(
                    "window/hop pair violates constant overlap-add (deviation {dev:.3e})"
                ),
            );
        }
        Ok(())
    }
}

/// Max absolute deviation from the mean of the hop-periodic overlap sum of
/// `f(w[n])`.
pub fn overlap_sum_deviation(window: &[f64], hop: usize, f: impl Fn(f64) -> f64) -> f64 {
    let sums: Vec<f64> = (0..hop)
        .map(|r| window.iter().skip(r).step_by(hop).map(|&w| f(w)).sum())
        .collect();
    let mean = sums.iter().sum::<f64>() / sums.len() as f64;
    sums.iter().map(|s| (s - mean).abs()).fold(0.0, f64::max)
}

/// Magnitude and phase planes of a multi-channel STFT, `[channels, bins, frames]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexSpectrogram {
    pub magnitude: Tensor<f64>,
    pub phase: Tensor<f64>,
    pub config: StftConfig,
    pub original_length: usize,
}

impl ComplexSpectrogram {
    pub fn channels(&self) -> usize {
        self.magnitude.shape()[0]
    }

    pub fn bins(&self) -> usize {
        self.magnitude.shape()[1]
    }

    pub fn frames(&self) -> usize {
        self.magnitude.shape()[2]
    }

    pub fn bin(&self, ch: usize, bin: usize, frame: usize) -> Complex64 {
        let idx = (ch * self.bins() + bin) * self.frames() + frame;
        Complex64::from_polar(self.magnitude.data()[idx], self.phase.data()[idx])
    }
}

fn wrap_phase(z: Complex64) -> f64 {
    let p = z.im.atan2(z.re);
    if p <= -PI {
        PI
    } else {
        p
    }
}

pub fn stft(audio: &[Vec<f64>], config: &StftConfig) -> Result<ComplexSpectrogram> {
    config.validate()?;
    let channels = audio.len();
    if channels == 0 {
        return Err(Error::invalid("stft", "no audio channels"));
    }
    let len = audio[0].len();
    if audio.iter().any(|c| c.len() != len) {
        return Err(Error::invalid("stft", "channels have different lengths"));
    }
    if len < config.fft_size {
        return Err(Error::invalid(
            "stft",
            format!(
                "audio of {len} samples is shorter than one {}-sample frame",
                config.fft_size
            ),
        ));
    }
    let n = config.fft_size;
    let frames = config.frames_for(len);
    let bins = config.bins();
    let window = config.window_samples();
    let fft = FftPlanner::<f64>::new().plan_fft_forward(n);

    let mut magnitude = vec![0.0; channels * bins * frames];
    let mut phase = vec![0.0; channels * bins * frames];
    let mut buf = vec![Complex64::new(0.0, 0.0); n];
    for (ch, samples) in audio.iter().enumerate() {
        for m in 0..frames {
            let start = m * config.hop;
            for (i, b) in buf.iter_mut().enumerate() {
                *b = Complex64::new(samples[start + i] * window[i], 0.0);
            }
            fft.process(&mut buf);
            for (k, z) in buf.iter().take(bins).enumerate() {
                let idx = (ch * bins + k) * frames + m;
                magnitude[idx] = z.norm();
                phase[idx] = wrap_phase(*z);
            }
        }
    }
    Ok(ComplexSpectrogram {
        magnitude: Tensor::new([channels, bins, frames], magnitude)?,
        phase: Tensor::new([channels, bins, frames], phase)?,
        config: config.clone(),
        original_length: len,
    })
}

/// Weighted overlap-add inverse: each inverse frame is multiplied by the
/// window and the sum is divided by the overlapped squared window. Samples
/// with no window support come out as zero.
pub fn istft(spec: &ComplexSpectrogram) -> Result<Vec<Vec<f64>>> {
    let config = &spec.config;
    let n = config.fft_size;
    let (channels, bins, frames) = (spec.channels(), spec.bins(), spec.frames());
    if bins != config.bins() {
        return Err(Error::invalid(
            "istft",
            format!("{bins} bins does not match config ({})", config.bins()),
        ));
    }
    let window = config.window_samples();
    let span = if frames == 0 { 0 } else { (frames - 1) * config.hop + n };
    let mut wsum = vec![0.0; span];
    for m in 0..frames {
        for (i, w) in window.iter().enumerate() {
            wsum[m * config.hop + i] += w * w;
        }
    }
    let ifft = FftPlanner::<f64>::new().plan_fft_inverse(n);
    let scale = 1.0 / n as f64;
    let mut out = Vec::with_capacity(channels);
    let mut buf = vec![Complex64::new(0.0, 0.0); n];
    for ch in 0..channels {
        let mut acc = vec![0.0; span];
        for m in 0..frames {
            buf.fill(Complex64::new(0.0, 0.0));
            for k in 0..bins {
                buf[k] = spec.bin(ch, k, m);
            }
            // DC and Nyquist of a real signal are real.
            buf[0].im = 0.0;
            if bins > n / 2 {
                buf[n / 2].im = 0.0;
            }
            for k in 1..n / 2 {
                buf[n - k] = buf[k].conj();
            }
            ifft.process(&mut buf);
            let start = m * config.hop;
            for i in 0..n {
                acc[start + i] += buf[i].re * scale * window[i];
            }
        }
        let mut samples: Vec<f64> = acc
            .iter()
            .zip(&wsum)
            .map(|(&a, &w)| if w > 1e-10 { a / w } else { 0.0 })
            .collect();
        samples.resize(spec.original_length, 0.0);
        out.push(samples);
    }
    Ok(out)
}

/// Range of sample indices covered by at least two frames, where synthesis
/// is exact for COLA window/hop pairs with 50% or more overlap.
pub fn interior_range(config: &StftConfig, len: usize) -> std::ops::Range<usize> {
    let frames = config.frames_for(len);
    if frames < 2 {
        return 0..0;
    }
    let end = (frames - 1) * config.hop + config.fft_size - config.hop;
    config.hop..end.min(len)
}

/// Replace the magnitude of `mixture` with `estimate`, keeping its phase.
pub fn apply_mixture_phase(
    estimate: &Tensor<f64>,
    mixture: &ComplexSpectrogram,
) -> Result<ComplexSpectrogram> {
    if estimate.shape() != mixture.magnitude.shape() {
        return Err(Error::shape(
            "apply_mixture_phase",
            estimate.shape(),
            mixture.magnitude.shape(),
        ));
    }
    Ok(ComplexSpectrogram {
        magnitude: estimate.clone(),
        phase: mixture.phase.clone(),
        config: mixture.config.clone(),
        original_length: mixture.original_length,
    })
}

/// How a frame axis was cut into patches.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CoverageMap {
    pub total_frames: usize,
    pub patch_frames: usize,
    pub patch_count: usize,
    /// Zero frames appended to the last patch.
    pub tail_padding: usize,
}

/// Cut `[channels, bins, frames]` into non-overlapping `patch_frames`-wide
/// patches from left to right, zero-padding the last one.
pub fn extract_patches(
    magnitude: &Tensor<f64>,
    patch_frames: usize,
) -> Result<(Vec<Tensor<f64>>, CoverageMap)> {
    let [ch, bins, frames] = *magnitude.shape() else {
        return Err(Error::invalid(
            "extract_patches",
            format!("expected [channels, bins, frames], got {:?}", magnitude.shape()),
        ));
    };
    if frames == 0 || patch_frames == 0 {
        return Err(Error::invalid("extract_patches", "need at least one frame and patch width >= 1"));
    }
    let patch_count = frames.div_ceil(patch_frames);
    let tail_padding = patch_count * patch_frames - frames;
    let mut patches = Vec::with_capacity(patch_count);
    for p in 0..patch_count {
        let start = p * patch_frames;
        let width = patch_frames.min(frames - start);
        let mut data = vec![0.0; ch * bins * patch_frames];
        for row in 0..ch * bins {
            let src = &magnitude.data()[row * frames + start..row * frames + start + width];
            data[row * patch_frames..row * patch_frames + width].copy_from_slice(src);
        }
        patches.push(Tensor::new([ch, bins, patch_frames], data)?);
    }
    Ok((
        patches,
        CoverageMap {
            total_frames: frames,
            patch_frames,
            patch_count,
            tail_padding,
        },
    ))
}

/// Inverse of [`extract_patches`]; padding frames are discarded.
pub fn merge_patches(patches: &[Tensor<f64>], coverage: &CoverageMap) -> Result<Tensor<f64>> {
    let consistent = coverage.patch_frames > 0
        && patches.len() == coverage.patch_count
        && coverage.patch_count * coverage.patch_frames
            == coverage.total_frames + coverage.tail_padding
        && coverage.tail_padding < coverage.patch_frames;
    if !consistent || patches.is_empty() {
        return Err(Error::invalid(
            "merge_patches",
            format!("coverage map {coverage:?} inconsistent with {} patches", patches.len()),
        ));
    }
    let shape = patches[0].shape().to_vec();
    if shape.len() != 3 || shape[2] != coverage.patch_frames || patches.iter().any(|p| p.shape() != shape) {
        return Err(Error::invalid(
            "merge_patches",
            format!("patches must all be [channels, bins, {}]", coverage.patch_frames),
        ));
    }
    let (rows, pf, frames) = (shape[0] * shape[1], coverage.patch_frames, coverage.total_frames);
    let mut data = vec![0.0; rows * frames];
    for (p, patch) in patches.iter().enumerate() {
        let start = p * pf;
        let width = pf.min(frames - start);
        for row in 0..rows {
            data[row * frames + start..row * frames + start + width]
                .copy_from_slice(&patch.data()[row * pf..row * pf + width]);
        }
    }
    Tensor::new([shape[0], shape[1], frames], data)
}
