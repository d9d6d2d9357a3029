//! BSS-Eval decomposition of an estimate against true sources, allowing a
//! short FIR distortion of each reference.
//!
//! The estimate is zero-padded by `filter_len - 1` samples so every delayed
//! reference fits entirely, which makes the delay Gram matrix block-Toeplitz
//! and lets all inner products come from FFT cross-correlations.

use nalgebra::{Cholesky, DMatrix, DVector};
use rayon::prelude::*;
use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use super::Db;
use crate::error::{Error, Result};

/// Energy ratios above this are reported as +inf.
pub const PERFECT_RATIO: f64 = 1e20;

#[derive(Debug, Clone, PartialEq)]
pub struct Decomposition {
    pub s_target: Vec<f64>,
    pub e_interf: Vec<f64>,
    pub e_artif: Vec<f64>,
}

impl Decomposition {
    pub fn scores(&self) -> Scores {
        let energy = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>();
        let sum_energy = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x + y).powi(2)).sum::<f64>();
        let target = energy(&self.s_target);
        Scores {
            sdr: ratio_db(target, sum_energy(&self.e_interf, &self.e_artif)),
            sir: ratio_db(target, energy(&self.e_interf)),
            sar: ratio_db(sum_energy(&self.s_target, &self.e_interf), energy(&self.e_artif)),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    pub sdr: f64,
    pub sir: f64,
    pub sar: f64,
}

/// `10 log10(num / den)`, +inf for (numerically) zero denominators.
pub fn ratio_db(num: f64, den: f64) -> f64 {
    if den <= 0.0 || num > den * PERFECT_RATIO {
        return f64::INFINITY;
    }
    10.0 * (num / den).log10()
}

fn energy(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum()
}

struct Spectra {
    nfft: usize,
    planner: FftPlanner<f64>,
}

impl Spectra {
    fn forward(&mut self, x: &[f64]) -> Vec<Complex64> {
        let mut buf: Vec<Complex64> = x.iter().map(|&v| Complex64::new(v, 0.0)).collect();
        buf.resize(self.nfft, Complex64::new(0.0, 0.0));
        self.planner.plan_fft_forward(self.nfft).process(&mut buf);
        buf
    }

    fn inverse(&mut self, mut buf: Vec<Complex64>) -> Vec<f64> {
        self.planner.plan_fft_inverse(self.nfft).process(&mut buf);
        let s = 1.0 / self.nfft as f64;
        buf.iter().map(|z| z.re * s).collect()
    }

    /// `c[k] = sum_n a[n] b[n + k]` at circular index `k mod nfft`.
    fn correlate(&mut self, fa: &[Complex64], fb: &[Complex64]) -> Vec<f64> {
        let prod = fa.iter().zip(fb).map(|(x, y)| x.conj() * y).collect();
        self.inverse(prod)
    }
}

/// Least-squares projection coefficients, with escalating diagonal loading
/// when the normal equations are numerically singular.
fn solve_normal(gram: DMatrix<f64>, rhs: &DVector<f64>, filter_len: usize) -> Result<DVector<f64>> {
    let n = gram.nrows();
    let mean_diag = gram.trace() / n as f64;
    for loading in [0.0, 1e-12, 1e-10, 1e-8, 1e-6] {
        let mut g = gram.clone();
        for i in 0..n {
            g[(i, i)] += loading * mean_diag;
        }
        if let Some(ch) = Cholesky::new(g) {
            let x = ch.solve(rhs);
            if x.iter().all(|v| v.is_finite()) {
                return Ok(x);
            }
        }
    }
    Err(Error::Singular(format!(
        "delay Gram matrix of size {n} is not positive definite; try a smaller filter_len than {filter_len}"
    )))
}

/// Split `estimate` into target, interference and artifact components.
/// All three have length `estimate.len() + filter_len - 1`.
pub fn bss_decompose(
    estimate: &[f64],
    references: &[Vec<f64>],
    target: usize,
    filter_len: usize,
) -> Result<Decomposition> {
    let n = estimate.len();
    if target >= references.len() {
        return Err(Error::invalid(
            "bss_decompose",
            format!("target index {target} out of {} references", references.len()),
        ));
    }
    if filter_len == 0 || n == 0 {
        return Err(Error::invalid("bss_decompose", "empty signal or zero filter length"));
    }
    if let Some(r) = references.iter().find(|r| r.len() != n) {
        return Err(Error::invalid(
            "bss_decompose",
            format!("reference length {} differs from estimate length {n}", r.len()),
        ));
    }
    if energy(&references[target]) == 0.0 {
        return Err(Error::Singular("target reference is silent".into()));
    }
    // silent interferers add only zero columns
    let active: Vec<usize> = std::iter::once(target)
        .chain((0..references.len()).filter(|&j| j != target && energy(&references[j]) > 0.0))
        .collect();
    let l = filter_len;
    let out_len = n + l - 1;
    let mut sp = Spectra {
        nfft: (n + l).next_power_of_two(),
        planner: FftPlanner::new(),
    };
    let fr: Vec<Vec<Complex64>> = active.iter().map(|&j| sp.forward(&references[j])).collect();
    let fe = sp.forward(estimate);
    let nfft = sp.nfft;

    let m = active.len() * l;
    let mut gram = DMatrix::zeros(m, m);
    for (a, fa) in fr.iter().enumerate() {
        for (b, fb) in fr.iter().enumerate().skip(a) {
            let c = sp.correlate(fa, fb);
            // G[(a, d1), (b, d2)] = c[d1 - d2]
            for d1 in 0..l {
                for d2 in 0..l {
                    let k = (d1 + nfft - d2) % nfft;
                    gram[(a * l + d1, b * l + d2)] = c[k];
                    gram[(b * l + d2, a * l + d1)] = c[k];
                }
            }
        }
    }
    let mut rhs = DVector::zeros(m);
    for (a, fa) in fr.iter().enumerate() {
        let c = sp.correlate(fa, &fe);
        for d in 0..l {
            rhs[a * l + d] = c[d];
        }
    }

    let project = |coef: &[f64], blocks: usize, sp: &mut Spectra| -> Vec<f64> {
        let mut acc = vec![Complex64::new(0.0, 0.0); nfft];
        for (a, f) in fr.iter().take(blocks).enumerate() {
            let fc = sp.forward(&coef[a * l..(a + 1) * l]);
            for ((o, x), y) in acc.iter_mut().zip(&fc).zip(f) {
                *o += x * y;
            }
        }
        let mut y = sp.inverse(acc);
        y.truncate(out_len);
        y
    };

    let all = solve_normal(gram.clone(), &rhs, l)?;
    let p_all = project(all.as_slice(), active.len(), &mut sp);
    let tt = gram.view((0, 0), (l, l)).into_owned();
    let own = solve_normal(tt, &rhs.rows(0, l).into_owned(), l)?;
    let s_target = project(own.as_slice(), 1, &mut sp);

    let mut e_pad = estimate.to_vec();
    e_pad.resize(out_len, 0.0);
    let e_interf = p_all.iter().zip(&s_target).map(|(p, s)| p - s).collect();
    let e_artif = e_pad.iter().zip(&p_all).map(|(e, p)| e - p).collect();
    Ok(Decomposition {
        s_target,
        e_interf,
        e_artif,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WindowConfig {
    pub window: usize,
    pub hop: usize,
    pub filter_len: usize,
}

impl Default for WindowConfig {
    fn default() -> Self {
        Self {
            window: 44_100,
            hop: 44_100,
            filter_len: 512,
        }
    }
}

impl WindowConfig {
    pub fn window_count(&self, len: usize) -> usize {
        if len < self.window || self.hop == 0 {
            0
        } else {
            (len - self.window) / self.hop + 1
        }
    }
}

/// Per-window scores of one source. Undefined windows (silent target) hold NaN.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FramewiseScores {
    pub source: String,
    pub window: usize,
    pub hop: usize,
    pub sdr: Vec<Db>,
    pub sir: Vec<Db>,
    pub sar: Vec<Db>,
}

impl FramewiseScores {
    pub fn median_sdr(&self) -> Db {
        median(&self.sdr)
    }
}

/// Median of the defined values; even counts average the middle two.
pub fn median(values: &[Db]) -> Db {
    let mut v: Vec<f64> = values.iter().map(|d| d.0).filter(|x| !x.is_nan()).collect();
    if v.is_empty() {
        return Db(f64::NAN);
    }
    v.sort_by(f64::total_cmp);
    let k = v.len() / 2;
    Db(if v.len() % 2 == 1 {
        v[k]
    } else {
        let (a, b) = (v[k - 1], v[k]);
        if a == b {
            a
        } else {
            0.5 * (a + b)
        }
    })
}

/// Score every window; windows run in parallel and are collected in order.
pub fn framewise_scores(
    source: &str,
    estimate: &[f64],
    references: &[Vec<f64>],
    target: usize,
    cfg: &WindowConfig,
) -> Result<FramewiseScores> {
    let count = cfg.window_count(estimate.len());
    if count == 0 {
        return Err(Error::invalid(
            "framewise_median",
            format!("signal of {} samples is shorter than one {}-sample window", estimate.len(), cfg.window),
        ));
    }
    let per_window: Vec<Result<Option<Scores>>> = (0..count)
        .into_par_iter()
        .map(|w| {
            let range = w * cfg.hop..w * cfg.hop + cfg.window;
            let refs: Vec<Vec<f64>> = references.iter().map(|r| r[range.clone()].to_vec()).collect();
            if energy(&refs[target]) == 0.0 {
                return Ok(None);
            }
            Ok(Some(bss_decompose(&estimate[range], &refs, target, cfg.filter_len)?.scores()))
        })
        .collect();
    let mut out = FramewiseScores {
        source: source.to_string(),
        window: cfg.window,
        hop: cfg.hop,
        sdr: Vec::with_capacity(count),
        sir: Vec::with_capacity(count),
        sar: Vec::with_capacity(count),
    };
    for s in per_window {
        let s = s?;
        let get = |f: fn(&Scores) -> f64| Db(s.as_ref().map_or(f64::NAN, f));
        out.sdr.push(get(|s| s.sdr));
        out.sir.push(get(|s| s.sir));
        out.sar.push(get(|s| s.sar));
    }
    Ok(out)
}

/// Framewise scores plus their median SDR; fails when no window is defined.
pub fn framewise_median(
    source: &str,
    estimate: &[f64],
    references: &[Vec<f64>],
    target: usize,
    cfg: &WindowConfig,
) -> Result<(FramewiseScores, f64)> {
    let scores = framewise_scores(source, estimate, references, target, cfg)?;
    let m = scores.median_sdr();
    if m.0.is_nan() {
        return Err(Error::invalid(
            "framewise_median",
            format!("source `{source}`: every window has a silent reference"),
        ));
    }
    Ok((scores, m.0))
}
