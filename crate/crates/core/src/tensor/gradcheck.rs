//! Central finite-difference gradient checking.
//!
//! The numeric side only ever evaluates the forward pass, so it is
//! independent of every backward kernel it checks.

use super::{Graph, Tensor, Var};
use crate::error::Result;

/// Outcome of [`check_gradients`].
#[derive(Debug, Clone)]
pub struct GradCheck {
    /// Largest `|analytic - numeric| / max(|analytic|, |numeric|, abs_floor)`.
    pub max_rel_error: f64,
    /// `(input index, element index)` of the worst element.
    pub worst: (usize, usize),
    pub checked: usize,
    /// Elements left out because the function is not smooth within one step.
    pub skipped: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    pub step: f64,
    /// Magnitudes below this are compared absolutely.
    pub abs_floor: f64,
    /// Check at most this many elements per input, evenly strided.
    pub max_elements_per_input: usize,
    /// When set, skip elements where a ReLU or max-pool switch lies within
    /// one step. On a smooth function the gap between the forward and
    /// backward one-sided differences is `step * f''` to third order, so it
    /// halves with the step; elements whose gap departs from that by more
    /// than this relative amount are skipped.
    pub kink_tolerance: Option<f64>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            abs_floor: 1e-6,
            max_elements_per_input: usize::MAX,
            kink_tolerance: None,
        }
    }
}

/// Compare reverse-mode gradients of the scalar produced by `build` against
/// central differences. `build` receives one graph variable per input, all
/// created with `requires_grad`.
pub fn check_gradients<F>(inputs: &[Tensor<f64>], opts: GradCheckOptions, build: F) -> Result<GradCheck>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let vars = values
            .iter()
            .map(|t| g.param(t.clone()))
            .collect::<Result<Vec<_>>>()?;
        let out = build(&mut g, &vars)?;
        Ok(g.value(out).item())
    };

    let mut g = Graph::new();
    let vars = inputs
        .iter()
        .map(|t| g.param(t.clone()))
        .collect::<Result<Vec<_>>>()?;
    let out = build(&mut g, &vars)?;
    let base = g.value(out).item();
    g.backward(out)?;
    let analytic: Vec<Tensor<f64>> = vars
        .iter()
        .map(|&v| g.grad(v).cloned().expect("leaf gradient"))
        .collect();
    drop(g);

    let mut report = GradCheck {
        max_rel_error: 0.0,
        worst: (0, 0),
        checked: 0,
        skipped: 0,
    };
    let mut probe = inputs.to_vec();
    for (ti, input) in inputs.iter().enumerate() {
        let n = input.len();
        let stride = n.div_ceil(opts.max_elements_per_input.max(1)).max(1);
        for ei in (0..n).step_by(stride) {
            let orig = input.data()[ei];
            probe[ti].data_mut()[ei] = orig + opts.step;
            let plus = eval(&probe)?;
            probe[ti].data_mut()[ei] = orig - opts.step;
            let minus = eval(&probe)?;
            probe[ti].data_mut()[ei] = orig;
            let numeric = (plus - minus) / (2.0 * opts.step);
            if let Some(tol) = opts.kink_tolerance {
                let half = opts.step / 2.0;
                probe[ti].data_mut()[ei] = orig + half;
                let plus_half = eval(&probe)?;
                probe[ti].data_mut()[ei] = orig - half;
                let minus_half = eval(&probe)?;
                probe[ti].data_mut()[ei] = orig;
                let gap = (plus - 2.0 * base + minus) / opts.step;
                let gap_half = (plus_half - 2.0 * base + minus_half) / half;
                let scale = ((plus - base) / opts.step)
                    .abs()
                    .max(((base - minus) / opts.step).abs())
                    .max(opts.abs_floor);
                if (gap - 2.0 * gap_half).abs() / scale > tol {
                    report.skipped += 1;
                    continue;
                }
            }
            let a = analytic[ti].data()[ei];
            let denom = a.abs().max(numeric.abs()).max(opts.abs_floor);
            let rel = (a - numeric).abs() / denom;
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = (ti, ei);
            }
            report.checked += 1;
        }
    }
    Ok(report)
}
