use serde::{Deserialize, Serialize};

use super::{c, Real, Tensor};
use crate::error::{Error, Result};

/// RMSProp hyperparameters plus the plateau schedule that drops the learning
/// rate once.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub learning_rate: f64,
    pub dropped_rate: f64,
    pub rho: f64,
    pub epsilon: f64,
    pub patience: usize,
}

impl Default for OptimizerState {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            dropped_rate: 1e-4,
            rho: 0.9,
            epsilon: 1e-8,
            patience: 3,
        }
    }
}

/// RMSProp with one squared-gradient accumulator per parameter:
/// `acc = rho*acc + (1-rho)*g^2`, `p -= lr * g / (sqrt(acc) + eps)`.
#[derive(Debug, Clone)]
pub struct RmsProp<T: Real = f64> {
    pub rho: f64,
    pub epsilon: f64,
    accumulators: Vec<Vec<T>>,
}

impl<T: Real> RmsProp<T> {
    pub fn new(rho: f64, epsilon: f64) -> Self {
        Self {
            rho,
            epsilon,
            accumulators: Vec::new(),
        }
    }

    pub fn accumulators(&self) -> &[Vec<T>] {
        &self.accumulators
    }

    /// Update `params[i]` in place with `grads[i]`. The parameter list must
    /// keep the same order and shapes across calls.
    pub fn step(&mut self, lr: f64, params: &mut [&mut Tensor<T>], grads: &[&Tensor<T>]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::invalid(
                "rmsprop_step",
                format!("{} parameters but {} gradients", params.len(), grads.len()),
            ));
        }
        if self.accumulators.is_empty() {
            self.accumulators = params.iter().map(|p| vec![T::zero(); p.len()]).collect();
        }
        if self.accumulators.len() != params.len() {
            return Err(Error::invalid("rmsprop_step", "parameter list changed between steps"));
        }
        for (p, g) in params.iter().zip(grads) {
            if p.shape() != g.shape() {
                return Err(Error::shape("rmsprop_step", p.shape(), g.shape()));
            }
        }
        let (rho, one_minus) = (c::<T>(self.rho), c::<T>(1.0 - self.rho));
        let (lr, eps) = (c::<T>(lr), c::<T>(self.epsilon));
        for ((p, g), acc) in params.iter_mut().zip(grads).zip(&mut self.accumulators) {
            if acc.len() != p.len() {
                return Err(Error::invalid("rmsprop_step", "parameter size changed between steps"));
            }
            for ((pv, &gv), a) in p.data_mut().iter_mut().zip(g.data()).zip(acc.iter_mut()) {
                *a = rho * *a + one_minus * gv * gv;
                *pv -= lr * gv / (a.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Plateau schedule: drops from the initial to the dropped rate once, when
/// the best validation loss has not improved for `patience` consecutive epochs.
#[derive(Debug, Clone, PartialEq)]
pub struct LrSchedule {
    initial: f64,
    dropped: f64,
    patience: usize,
    best: f64,
    stale: usize,
    dropped_at: Option<usize>,
    epochs: usize,
}

impl LrSchedule {
    pub fn new(state: &OptimizerState) -> Self {
        Self {
            initial: state.learning_rate,
            dropped: state.dropped_rate,
            patience: state.patience.max(1),
            best: f64::INFINITY,
            stale: 0,
            dropped_at: None,
            epochs: 0,
        }
    }

    pub fn learning_rate(&self) -> f64 {
        if self.dropped_at.is_some() {
            self.dropped
        } else {
            self.initial
        }
    }

    /// 1-based epoch after which the rate dropped.
    pub fn dropped_at(&self) -> Option<usize> {
        self.dropped_at
    }

    /// Record one epoch's validation loss; returns the rate for the next epoch.
    pub fn observe(&mut self, validation_loss: f64) -> f64 {
        self.epochs += 1;
        if validation_loss < self.best {
            self.best = validation_loss;
            self.stale = 0;
        } else {
            self.stale += 1;
        }
        if self.dropped_at.is_none() && self.stale >= self.patience {
            self.dropped_at = Some(self.epochs);
        }
        self.learning_rate()
    }

    /// Replay a whole loss history.
    pub fn from_history(state: &OptimizerState, losses: &[f64]) -> Self {
        let mut s = Self::new(state);
        for &l in losses {
            s.observe(l);
        }
        s
    }
}
