//! Music source separation with spectrogram feature losses.

pub mod config;
pub mod data;
pub mod dsp;
pub mod error;
pub mod eval;
pub mod featloss;
pub mod mmdense;
pub mod separation;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Graph, Real, Tensor, Var};
