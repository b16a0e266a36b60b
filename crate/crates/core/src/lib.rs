//! Attention-based multiple instance learning with adaptive auxiliary-task
//! reweighting.
//!
//! * [`autodiff`]: reverse-mode differentiation over `f64` tensors.
//! * [`model`]: instance encoder, attention pooling, main and auxiliary heads.
//! * [`auxweight`]: strategies that weight the auxiliary-task gradient.
//! * [`data`]: synthetic morphological digit bags and IDX files.
//! * [`harness`]: Adam, training, evaluation, attention export, experiment grids.

pub mod autodiff;
pub mod auxweight;
pub mod data;
pub mod harness;
pub mod model;

mod error;

pub use error::{Error, Result};
