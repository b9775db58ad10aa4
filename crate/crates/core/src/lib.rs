//! Entropy-KL selective fine-tuning on a tiny transformer: kernels, model,
//! token selection, objectives, training loops, synthetic tasks, evaluation
//! and analysis.

pub mod analyze;
pub mod error;
pub mod eval;
pub mod model;
pub mod numerics;
pub mod objective;
pub mod selection;
pub mod tasks;
pub mod train;

pub use error::{Error, Result};
