//! Dense `f64` tensor kernels with hand-written backward passes and a
//! central finite-difference gradient checker.

mod gradcheck;
pub mod ops;
mod tensor;

pub use gradcheck::{grad_check, numeric_gradient, relative_error, GradCheck};
pub use ops::{
    embedding_backward, embedding_lookup, gelu, gelu_backward, layer_norm, layer_norm_backward, log_softmax,
    log_softmax_backward, matmul, matmul_backward, LAYER_NORM_EPS,
};
pub use tensor::Tensor;
