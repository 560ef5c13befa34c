//! Reverse-mode automatic differentiation over dense row-major tensors.
//!
//! A [`Tape`] records every operation of one forward pass; parameters enter
//! as leaves copied from [`Tensor`]s and receive gradients through
//! [`Gradients::write_to`]. Only the operations the parser needs are
//! provided, several of them fused (attention, layer norm, the two losses)
//! to keep tapes short.

mod gradcheck;
mod optim;
mod scalar;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, GradCheckOptions};
pub use optim::{Optimizer, OptimizerConfig, OptimizerKind, OptimizerState, ParamGroup};
pub use scalar::{gemm, MatRef, Scalar};
pub use tape::{
    log_softmax_rows, softmax_rows, AttnLayout, AttnSegment, Gradients, OpKind, Tape, Var,
};
pub use tensor::Tensor;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum NumericsError {
    #[error("dimension error: {0}")]
    Shape(String),
    #[error("index error: {0}")]
    Index(String),
    #[error("contract violation: {0}")]
    Contract(String),
}
