//! Dense double-precision tensors and a reverse-mode gradient tape.

mod gradcheck;
pub mod kernels;
mod tape;
mod tensor;

use thiserror::Error;

pub use gradcheck::{
    finite_difference_check, grad_check, relative_error, GradCheckReport, GradPair, DEFAULT_STEP, DEFAULT_TOL,
    REL_ERROR_FLOOR,
};
pub use tape::{BackwardStats, NodeId, Tape};
pub use tensor::Tensor;

/// Variance epsilon used by every layer norm in the crate.
pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum NumError {
    #[error("dimension mismatch in {op}: {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("{op} expects a rank-{expected} tensor, got shape {shape:?}")]
    Rank {
        op: &'static str,
        expected: usize,
        shape: Vec<usize>,
    },
    #[error("expected {expected} values, got {actual}")]
    Length { expected: usize, actual: usize },
    #[error("index {index} out of range for size {bound}")]
    Index { index: usize, bound: usize },
    #[error("contract violation: {0}")]
    Contract(String),
}
