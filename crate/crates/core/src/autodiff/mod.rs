//! Reverse-mode automatic differentiation.

mod gradcheck;
mod tape;

pub use gradcheck::{finite_difference_check, finite_difference_check_coords, GradCheck};
pub use tape::{BinaryKind, ForwardOp, Tape, UnaryKind, Var};

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AutodiffError {
    #[error("shape mismatch in {op}: {shapes:?}")]
    ShapeMismatch {
        op: &'static str,
        shapes: Vec<Vec<usize>>,
    },
    #[error("domain error in {op}: {detail}")]
    Domain { op: &'static str, detail: String },
    #[error("backward root must be a scalar, got shape {shape:?}")]
    NonScalarRoot { shape: Vec<usize> },
    #[error("{op} takes {expected} inputs, got {got}")]
    Arity {
        op: String,
        expected: usize,
        got: usize,
    },
    #[error("invalid tensor: {0}")]
    InvalidTensor(String),
}
