use thiserror::Error;

/// Errors raised by tensor primitives and the gradient machinery.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum TensorError {
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: argument out of domain at element {index}")]
    Domain { op: &'static str, index: usize },

    #[error("{op}: produced a non-finite value at element {index}")]
    NonFinite { op: &'static str, index: usize },

    #[error("{op}: axis {axis} out of range for rank {rank}")]
    InvalidAxis {
        op: &'static str,
        axis: usize,
        rank: usize,
    },

    #[error("buffer of length {got} does not fill shape {shape:?}")]
    BadBuffer { shape: Vec<usize>, got: usize },

    #[error("backward root must be a scalar, got shape {shape:?}")]
    NonScalarRoot { shape: Vec<usize> },

    #[error("variables belong to different graphs")]
    GraphMismatch,

    #[error("{op}: expected {expected} inputs, got {got}")]
    Arity {
        op: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("contract violated: {0}")]
    Contract(String),
}

pub type Result<T, E = TensorError> = std::result::Result<T, E>;
