//! Minimal dense-tensor reverse-mode automatic differentiation.

mod error;
mod gradcheck;
mod graph;
mod tensor;

pub use error::{Result, TensorError};
pub use gradcheck::{gradient_check, relative_error, GradCheckReport, DEFAULT_STEP, REL_ERROR_FLOOR};
pub use graph::{
    hooks, BatchNormMode, BatchStats, Graph, Param, Primitive, Var, SELU_ALPHA, SELU_SCALE,
};
pub use tensor::{broadcast_shape, broadcast_to, expand_axis, matmul, reduce_to_shape, sum_axis, zip_broadcast, Tensor};
