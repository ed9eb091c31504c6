//! Dense tensors and tape-based reverse-mode automatic differentiation.
//!
//! [`Tensor`] is a plain row-major value. Differentiable computation is
//! recorded on a [`Graph`]; learnable state lives in a [`ParamStore`] and is
//! copied onto the tape with [`Graph::param`]. Element type is a type
//! parameter: `f32` for training, `f64` for oracle and gradient checks.

pub mod error;
pub mod gemm;
pub mod gradcheck;
pub mod graph;
pub mod kernels;
pub mod param;
pub mod scalar;
pub mod tensor;

pub use error::{Result, TensorError};
pub use graph::{BatchStats, CustomOp, Gradients, Graph, Var};
pub use kernels::Window;
pub use param::{BufferId, ParamId, ParamStore, Parameter};
pub use scalar::{cast, DType, Scalar};
pub use tensor::Tensor;
