//! Dense `f64` tensors and a tape-based reverse-mode differentiator.

mod graph;
pub mod gradcheck;
pub(crate) mod kernels;
mod tensor;

pub use graph::{CustomOp, Gradients, Graph, Var, MASK_BLOCKED};
pub use tensor::Tensor;
