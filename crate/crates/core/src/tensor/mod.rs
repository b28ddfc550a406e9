//! Dense tensors, kernels and reverse-mode differentiation.

mod graph;
pub mod kernels;
mod params;
mod scalar;
#[allow(clippy::module_inception)]
mod tensor;

pub use graph::{Graph, MacCount, Var};
pub use kernels::{conv2d, gelu, global_avg_pool, layer_norm, matmul, matmul_nt, softmax_rows};
pub use params::{ParamId, ParamStore};
pub use scalar::{DType, Scalar};
pub use tensor::Tensor;
