//! Reverse-mode automatic differentiation over dense row-major tensors.
//!
//! Everything is generic over [`Scalar`] (implemented for `f32` and `f64`):
//! training runs in `f32`, gradient checks in `f64`.

mod error;
pub mod gradcheck;
mod graph;
mod kernels;
pub mod optim;
mod params;
mod scalar;
mod tensor;

pub use error::{Result, TensorError};
pub use graph::{Gradients, Graph, Var};
pub use optim::{clip_grad_norm, global_norm, AdamW, AdamWConfig};
pub use params::{ParamId, ParamStore};
pub use scalar::{DType, Scalar};
pub use tensor::Tensor;

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Graph32 = Graph<f32>;
pub type Graph64 = Graph<f64>;
