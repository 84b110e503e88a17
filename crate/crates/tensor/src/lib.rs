//! Dense `f64` tensors with tape-based reverse-mode differentiation and an
//! Adam optimiser.

pub mod adam;
mod error;
mod gemm;
pub mod gradcheck;
pub mod graph;
pub mod params;
mod tensor;

pub use adam::{clip_global_norm, AdamConfig, AdamState};
pub use error::{Result, TensorError};
pub use graph::{Gradients, Graph, Var};
pub use params::{Bound, Param, ParamId, ParamStore};
pub use tensor::Tensor;
