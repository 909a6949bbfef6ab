//! Dense tensors, reverse-mode differentiation, parameters, and the
//! adaptive-moment optimizer the denoiser trains with.

pub mod checkpoint;
pub mod gradcheck;
mod graph;
mod params;
mod tensor;

pub use graph::{Gradients, Graph, Var};
pub use params::{AdamConfig, ParamId, ParamStore};
pub use tensor::Tensor;
