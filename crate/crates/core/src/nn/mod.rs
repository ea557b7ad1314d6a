//! Minimal CPU tensor engine: NHWC tensors, a recording tape with reverse-mode
//! differentiation, the layers the segmentation and classification networks
//! need, Adam, and fused losses.

pub mod checkpoint;
mod graph;
pub mod layers;
pub mod loss;
mod optim;
mod params;
mod tensor;

pub use graph::{ConvSpec, Graph, Var};
pub use optim::Adam;
pub use params::{BnUpdate, Buffer, BufferId, Gradients, Init, Param, ParamId, ParamStore};
pub use tensor::Tensor;

#[cfg(test)]
mod gradcheck;
