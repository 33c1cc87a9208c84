//! Minimal dense tensor and reverse-mode differentiation engine backing the
//! denoiser, control branch and conditioning projections.

mod graph;
mod params;
mod tensor;

pub use graph::{Graph, NodeId};
pub use params::{ParamGrads, ParamId, ParamStore};
pub use tensor::Tensor;
