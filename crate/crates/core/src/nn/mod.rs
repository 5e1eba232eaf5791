//! Minimal CPU neural-network engine: tensors, reverse-mode graph, layers and Adam.

pub mod conv;
pub mod gradcheck;
mod graph;
pub mod layers;
pub mod optim;
pub mod params;
mod tensor;

pub use conv::ConvGeom;
pub use graph::{Gradients, Graph, Var};
pub use layers::Conv2d;
pub use optim::Adam;
pub use params::{ParamId, ParamStore};
pub use tensor::Tensor;
