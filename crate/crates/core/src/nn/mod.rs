//! Minimal CPU tensor and reverse-mode autodiff engine used by the networks,
//! losses and trainer.

pub(crate) mod conv;
pub mod graph;
pub mod optim;
pub mod params;
pub mod tensor;

pub use graph::{Grads, Graph, Var};
pub use optim::{Adam, AdamConfig};
pub use params::ParamStore;
pub use tensor::Tensor;
