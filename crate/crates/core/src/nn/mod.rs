//! Minimal tensor, autodiff and optimizer layer backing the networks.

pub mod graph;
pub mod optim;
pub mod params;
pub mod tensor;

pub use graph::{BatchStats, Gradients, Graph, Var};
pub use optim::{Optimizer, OptimizerKind};
pub use params::{ParamEntry, ParamSet, ParamSnapshot};
pub use tensor::Tensor;
