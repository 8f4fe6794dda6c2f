//! Tensors, named parameter sets, and the expression-graph autodiff engine.

mod graph;
mod params;
mod tensor;

pub use graph::{ComputeGraph, Evaluation, NodeId};
pub use params::ParamSet;
pub use tensor::Tensor;

pub(crate) use graph::{cross_entropy_grad, cross_entropy_value, label_indices, mse_rows_value};
