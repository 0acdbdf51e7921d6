//! Minimal reverse-mode autodiff engine for single-sample 2D convolutional networks.

pub mod adam;
pub mod conv;
pub mod graph;
pub mod params;
pub mod real;
pub mod tensor;

pub use adam::{Adam, AdamConfig};
pub use graph::{CustomOp, Gradients, Graph, Var};
pub use params::{Bound, ParamId, ParamSet};
pub use real::Real;
pub use tensor::Tensor;
