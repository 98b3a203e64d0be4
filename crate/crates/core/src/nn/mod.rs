//! Minimal deterministic neural-network toolkit: tensors, tape autograd,
//! parameter stores and Adam.

pub mod check;
mod graph;
mod params;
mod tensor;

pub use graph::{Grads, Graph, Var};
pub use params::{
    init_conv, init_linear, init_zero, normal, uniform, Adam, AdamConfig, Bound, Params,
};
pub use tensor::{Real, Tensor};
