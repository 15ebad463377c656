//! Minimal reverse-mode differentiation over `f64` tensors.
//!
//! A [`Graph`] records every operation of one forward pass; node indices
//! double as a topological order, so [`Graph::backward`] is a single
//! reverse sweep that visits each operation once. Only the operations the
//! detector needs are provided, each with an exact shape contract (no
//! broadcasting).

pub mod gradcheck;
mod graph;
pub(crate) mod kernels;
mod tensor;

pub use graph::{Graph, Var};
pub use kernels::{maxpool3x3_same, sigmoid};
pub use tensor::Tensor;
