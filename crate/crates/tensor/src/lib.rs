//! Deterministic reverse-mode automatic differentiation over dense,
//! row-major tensors.
//!
//! A [`Graph`] is a tape: every op appends a node whose inputs were
//! created earlier, so a single reverse sweep visits each node once.
//! Gradients are accumulated additively across fan-out. Everything is
//! single-threaded and uses fixed loop orders, so evaluating the same
//! seeded graph twice gives bitwise-identical values and gradients.

mod error;
mod graph;
mod kernels;
mod real;
mod tensor;

pub mod gradcheck;
pub mod nn;
pub mod optim;

pub use error::TensorError;
pub use graph::{Graph, NodeId, Reduction};
pub use real::Real;
pub use tensor::Tensor;

pub type Result<T, E = TensorError> = std::result::Result<T, E>;
