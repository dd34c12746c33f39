//! Minimal reverse-mode differentiation over dense `f64` matrices.
//!
//! A [`Graph`] is built once per mini-batch from primitive ops, evaluated
//! with [`Graph::forward`] against a slice of parameter tensors, and
//! differentiated with [`Evaluation::backward`]. Parameters are leaves
//! addressed by [`ParamId`], so the same graph can be re-evaluated under
//! perturbed bindings (see [`finite_diff_check`]).

mod check;
mod graph;
mod tensor;

pub use check::{finite_diff_check, FiniteDiffReport};
pub use graph::{Evaluation, Gradients, Graph, NodeId, ParamId};
pub use tensor::{log_softmax, log_softmax_rows, softmax, softmax_rows, Tensor};

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum DiffError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("log of non-positive value {0}")]
    LogDomain(f64),
    #[error("backward seed must be scalar, got shape {0:?}")]
    NonScalar(Vec<usize>),
    #[error("parameter {0} is not bound")]
    Unbound(usize),
}
