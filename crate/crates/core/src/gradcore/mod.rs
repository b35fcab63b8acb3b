//! Small dense reverse-mode autodiff engine.
//!
//! A [`Graph`] records tensor operations as they are evaluated; calling
//! [`Graph::backward`] on a scalar node propagates gradients to every leaf.
//! Only the primitives needed by MLP encoders, the pre-training losses and the
//! Gaussian policy are provided. [`Adam`] updates parameter tensors in place.

mod adam;
pub mod check;
mod graph;
mod tensor;

pub use adam::{adam_step, Adam, AdamState};
pub use graph::{log_mean_exp, DiffNode, Gradients, Graph, Op, Var};
pub(crate) use graph::affine_forward;
pub use tensor::Tensor;

/// Smoothing added under the square root of every embedding norm.
pub const DEFAULT_NORM_EPS: f64 = 1e-12;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum GradError {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("{0} of an empty input")]
    EmptyInput(&'static str),
    #[error("backward root must be a scalar, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),
    #[error("non-finite gradient for parameter `{0}`")]
    NonFinite(String),
    #[error("{0}")]
    InvalidArgument(String),
}

#[cfg(test)]
mod tests;
