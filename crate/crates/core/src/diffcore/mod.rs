//! Dense-array arithmetic with reverse-mode differentiation and Adam.
//!
//! Everything is 64-bit: the preference losses subtract near-equal MSE
//! values, and 32-bit precision corrupts the finite-difference checks.
//! The [`Graph`] is a single-owner tape; [`Array`]s are immutable after
//! construction.

mod adam;
mod array;
mod graph;

pub use adam::{AdamParams, AdamState};
pub use array::Array;
pub use graph::{Gradients, Graph, NodeId};
pub(crate) use graph::matmul_into;

use thiserror::Error;

/// Errors from array construction, graph ops, and optimizer steps.
#[derive(Debug, Error)]
pub enum DiffError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: unsupported shape {shape:?} ({reason})")]
    InvalidShape {
        op: &'static str,
        shape: Vec<usize>,
        reason: &'static str,
    },
    #[error("array: shape {shape:?} implies {expected} elements, data has {got}")]
    BadArrayData {
        shape: Vec<usize>,
        expected: usize,
        got: usize,
    },
    #[error("{0}: empty input list")]
    EmptyInput(&'static str),
    #[error("backward: root must be scalar, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),
    #[error("adam: non-finite gradient for parameter `{0}`")]
    NonFiniteGradient(String),
    #[error("adam: {0}")]
    OptimizerMismatch(String),
}
