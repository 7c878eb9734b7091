//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! Every operation is recorded in a [`Graph`] with its value computed eagerly.
//! [`Graph::grad`] walks the graph backwards and emits the adjoint computation
//! as new nodes, which is what makes gradient-of-gradient a plain second
//! `grad` call.

mod graph;
mod ops;
mod tensor;

pub use graph::{Graph, VarRef};
pub use ops::OpKind;
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("{op}: incompatible input shapes {shapes:?}")]
    ShapeMismatch {
        op: &'static str,
        shapes: Vec<Vec<usize>>,
    },
    #[error("{op}: expected {expected} inputs, got {got}")]
    Arity {
        op: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("{op}: index out of range for length {len}")]
    IndexOutOfRange { op: &'static str, len: usize },
    #[error("shape {shape:?} has a zero dimension")]
    InvalidShape { shape: Vec<usize> },
    #[error("shape {shape:?} needs {} values, got {len}", shape.iter().product::<usize>())]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("gradient output must be a scalar, got shape {shape:?}")]
    NonScalarOutput { shape: Vec<usize> },
    #[error("non-finite value at flat index {index}")]
    NonFinite { index: usize },
    #[error("node {0} does not exist in this graph")]
    UnknownNode(usize),
}
