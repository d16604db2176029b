//! Minimal reverse-mode differentiation kernel.
//!
//! A [`Graph`] is a tape: every operator appends a node, and
//! [`Graph::backward`] walks the tape in reverse. Graphs are cheap to build
//! and are thrown away (or [`Graph::reset`]) after every training step.

mod gradcheck;
mod graph;
pub mod kernels;
mod tensor;

pub use gradcheck::{grad_check, grad_check_fn, GradCheckReport, OpChain};
pub use graph::{Attrs, Graph, OpCode, Var};
pub use tensor::{Real, Strided, Tensor};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum KernelError {
    #[error("{op}: shape mismatch: {detail}")]
    Shape { op: OpCode, detail: String },
    #[error("{op}: invalid attributes: {detail}")]
    Attrs { op: OpCode, detail: String },
    #[error("{op}: expected {expected} inputs, got {got}")]
    Arity { op: OpCode, expected: usize, got: usize },
    #[error("unknown opcode `{0}`")]
    UnknownOpcode(String),
    #[error("invalid tensor shape: {0}")]
    InvalidShape(String),
    #[error("backprop needs a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("backprop target was not produced by a recorded operation")]
    NoGraph,
    #[error("variable {0} does not belong to this graph")]
    UnknownVar(usize),
}
