use thiserror::Error;

use crate::graph::OpCode;

#[derive(Debug, Error)]
pub enum Error {
    #[error("seed index {index} out of range for a graph with {dim} seed directions")]
    SeedOutOfRange { index: usize, dim: usize },

    #[error("graph dimension {0} unsupported (must be 1..=3)")]
    BadDimension(usize),

    #[error("handle does not belong to this graph")]
    ForeignHandle,

    #[error("domain error in {op:?} at node {node}: {detail}")]
    Domain {
        op: OpCode,
        node: usize,
        detail: String,
    },

    #[error("non-finite value produced by {op:?} at node {node}")]
    NonFinite { op: OpCode, node: usize },

    #[error("wrong arity: {0}")]
    Arity(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("singular constraint Gram matrix after damping escalation: {gram:?}")]
    SingularConstraint { gram: Vec<Vec<f64>> },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("training diverged at step {step}: {detail}")]
    Diverged { step: u64, detail: String },

    #[error("zero reference norm")]
    ZeroNorm,

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
