//! Constrained training of physics-informed neural networks with
//! feedback-linearization optimizers.

pub mod error;
pub mod graph;
pub mod harness;
pub mod jet;
pub mod metrics;
pub mod mlp;
pub mod objective;
pub mod optimizers;
pub mod problems;
pub mod special;
pub mod theory;

pub use error::{Error, Result};
pub use graph::{Component, Graph, OpCode, VarHandle};
pub use jet::Jet2;
