//! Tensor-train (TT) compressed embedding tables.
//!
//! The crate is organised bottom-up:
//!
//! * [`tt`] holds the table representation, index arithmetic and the dense oracle.
//! * [`lookup`] is the reuse-optimised forward path (prefix-product buffer, sum pooling).
//! * [`backward`] computes core gradients, aggregates duplicate rows and applies fused updates.
//! * [`reorder`] builds a locality-improving index bijection from frequency and co-occurrence.
//! * [`model`] is a small DLRM-style classifier on top of the embedding layer.
//! * [`pipeline`] simulates pipelined parameter-server training with an LC-governed cache.
//! * [`data`] generates synthetic power-law datasets and handles CSV I/O.
//! * [`cli`] wires everything into the `efftt` command.

pub mod backward;
pub mod cli;
pub mod data;
pub mod error;
pub mod lookup;
pub mod model;
pub mod pipeline;
pub mod reorder;
pub mod scalar;
pub mod tt;

pub use error::{Error, Result};
pub use scalar::Scalar;
