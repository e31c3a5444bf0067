//! Federated multi-task learning with gradient-norm balanced loss weights.
//!
//! Each client owns one task: a private head network on top of a shared
//! representation network. Every round the clients fit their heads, compute
//! averaged gradients for the shared network and report them together with
//! their relative training progress. The server turns those reports into
//! updated per-task loss weights, aggregates the weighted gradients and steps
//! the shared network. An equal-weighting baseline and a generic
//! iterative-differentiation bilevel solver are included.

pub mod bilevel;
pub mod client;
mod error;
pub mod harness;
pub mod numerics;
pub mod server;
pub mod taskgen;

pub use error::{Error, Result};
