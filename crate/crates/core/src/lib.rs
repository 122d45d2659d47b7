//! Early pruning with self-distillation.
//!
//! Prunes randomly initialized networks by ranking weights on the gradient of
//! a self-distillation objective taken through a few unrolled SGD steps, then
//! trains the surviving sub-network with the same self-distillation loss.

pub mod data;
pub mod distill;
pub mod error;
pub mod harness;
pub mod metrics;
pub mod model;
pub mod prune;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
