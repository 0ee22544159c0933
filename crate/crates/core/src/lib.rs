//! Layer-wise distillation of a shallow transformer from a deep one through
//! verbalized intermediate layers.
//!
//! The crate is organised by pipeline role:
//!
//! - [`numcore`]: tensors, reverse-mode differentiation, gradient checking
//! - [`model`]: decoder-only transformer with hidden-state taps
//! - [`verbalizer`]: per-layer projections into vocabulary space
//! - [`distill`]: layer matching and the interaction objectives
//! - [`train`]: optimizer, schedule, stages, evaluation, checkpoints
//! - [`data`]: synthetic prompt/response tasks and JSON-lines storage
//! - [`cli`]: command implementations behind the `vdistill` binary

pub mod data;
pub mod distill;
pub mod error;
pub mod model;
pub mod numcore;
pub mod train;
pub mod cli;
pub mod verbalizer;

pub use error::{Error, Result};
