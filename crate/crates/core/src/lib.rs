//! Masked pretraining for graph-neural mesh simulators.

pub mod datasets;
pub mod diffcore;
pub mod eval;
pub mod masking;
pub mod mesh;
pub mod model;
pub mod partition;
pub mod train;
mod error;

pub use error::{Error, Result};
