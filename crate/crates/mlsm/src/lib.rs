//! Dataset handling, checkpoints, training and evaluation drivers for the
//! multi-level similarity model.

pub use mlsm_core;

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod localize;
pub mod pipeline;
pub mod toy;
pub mod train;

pub use error::{Error, Result};
