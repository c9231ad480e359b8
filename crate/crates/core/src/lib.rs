//! Multi-level similarity model for few-shot image recognition.
//!
//! Query images are compared against a handful of labelled support images
//! through three representations of each image: the extractor's final map
//! (image level), its global average (global level), and the map of a
//! Grad-CAM-guided object crop (object level). Each level is adjusted to a
//! common width, the three are summed, and a small sigmoid head scores
//! (class representation, query) pairs.
//!
//! The crate is `no_std` (with `alloc`) when built without the default `std`
//! feature. Dataset IO, checkpoints and the command line live in `mlsm`.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod encoder;
pub mod engine;
pub mod episode;
pub mod error;
pub mod imageops;
pub mod localizer;
pub mod model;
pub mod nn;
pub mod optim;
pub mod relation;
pub mod tensor;

pub use error::{Error, Result};
pub use model::{EpisodeBatch, MlsmModel, ModelConfig};
pub use tensor::{Real, Tensor};
