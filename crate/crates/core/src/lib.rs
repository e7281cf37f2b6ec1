//! Event voxel set transformer.
//!
//! The crate covers the whole pipeline from raw event streams to class
//! logits:
//!
//! - [`event_io`]: event records, CSV/binary codecs, equal-duration
//!   segmentation and a brightness-threshold event simulator.
//! - [`voxelizer`]: temporal normalization, 3D grid binning, patch
//!   integration and voxel selection.
//! - [`nn`]: a small reverse-mode tensor engine with the layers, loss,
//!   optimizer, gradient checker and checkpoint format used by the models.
//! - [`mnel`] and [`vsal`]: the neighbor-embedding and voxel self-attention
//!   layers.
//! - [`model`]: encoder assembly, object and action heads, segment-level
//!   temporal modeling and complexity accounting.
//! - [`harness`]: dataset synthesis, conversion, training, evaluation and
//!   reporting used by the `evstr` binary.

pub mod error;
pub mod event_io;
pub mod harness;
pub mod mnel;
pub mod model;
pub mod nn;
pub mod voxelizer;
pub mod vsal;

pub use error::{Error, Result};
