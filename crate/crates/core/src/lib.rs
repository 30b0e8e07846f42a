//! Dense cross-modal feature alignment for visible/infrared-style person
//! retrieval.
//!
//! The crate covers the whole loop on a desk-scale toy:
//!
//! - [`field`]: activation maps, person masks, GeM pooling
//! - [`cmalign`]: cosine similarity, matching probabilities, soft warping,
//!   mask-blended alignment and co-attention
//! - [`losses`] / [`objective`]: identity, identity-consistency and dense
//!   triplet losses and their weighted sum
//! - [`autograd`]: a small reverse-mode tape and finite-difference checks
//! - [`model`], [`train`]: a two-stream extractor and its SGD trainer
//! - [`data`], [`eval`], [`export`]: synthetic paired datasets, mAP/CMC
//!   retrieval evaluation, mask and match exports
//!
//! See the `examples/` directory of this crate for one runnable program per
//! capability, and the `cmalign` binary for the command-line front end.

pub mod ablation;
pub mod autograd;
pub mod cli;
pub mod cmalign;
pub mod cmft;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod export;
pub mod field;
pub mod gradsuite;
mod linalg;
pub mod losses;
pub mod model;
pub mod objective;
pub mod schedule;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{FeatureMap, PersonDescriptor, SpatialMap};
