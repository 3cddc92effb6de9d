//! Transformer encoder with an embedded radial-basis-function similarity layer
//! for unsupervised time-series anomaly detection.
//!
//! The crate is `no_std` and only needs an allocator. Everything that touches
//! the filesystem, the clock or the command line lives in the `restad`
//! companion crate.
//!
//! Module map:
//!
//! - [`tensor`]: dense `f64` tensors and a dynamic reverse-mode tape.
//! - [`model`]: embedding, post-norm encoder layers, the RBF layer and the
//!   reconstruction head.
//! - [`init`]: random and K-means initialization of the RBF layer.
//! - [`train`]: MSE reconstruction objective, ADAM, and the training loops.
//! - [`score`]: reconstruction error, RBF dissimilarity and composite scores.
//! - [`metrics`]: quantile-threshold F1, AUC-ROC, AUC-PR, VUS-ROC and VUS-PR.
//! - [`data`]: normalization, non-overlapping windows and a synthetic
//!   benchmark generator.
#![no_std]
// `!(x > 0.0)` style checks reject NaN on purpose
#![allow(clippy::neg_cmp_op_on_partial_ord)]

extern crate alloc;

#[cfg(test)]
extern crate std;

pub mod data;
pub mod error;
pub mod init;
pub mod metrics;
pub mod model;
pub mod score;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};

/// Version stamped into every serialized artifact.
pub const SCHEMA_VERSION: u32 = 1;
