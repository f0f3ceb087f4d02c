//! Domain shifts with uncertainty (DSU): per-instance feature statistics are
//! treated as Gaussian variables whose spread is estimated from the batch,
//! resampled during training, and substituted back into the features.
//!
//! The crate also carries the augmentors DSU is compared against, a small
//! convolutional classifier with insertion slots, a procedural multi-domain
//! image benchmark, the training and sweep engine, and shift analysis.

pub mod analyze;
pub mod augment;
pub mod checks;
pub mod data;
pub mod error;
pub mod featstats;
pub mod net;
pub mod train;

pub use error::{DsuError, Result};
