//! Image processing transformer: per-task convolutional heads and tails around
//! a shared transformer encoder/decoder, trained jointly on synthetically
//! degraded images with an L1 + patch-contrastive objective.
//!
//! Everything runs on the small reverse-mode engine in [`numerics`].

pub mod cli;
pub mod degradations;
pub mod error;
pub mod eval;
pub mod imaging;
pub mod losses;
pub mod model;
pub mod numerics;
pub mod parallel;
pub mod training;

pub use error::{Error, Result};
