//! The restoration network: per-task heads and tails around a shared
//! transformer encoder/decoder.

mod config;
mod network;
mod params;

pub use config::{HeadKind, ModelConfig, TaskSpec};
pub use network::{depatchify, patchify, Bound, IptModel};
