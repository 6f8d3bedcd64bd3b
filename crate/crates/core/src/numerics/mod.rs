//! Tensors and reverse-mode differentiation.

mod adam;
mod functional;
pub(crate) mod kernels;
mod tape;
mod tensor;

pub use adam::{adam_step, AdamHyper, AdamState, NamedTensors};
pub use functional::{linear, multi_head_attention, pixel_shuffle, pixel_unshuffle, AttentionWeights};
pub use tape::{conv2d, layer_norm, Gradients, Tape, Var};
pub use tensor::{box_muller, Scalar, Tensor, DTYPE_NAME};
