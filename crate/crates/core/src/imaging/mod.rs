//! Image I/O, tiling and metrics.

mod image;
mod metrics;
mod tiling;

pub use image::{load_image, quantize, save_image, ImageBuffer, CHANNELS};
pub(crate) use image::{encode_png, write_atomic};
pub use metrics::{mse, psnr, psnr_quantized, ssim, ssim_with, SSIM_K1, SSIM_K2, SSIM_WINDOW};
pub use tiling::{axis_origins, extract_patches, merge_patches, PatchGrid, DEFAULT_OVERLAP, DEFAULT_PATCH};
