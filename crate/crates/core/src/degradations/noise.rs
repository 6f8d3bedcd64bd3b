use super::rng::rng_from_seed;
use crate::error::{Error, Result};
use crate::imaging::ImageBuffer;
use crate::numerics::{box_muller, Scalar};

/// Adds i.i.d. `N(0, (sigma_255/255)²)` to every sample. The result is not clamped.
pub fn add_gaussian_noise(img: &ImageBuffer, sigma_255: f64, seed: u64) -> Result<ImageBuffer> {
    if !(sigma_255 > 0.0) || !sigma_255.is_finite() {
        return Err(Error::contract(format!("noise sigma must be positive, got {sigma_255}")));
    }
    let sigma = sigma_255 / 255.0;
    let mut rng = rng_from_seed(seed);
    let mut out = img.clone();
    let mut spare: Option<f64> = None;
    for v in out.pixels_mut() {
        let z = match spare.take() {
            Some(z) => z,
            None => {
                let (a, b) = box_muller(&mut rng);
                spare = Some(b);
                a
            }
        };
        *v += (z * sigma) as Scalar;
    }
    Ok(out)
}
