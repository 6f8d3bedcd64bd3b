use rand::Rng;
use serde::{Deserialize, Serialize};

use super::rng::rng_from_seed;
use crate::error::{Error, Result};
use crate::imaging::{ImageBuffer, CHANNELS};
use crate::numerics::Scalar;

/// Synthetic rain: straight anti-aliased streaks added on top of the image.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RainParams {
    /// Streak direction in degrees; 90 is vertical.
    pub angle_deg: f64,
    /// Each streak's angle is drawn uniformly from `angle_deg ± angle_jitter_deg`.
    pub angle_jitter_deg: f64,
    pub length_px: f64,
    pub width_px: f64,
    /// Streak anchors per pixel, times the streak length.
    pub density: f64,
    /// Added brightness at full coverage.
    pub intensity: f64,
}

impl Default for RainParams {
    fn default() -> Self {
        RainParams {
            angle_deg: 90.0,
            angle_jitter_deg: 10.0,
            length_px: 20.0,
            width_px: 1.0,
            density: 0.02,
            intensity: 0.3,
        }
    }
}

impl RainParams {
    pub fn validate(&self) -> Result<()> {
        let ok = self.density > 0.0
            && self.density <= 1.0
            && self.intensity > 0.0
            && self.intensity <= 1.0
            && self.length_px >= 1.0
            && self.width_px > 0.0
            && self.angle_jitter_deg >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::contract(format!("invalid rain parameters {self:?}")))
        }
    }
}

/// Non-negative streak layer, one value per pixel (shared by all channels).
pub fn rain_layer(height: usize, width: usize, params: &RainParams, seed: u64) -> Vec<Scalar> {
    let mut layer = vec![0.0 as Scalar; height * width];
    let anchors = (params.density * (height * width) as f64 / params.length_px).ceil() as usize;
    let mut rng = rng_from_seed(seed);
    let half = params.width_px / 2.0;
    for _ in 0..anchors {
        let ay = rng.gen::<f64>() * height as f64;
        let ax = rng.gen::<f64>() * width as f64;
        let jitter = (rng.gen::<f64>() * 2.0 - 1.0) * params.angle_jitter_deg;
        let theta = (params.angle_deg + jitter).to_radians();
        let (dy, dx) = (theta.sin(), theta.cos());
        let (ey, ex) = (ay + params.length_px * dy, ax + params.length_px * dx);
        let reach = half + 1.0;
        let y_lo = (ay.min(ey) - reach).floor().max(0.0) as usize;
        let y_hi = ((ay.max(ey) + reach).ceil() as usize).min(height);
        let x_lo = (ax.min(ex) - reach).floor().max(0.0) as usize;
        let x_hi = ((ax.max(ex) + reach).ceil() as usize).min(width);
        for y in y_lo..y_hi {
            for x in x_lo..x_hi {
                let (py, px) = (y as f64 + 0.5 - ay, x as f64 + 0.5 - ax);
                let along = py * dy + px * dx;
                if !(0.0..=params.length_px).contains(&along) {
                    continue;
                }
                let across = (py * dx - px * dy).abs();
                let coverage = (half + 0.5 - across).clamp(0.0, 1.0);
                if coverage > 0.0 {
                    layer[y * width + x] += (params.intensity * coverage) as Scalar;
                }
            }
        }
    }
    layer
}

/// Adds a seeded streak layer and clamps to `[0, 1]`.
///
/// `density == 0` is accepted as the empty limit and returns the input.
pub fn add_rain_streaks(img: &ImageBuffer, params: &RainParams, seed: u64) -> Result<ImageBuffer> {
    if params.density == 0.0 {
        return Ok(img.clone());
    }
    params.validate()?;
    let (h, w) = (img.height(), img.width());
    let layer = rain_layer(h, w, params, seed);
    let mut out = img.clone();
    for (i, v) in out.pixels_mut().iter_mut().enumerate() {
        *v = (*v + layer[i / CHANNELS]).clamp(0.0, 1.0);
    }
    Ok(out)
}
