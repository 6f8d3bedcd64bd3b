use rand::Rng;

use super::rng::rng_from_seed;
use crate::imaging::ImageBuffer;
use crate::numerics::Scalar;

/// Smooth procedural test image: a colour gradient plus a few low-frequency
/// waves, kept inside `[0.1, 0.9]` so moderate noise rarely clips.
pub fn synthetic_scene(height: usize, width: usize, seed: u64) -> ImageBuffer {
    let mut rng = rng_from_seed(seed);
    let mut waves = Vec::new();
    for _ in 0..4 {
        let fy: f64 = rng.gen_range(0.5..2.5);
        let fx: f64 = rng.gen_range(0.5..2.5);
        let phase: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
        let amp: [f64; 3] = [rng.gen_range(-0.1..0.1), rng.gen_range(-0.1..0.1), rng.gen_range(-0.1..0.1)];
        waves.push((fy, fx, phase, amp));
    }
    let base: [f64; 3] = [rng.gen_range(0.35..0.65), rng.gen_range(0.35..0.65), rng.gen_range(0.35..0.65)];
    let tilt: [(f64, f64); 3] = [
        (rng.gen_range(-0.1..0.1), rng.gen_range(-0.1..0.1)),
        (rng.gen_range(-0.1..0.1), rng.gen_range(-0.1..0.1)),
        (rng.gen_range(-0.1..0.1), rng.gen_range(-0.1..0.1)),
    ];
    ImageBuffer::from_fn(height, width, |y, x, c| {
        let v = y as f64 / height as f64;
        let u = x as f64 / width as f64;
        let mut s = base[c] + tilt[c].0 * (v - 0.5) + tilt[c].1 * (u - 0.5);
        for (fy, fx, phase, amp) in &waves {
            s += amp[c] * (std::f64::consts::TAU * (fy * v + fx * u) + phase).sin();
        }
        s.clamp(0.1, 0.9) as Scalar
    })
    .with_source(format!("scene{seed}"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scenes_are_bounded_and_seeded() {
        let a = synthetic_scene(30, 40, 1);
        assert!(a.pixels().iter().all(|v| (0.1..=0.9).contains(&(*v as f64))));
        assert_eq!(a, synthetic_scene(30, 40, 1));
        assert_ne!(a.pixels(), synthetic_scene(30, 40, 2).pixels());
    }
}
