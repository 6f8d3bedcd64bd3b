use super::image::{quantize, ImageBuffer, CHANNELS};
use crate::error::{Error, Result};
use crate::numerics::Scalar;

pub const SSIM_WINDOW: usize = 8;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

fn check_shapes(a: &ImageBuffer, b: &ImageBuffer) -> Result<()> {
    if !a.same_extent(b) {
        return Err(Error::contract(format!(
            "metric inputs differ: {}x{} vs {}x{}",
            a.height(),
            a.width(),
            b.height(),
            b.width()
        )));
    }
    Ok(())
}

pub fn mse(a: &ImageBuffer, b: &ImageBuffer) -> Result<f64> {
    check_shapes(a, b)?;
    let sum: f64 = a
        .pixels()
        .iter()
        .zip(b.pixels())
        .map(|(x, y)| {
            let d = (*x - *y) as f64;
            d * d
        })
        .sum();
    Ok(sum / a.pixels().len() as f64)
}

/// Peak signal-to-noise ratio in dB over all RGB samples, peak 1.0.
///
/// Identical inputs give `f64::INFINITY`.
pub fn psnr(a: &ImageBuffer, b: &ImageBuffer) -> Result<f64> {
    let m = mse(a, b)?;
    Ok(if m == 0.0 {
        f64::INFINITY
    } else {
        -10.0 * m.log10()
    })
}

/// PSNR after quantizing both inputs to 8-bit codes.
pub fn psnr_quantized(a: &ImageBuffer, b: &ImageBuffer) -> Result<f64> {
    let q = |img: &ImageBuffer| {
        let px = img.pixels().iter().map(|&v| quantize(v) as Scalar / 255.0).collect();
        ImageBuffer::new(img.height(), img.width(), px, "")
    };
    psnr(&q(a)?, &q(b)?)
}

/// Mean SSIM over every `window × window` position (stride 1), averaged over
/// channels. Window statistics are uniform-weighted population moments with
/// dynamic range 1. Images smaller than the window use their full extent.
pub fn ssim(a: &ImageBuffer, b: &ImageBuffer) -> Result<f64> {
    ssim_with(a, b, SSIM_WINDOW, SSIM_K1, SSIM_K2)
}

pub fn ssim_with(a: &ImageBuffer, b: &ImageBuffer, window: usize, k1: f64, k2: f64) -> Result<f64> {
    check_shapes(a, b)?;
    if window == 0 {
        return Err(Error::contract("ssim window must be ≥ 1"));
    }
    let (h, w) = (a.height(), a.width());
    let (wh, ww) = (window.min(h), window.min(w));
    let c1 = k1 * k1;
    let c2 = k2 * k2;
    let n = (wh * ww) as f64;
    let mut total = 0.0;
    let mut count = 0usize;
    for ch in 0..CHANNELS {
        for y0 in 0..=h - wh {
            for x0 in 0..=w - ww {
                let (mut sa, mut sb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for y in y0..y0 + wh {
                    for x in x0..x0 + ww {
                        let va = a.get(y, x, ch) as f64;
                        let vb = b.get(y, x, ch) as f64;
                        sa += va;
                        sb += vb;
                        saa += va * va;
                        sbb += vb * vb;
                        sab += va * vb;
                    }
                }
                let (ma, mb) = (sa / n, sb / n);
                let va = saa / n - ma * ma;
                let vb = sbb / n - mb * mb;
                let cov = sab / n - ma * mb;
                let num = (2.0 * ma * mb + c1) * (2.0 * cov + c2);
                let den = (ma * ma + mb * mb + c1) * (va + vb + c2);
                total += num / den;
                count += 1;
            }
        }
    }
    Ok(total / count as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn gray(h: usize, w: usize, v: Scalar) -> ImageBuffer {
        ImageBuffer::filled(h, w, v)
    }

    #[test]
    fn psnr_examples() {
        let a = ImageBuffer::from_fn(9, 9, |y, x, c| ((y + x + c) % 5) as Scalar / 5.0);
        assert_eq!(psnr(&a, &a).unwrap(), f64::INFINITY);

        let b = gray(8, 8, 0.5);
        let c = gray(8, 8, 0.5 + 1.0 / 255.0);
        assert!((psnr(&b, &c).unwrap() - 20.0 * 255f64.log10()).abs() < 1e-9);
        assert!((psnr(&b, &c).unwrap() - 48.13).abs() < 0.01);

        let d = gray(8, 8, 0.0);
        assert!((psnr(&b, &d).unwrap() - 20.0 * 2f64.log10()).abs() < 1e-9);
    }

    #[test]
    fn psnr_rejects_shape_mismatch() {
        assert!(matches!(psnr(&gray(4, 4, 0.0), &gray(4, 5, 0.0)), Err(Error::Contract(_))));
        assert!(ssim(&gray(4, 4, 0.0), &gray(5, 4, 0.0)).is_err());
    }

    #[test]
    fn ssim_examples() {
        let a = ImageBuffer::from_fn(20, 17, |y, x, c| ((y * 7 + x * 3 + c) % 11) as Scalar / 10.0);
        assert_eq!(ssim(&a, &a).unwrap(), 1.0);

        let flat = gray(16, 16, 0.4);
        let tiny = ImageBuffer::from_fn(16, 16, |y, x, _| 0.4 + 1e-6 * (((y + x) % 2) as Scalar));
        assert!(ssim(&flat, &tiny).unwrap() > 0.999);

        let checker = ImageBuffer::from_fn(16, 16, |y, x, _| ((y + x) % 2) as Scalar);
        let inv = ImageBuffer::from_fn(16, 16, |y, x, c| 1.0 - checker.get(y, x, c));
        assert!(ssim(&checker, &inv).unwrap() < 0.0);
    }

    #[test]
    fn quantized_psnr_flag() {
        let a = gray(4, 4, 0.5);
        let b = gray(4, 4, 0.5 + 0.1 / 255.0);
        assert!(psnr(&a, &b).unwrap().is_finite());
        assert_eq!(psnr_quantized(&a, &b).unwrap(), f64::INFINITY);
    }

    proptest! {
        #[test]
        fn psnr_symmetric(seed in any::<u32>()) {
            let a = ImageBuffer::from_fn(6, 7, |y, x, c| ((seed as usize + y * 13 + x * 5 + c) % 17) as Scalar / 16.0);
            let b = ImageBuffer::from_fn(6, 7, |y, x, c| ((seed as usize / 3 + y * 3 + x * 11 + c) % 19) as Scalar / 18.0);
            prop_assert_eq!(psnr(&a, &b).unwrap(), psnr(&b, &a).unwrap());
        }

        #[test]
        fn psnr_decreases_with_offset(d1 in 0.001f64..0.2, extra in 0.001f64..0.2) {
            let base = gray(5, 5, 0.3);
            let p1 = psnr(&base, &gray(5, 5, 0.3 + d1 as Scalar)).unwrap();
            let p2 = psnr(&base, &gray(5, 5, 0.3 + (d1 + extra) as Scalar)).unwrap();
            prop_assert!(p2 < p1);
        }

        #[test]
        fn ssim_self_is_one(seed in any::<u32>(), h in 1usize..14, w in 1usize..14) {
            let a = ImageBuffer::from_fn(h, w, |y, x, c| ((seed as usize + y * 13 + x * 5 + c * 7) % 23) as Scalar / 22.0);
            prop_assert_eq!(ssim(&a, &a).unwrap(), 1.0);
        }
    }
}
