use crate::error::{Error, Result};
use crate::imaging::{ImageBuffer, CHANNELS};
use crate::numerics::Scalar;

/// Keys cubic convolution kernel with `a = −0.5`.
pub fn cubic(x: f64) -> f64 {
    const A: f64 = -0.5;
    let x = x.abs();
    if x <= 1.0 {
        ((A + 2.0) * x - (A + 3.0)) * x * x + 1.0
    } else if x < 2.0 {
        ((A * x - 5.0 * A) * x + 8.0 * A) * x - 4.0 * A
    } else {
        0.0
    }
}

/// Per-output-sample taps `(source index, weight)` along one axis.
///
/// Sample centres are aligned at half pixels: output `i` reads source
/// coordinate `(i + 0.5)/scale − 0.5`. When shrinking, the kernel is widened
/// by `1/scale` (antialiasing). Weights are renormalized to sum to one and
/// out-of-range taps replicate the border sample.
fn axis_taps(in_len: usize, out_len: usize, scale: f64) -> Vec<Vec<(usize, f64)>> {
    let (kscale, support) = if scale < 1.0 {
        (scale, 2.0 / scale)
    } else {
        (1.0, 2.0)
    };
    (0..out_len)
        .map(|i| {
            let u = (i as f64 + 0.5) / scale - 0.5;
            let left = (u - support).floor() as isize;
            let right = (u + support).ceil() as isize;
            let mut taps: Vec<(usize, f64)> = (left..=right)
                .filter_map(|j| {
                    let wgt = kscale * cubic(kscale * (u - j as f64));
                    (wgt != 0.0).then(|| (j.clamp(0, in_len as isize - 1) as usize, wgt))
                })
                .collect();
            let total: f64 = taps.iter().map(|t| t.1).sum();
            taps.iter_mut().for_each(|t| t.1 /= total);
            taps
        })
        .collect()
}

/// Resizes by the rational factor `num/den`; the output is
/// `floor(H·num/den) × floor(W·num/den)`.
pub fn bicubic_resize(img: &ImageBuffer, num: usize, den: usize) -> Result<ImageBuffer> {
    if num == 0 || den == 0 {
        return Err(Error::contract("resize factor must be positive"));
    }
    let (h, w) = (img.height(), img.width());
    let (oh, ow) = (h * num / den, w * num / den);
    if oh == 0 || ow == 0 {
        return Err(Error::contract(format!(
            "resizing {h}x{w} by {num}/{den} gives an empty image"
        )));
    }
    let scale = num as f64 / den as f64;
    let row_taps = axis_taps(w, ow, scale);
    let col_taps = axis_taps(h, oh, scale);

    // Horizontal pass: h × ow.
    let mut tmp = vec![0.0f64; h * ow * CHANNELS];
    for y in 0..h {
        for (x, taps) in row_taps.iter().enumerate() {
            for c in 0..CHANNELS {
                tmp[(y * ow + x) * CHANNELS + c] = taps
                    .iter()
                    .map(|&(j, wgt)| wgt * img.get(y, j, c) as f64)
                    .sum();
            }
        }
    }
    let mut out = vec![0.0 as Scalar; oh * ow * CHANNELS];
    for (y, taps) in col_taps.iter().enumerate() {
        for x in 0..ow {
            for c in 0..CHANNELS {
                out[(y * ow + x) * CHANNELS + c] = taps
                    .iter()
                    .map(|&(j, wgt)| wgt * tmp[(j * ow + x) * CHANNELS + c])
                    .sum::<f64>() as Scalar;
            }
        }
    }
    ImageBuffer::new(oh, ow, out, img.source_id.clone())
}

/// Bicubic downsampling by an integer factor.
pub fn downsample(img: &ImageBuffer, k: usize) -> Result<ImageBuffer> {
    bicubic_resize(img, 1, k)
}
