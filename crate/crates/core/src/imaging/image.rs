use std::fs::File;
use std::io::BufReader;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::{Scalar, Tensor};

pub const CHANNELS: usize = 3;

/// RGB image with float samples, interleaved row-major (`[y][x][c]`).
///
/// Samples are nominally in `[0, 1]`; intermediate results may leave that
/// range until [`ImageBuffer::clamped`] or [`save_image`] is applied.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageBuffer {
    height: usize,
    width: usize,
    pixels: Vec<Scalar>,
    pub source_id: String,
}

impl ImageBuffer {
    pub fn new(height: usize, width: usize, pixels: Vec<Scalar>, source_id: impl Into<String>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::contract(format!("image extents {height}x{width} must be ≥ 1")));
        }
        if pixels.len() != height * width * CHANNELS {
            return Err(Error::dim(format!(
                "{height}x{width}x{CHANNELS} image needs {} samples, got {}",
                height * width * CHANNELS,
                pixels.len()
            )));
        }
        if let Some(i) = pixels.iter().position(|v| !v.is_finite()) {
            return Err(Error::contract(format!("non-finite sample at index {i}")));
        }
        Ok(ImageBuffer {
            height,
            width,
            pixels,
            source_id: source_id.into(),
        })
    }

    pub fn filled(height: usize, width: usize, value: Scalar) -> Self {
        Self::from_fn(height, width, |_, _, _| value)
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize, usize) -> Scalar) -> Self {
        assert!(height > 0 && width > 0);
        let mut pixels = Vec::with_capacity(height * width * CHANNELS);
        for y in 0..height {
            for x in 0..width {
                for c in 0..CHANNELS {
                    pixels.push(f(y, x, c));
                }
            }
        }
        ImageBuffer {
            height,
            width,
            pixels,
            source_id: String::new(),
        }
    }

    pub fn with_source(mut self, id: impl Into<String>) -> Self {
        self.source_id = id.into();
        self
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        CHANNELS
    }

    pub fn pixels(&self) -> &[Scalar] {
        &self.pixels
    }

    pub fn pixels_mut(&mut self) -> &mut [Scalar] {
        &mut self.pixels
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> Scalar {
        self.pixels[(y * self.width + x) * CHANNELS + c]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, v: Scalar) {
        self.pixels[(y * self.width + x) * CHANNELS + c] = v;
    }

    pub fn same_extent(&self, other: &ImageBuffer) -> bool {
        self.height == other.height && self.width == other.width
    }

    pub fn clamped(&self) -> ImageBuffer {
        let mut out = self.clone();
        out.pixels.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
        out
    }

    /// Sub-image with top-left corner `(y0, x0)`.
    pub fn crop(&self, y0: usize, x0: usize, h: usize, w: usize) -> Result<ImageBuffer> {
        if h == 0 || w == 0 || y0 + h > self.height || x0 + w > self.width {
            return Err(Error::contract(format!(
                "crop {h}x{w} at ({y0},{x0}) exceeds {}x{}",
                self.height, self.width
            )));
        }
        let mut pixels = Vec::with_capacity(h * w * CHANNELS);
        for y in y0..y0 + h {
            let start = (y * self.width + x0) * CHANNELS;
            pixels.extend_from_slice(&self.pixels[start..start + w * CHANNELS]);
        }
        Ok(ImageBuffer {
            height: h,
            width: w,
            pixels,
            source_id: self.source_id.clone(),
        })
    }

    /// Pads on the bottom/right by replicating the last row/column.
    pub fn pad_edge_to(&self, h: usize, w: usize) -> ImageBuffer {
        let (h, w) = (h.max(self.height), w.max(self.width));
        ImageBuffer::from_fn(h, w, |y, x, c| {
            self.get(y.min(self.height - 1), x.min(self.width - 1), c)
        })
        .with_source(self.source_id.clone())
    }

    /// `[1, 3, H, W]` planar tensor.
    pub fn to_tensor(&self) -> Tensor {
        Self::batch_to_tensor(std::slice::from_ref(self)).expect("single image")
    }

    /// Stacks equally sized images into `[B, 3, H, W]`.
    pub fn batch_to_tensor(images: &[ImageBuffer]) -> Result<Tensor> {
        let first = images
            .first()
            .ok_or_else(|| Error::contract("empty image batch"))?;
        let (h, w) = (first.height, first.width);
        let mut data = Vec::with_capacity(images.len() * CHANNELS * h * w);
        for img in images {
            if img.height != h || img.width != w {
                return Err(Error::dim(format!(
                    "batch mixes {}x{} with {h}x{w}",
                    img.height, img.width
                )));
            }
            for c in 0..CHANNELS {
                for i in 0..h * w {
                    data.push(img.pixels[i * CHANNELS + c]);
                }
            }
        }
        Tensor::new(&[images.len(), CHANNELS, h, w], data)
    }

    /// Splits a `[B, 3, H, W]` tensor back into images.
    pub fn batch_from_tensor(t: &Tensor) -> Result<Vec<ImageBuffer>> {
        let s = t.shape();
        if s.len() != 4 || s[1] != CHANNELS {
            return Err(Error::dim(format!("expected [B, 3, H, W], got {s:?}")));
        }
        let (b, h, w) = (s[0], s[2], s[3]);
        let plane = h * w;
        (0..b)
            .map(|bi| {
                let base = bi * CHANNELS * plane;
                let mut pixels = vec![0.0; CHANNELS * plane];
                for c in 0..CHANNELS {
                    for i in 0..plane {
                        pixels[i * CHANNELS + c] = t.data()[base + c * plane + i];
                    }
                }
                ImageBuffer::new(h, w, pixels, "")
            })
            .collect()
    }
}

fn image_err(path: &Path, message: impl Into<String>) -> Error {
    Error::Image {
        path: path.to_path_buf(),
        message: message.into(),
    }
}

/// Loads an 8-bit RGB PNG, mapping each code `v` to `v / 255`.
pub fn load_image(path: impl AsRef<Path>) -> Result<ImageBuffer> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let decoder = png::Decoder::new(BufReader::new(file));
    let mut reader = decoder.read_info().map_err(|e| image_err(path, e.to_string()))?;
    let info = reader.info();
    if info.color_type != png::ColorType::Rgb || info.bit_depth != png::BitDepth::Eight {
        return Err(image_err(
            path,
            format!("expected 8-bit RGB, found {:?} {:?}", info.color_type, info.bit_depth),
        ));
    }
    let mut buf = vec![0u8; reader.output_buffer_size()];
    let frame = reader
        .next_frame(&mut buf)
        .map_err(|e| image_err(path, e.to_string()))?;
    let (w, h) = (frame.width as usize, frame.height as usize);
    let bytes = &buf[..frame.buffer_size()];
    let pixels = bytes.iter().map(|&b| b as Scalar / 255.0).collect();
    let id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    ImageBuffer::new(h, w, pixels, id)
}

/// Quantizes a sample to 8 bits: clamp to `[0, 1]`, scale, round half up.
pub fn quantize(v: Scalar) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0 + 0.5).floor() as u8
}

pub fn encode_png_rgb(img: &ImageBuffer) -> Result<Vec<u8>> {
    let bytes: Vec<u8> = img.pixels.iter().map(|&v| quantize(v)).collect();
    encode_png(img.width as u32, img.height as u32, png::ColorType::Rgb, &bytes)
}

pub(crate) fn encode_png(width: u32, height: u32, color: png::ColorType, bytes: &[u8]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, width, height);
        enc.set_color(color);
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc
            .write_header()
            .map_err(|e| Error::Format(format!("png header: {e}")))?;
        writer
            .write_image_data(bytes)
            .map_err(|e| Error::Format(format!("png data: {e}")))?;
    }
    Ok(out)
}

/// Writes `bytes` through a sibling temp file and a rename.
pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Saves as 8-bit RGB PNG (see [`quantize`]).
pub fn save_image(img: &ImageBuffer, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_png_rgb(img)?;
    write_atomic(path, &bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn save_load_round_trip_is_within_quantization() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let img = ImageBuffer::from_fn(7, 9, |_, _, _| rng.gen::<f64>() as Scalar);
        let p = dir.path().join("a.png");
        save_image(&img, &p).unwrap();
        let back = load_image(&p).unwrap();
        let worst = img
            .pixels()
            .iter()
            .zip(back.pixels())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, Scalar::max);
        assert!(worst <= 1.0 / 510.0 + 1e-12, "{worst}");
        assert_eq!(back.source_id, "a");
    }

    #[test]
    fn zero_image_round_trips_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let img = ImageBuffer::filled(4, 5, 0.0);
        let p = dir.path().join("z.png");
        save_image(&img, &p).unwrap();
        assert_eq!(load_image(&p).unwrap().pixels(), img.pixels());
    }

    #[test]
    fn code_128_loads_as_128_over_255() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("g.png");
        std::fs::write(&p, encode_png(1, 1, png::ColorType::Rgb, &[128, 128, 128]).unwrap()).unwrap();
        let img = load_image(&p).unwrap();
        assert_eq!(img.get(0, 0, 0), 128.0 / 255.0);
    }

    #[test]
    fn rounding_is_half_up_after_clamp() {
        assert_eq!(quantize(0.5 / 255.0), 1);
        assert_eq!(quantize(-3.0), 0);
        assert_eq!(quantize(7.0), 255);
        assert_eq!(quantize(128.0 / 255.0), 128);
    }

    #[test]
    fn rejects_missing_grayscale_and_corrupt_files() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(load_image(dir.path().join("nope.png")), Err(Error::Io { .. })));

        let gray = dir.path().join("gray.png");
        std::fs::write(&gray, encode_png(2, 2, png::ColorType::Grayscale, &[0, 1, 2, 3]).unwrap()).unwrap();
        match load_image(&gray) {
            Err(Error::Image { path, .. }) => assert_eq!(path, gray),
            other => panic!("{other:?}"),
        }

        let bad = dir.path().join("bad.png");
        std::fs::write(&bad, b"\x89PNG\r\n\x1a\nnot really").unwrap();
        assert!(matches!(load_image(&bad), Err(Error::Image { .. })));
    }

    #[test]
    fn tensor_conversion_round_trips() {
        let img = ImageBuffer::from_fn(3, 4, |y, x, c| (y * 100 + x * 10 + c) as Scalar);
        let t = img.to_tensor();
        assert_eq!(t.shape(), &[1, 3, 3, 4]);
        assert_eq!(t.data()[12], 1.0);
        let back = ImageBuffer::batch_from_tensor(&t).unwrap();
        assert_eq!(back[0].pixels(), img.pixels());
    }
}
