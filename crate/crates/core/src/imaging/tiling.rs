use serde::{Deserialize, Serialize};

use super::image::{ImageBuffer, CHANNELS};
use crate::error::{Error, Result};

pub const DEFAULT_PATCH: usize = 48;
pub const DEFAULT_OVERLAP: usize = 10;

/// Placement of square tiles over an image.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchGrid {
    pub patch_size: usize,
    pub overlap: usize,
    /// Top-left corners `(row, col)`, row-major.
    pub origins: Vec<(usize, usize)>,
    /// Source `(height, width)`.
    pub source_extent: (usize, usize),
}

/// Tile starts along one axis at stride `patch − overlap`; the last tile is
/// pulled back to end flush with the border.
pub fn axis_origins(len: usize, patch: usize, overlap: usize) -> Vec<usize> {
    let stride = patch - overlap;
    let mut out = Vec::new();
    let mut pos = 0;
    loop {
        if pos + patch >= len {
            out.push(len - patch);
            break;
        }
        out.push(pos);
        pos += stride;
    }
    out.dedup();
    out
}

impl PatchGrid {
    pub fn new(height: usize, width: usize, patch_size: usize, overlap: usize) -> Result<Self> {
        if patch_size == 0 || overlap >= patch_size {
            return Err(Error::contract(format!(
                "overlap {overlap} must be smaller than patch size {patch_size}"
            )));
        }
        if height < patch_size || width < patch_size {
            return Err(Error::contract(format!(
                "image {height}x{width} is smaller than the {patch_size}px patch; pad first"
            )));
        }
        let rows = axis_origins(height, patch_size, overlap);
        let cols = axis_origins(width, patch_size, overlap);
        let origins = rows
            .iter()
            .flat_map(|&r| cols.iter().map(move |&c| (r, c)))
            .collect();
        Ok(PatchGrid {
            patch_size,
            overlap,
            origins,
            source_extent: (height, width),
        })
    }

    /// Same layout with every coordinate and extent multiplied by `k`.
    pub fn scaled(&self, k: usize) -> PatchGrid {
        PatchGrid {
            patch_size: self.patch_size * k,
            overlap: self.overlap * k,
            origins: self.origins.iter().map(|&(r, c)| (r * k, c * k)).collect(),
            source_extent: (self.source_extent.0 * k, self.source_extent.1 * k),
        }
    }

    pub fn len(&self) -> usize {
        self.origins.len()
    }

    pub fn is_empty(&self) -> bool {
        self.origins.is_empty()
    }

    /// Number of tiles covering each pixel, row-major.
    pub fn coverage(&self) -> Vec<u32> {
        let (h, w) = self.source_extent;
        let mut count = vec![0u32; h * w];
        for &(r, c) in &self.origins {
            for y in r..r + self.patch_size {
                for x in c..c + self.patch_size {
                    count[y * w + x] += 1;
                }
            }
        }
        count
    }
}

/// Cuts `img` into overlapping `patch_size` squares.
pub fn extract_patches(img: &ImageBuffer, patch_size: usize, overlap: usize) -> Result<(PatchGrid, Vec<ImageBuffer>)> {
    let grid = PatchGrid::new(img.height(), img.width(), patch_size, overlap)?;
    let patches = grid
        .origins
        .iter()
        .map(|&(r, c)| img.crop(r, c, patch_size, patch_size))
        .collect::<Result<Vec<_>>>()?;
    Ok((grid, patches))
}

/// Reassembles tiles, averaging wherever they overlap.
///
/// The average is kept as a running mean so that equal contributions
/// reproduce their value exactly.
pub fn merge_patches(grid: &PatchGrid, patches: &[ImageBuffer]) -> Result<ImageBuffer> {
    if patches.len() != grid.origins.len() {
        return Err(Error::contract(format!(
            "grid has {} tiles, got {} patches",
            grid.origins.len(),
            patches.len()
        )));
    }
    let p = grid.patch_size;
    if let Some(bad) = patches.iter().find(|t| t.height() != p || t.width() != p) {
        return Err(Error::contract(format!(
            "patch is {}x{}, grid expects {p}x{p}",
            bad.height(),
            bad.width()
        )));
    }
    let (h, w) = grid.source_extent;
    let mut acc = vec![0.0; h * w * CHANNELS];
    let mut count = vec![0u32; h * w];
    for (&(r, c), patch) in grid.origins.iter().zip(patches) {
        for y in 0..p {
            for x in 0..p {
                let pix = (r + y) * w + (c + x);
                count[pix] += 1;
                let n = count[pix] as f64;
                for ch in 0..CHANNELS {
                    let a = &mut acc[pix * CHANNELS + ch];
                    *a += (patch.get(y, x, ch) - *a) / n as crate::numerics::Scalar;
                }
            }
        }
    }
    if count.iter().any(|&n| n == 0) {
        return Err(Error::contract("grid leaves pixels uncovered"));
    }
    let source = patches.first().map(|t| t.source_id.clone()).unwrap_or_default();
    ImageBuffer::new(h, w, acc, source)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Scalar;
    use proptest::prelude::*;

    fn ramp(h: usize, w: usize) -> ImageBuffer {
        ImageBuffer::from_fn(h, w, |y, x, c| ((y * 31 + x * 7 + c * 3) % 97) as Scalar / 97.0)
    }

    #[test]
    fn single_patch_for_exact_fit() {
        let (grid, patches) = extract_patches(&ramp(48, 48), 48, 10).unwrap();
        assert_eq!(grid.origins, vec![(0, 0)]);
        assert_eq!(patches.len(), 1);
    }

    #[test]
    fn hundred_square_uses_nine_patches() {
        assert_eq!(axis_origins(100, 48, 10), vec![0, 38, 52]);
        let (grid, _) = extract_patches(&ramp(100, 100), 48, 10).unwrap();
        assert_eq!(grid.len(), 9);
    }

    #[test]
    fn clamped_extra_origin() {
        let (grid, _) = extract_patches(&ramp(58, 48), 48, 10).unwrap();
        assert_eq!(grid.origins, vec![(0, 0), (10, 0)]);
    }

    #[test]
    fn too_small_image_is_rejected() {
        assert!(matches!(extract_patches(&ramp(40, 60), 48, 10), Err(Error::Contract(_))));
    }

    #[test]
    fn overlapping_values_are_averaged() {
        let grid = PatchGrid {
            patch_size: 1,
            overlap: 0,
            origins: vec![(0, 0), (0, 0)],
            source_extent: (1, 1),
        };
        let a = ImageBuffer::filled(1, 1, 0.2);
        let b = ImageBuffer::filled(1, 1, 0.4);
        let m = merge_patches(&grid, &[a, b]).unwrap();
        assert!((m.get(0, 0, 0) - 0.3).abs() < 1e-15);
    }

    #[test]
    fn hundred_square_round_trip_is_bit_identical() {
        let img = ramp(100, 100);
        let (grid, patches) = extract_patches(&img, 48, 10).unwrap();
        assert_eq!(merge_patches(&grid, &patches).unwrap().pixels(), img.pixels());
    }

    #[test]
    fn merge_checks_counts_and_sizes() {
        let img = ramp(60, 60);
        let (grid, mut patches) = extract_patches(&img, 48, 10).unwrap();
        assert!(merge_patches(&grid, &patches[1..]).is_err());
        patches[0] = ImageBuffer::filled(47, 48, 0.0);
        assert!(merge_patches(&grid, &patches).is_err());
    }

    #[test]
    fn scaled_grid_merges_upscaled_tiles() {
        let img = ramp(50, 50);
        let (grid, patches) = extract_patches(&img, 48, 10).unwrap();
        let up: Vec<_> = patches
            .iter()
            .map(|p| ImageBuffer::from_fn(96, 96, |y, x, c| p.get(y / 2, x / 2, c)))
            .collect();
        let merged = merge_patches(&grid.scaled(2), &up).unwrap();
        assert_eq!((merged.height(), merged.width()), (100, 100));
        assert_eq!(merged.get(99, 99, 1), img.get(49, 49, 1));
    }

    proptest! {
        #[test]
        fn tiling_covers_and_round_trips(h in 48usize..130, w in 48usize..130, seed in any::<u32>()) {
            let img = ImageBuffer::from_fn(h, w, |y, x, c| {
                (((y as u64 * 2654435761 + x as u64 * 40503 + c as u64 + seed as u64) % 1000) as Scalar) / 999.0
            });
            let (grid, patches) = extract_patches(&img, 48, 10).unwrap();
            prop_assert!(grid.coverage().iter().all(|&n| n >= 1));
            let mut seen = grid.origins.clone();
            seen.sort();
            seen.dedup();
            prop_assert_eq!(seen.len(), grid.origins.len());
            for &(r, c) in &grid.origins {
                prop_assert!(r + 48 <= h && c + 48 <= w);
            }
            let merged = merge_patches(&grid, &patches).unwrap();
            prop_assert_eq!(merged.pixels(), img.pixels());
        }
    }
}
