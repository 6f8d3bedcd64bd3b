use crate::error::{Error, Result};
use crate::imaging::{extract_patches, merge_patches, ImageBuffer};
use crate::model::IptModel;
use crate::parallel::par_map_range;

/// Anything that maps a corrupted patch to a restored one `k` times larger.
pub trait Restorer: Sync {
    fn output_scale(&self) -> usize;
    fn restore_patch(&self, patch: &ImageBuffer) -> Result<ImageBuffer>;
}

/// Returns its input; a transparent stand-in for pipeline tests.
pub struct IdentityRestorer;

impl Restorer for IdentityRestorer {
    fn output_scale(&self) -> usize {
        1
    }

    fn restore_patch(&self, patch: &ImageBuffer) -> Result<ImageBuffer> {
        Ok(patch.clone())
    }
}

/// A model wired to one task.
pub struct ModelRestorer<'m> {
    pub model: &'m IptModel,
    pub task_id: String,
}

impl<'m> ModelRestorer<'m> {
    pub fn new(model: &'m IptModel, task_id: &str) -> Result<Self> {
        model.task(task_id)?;
        Ok(ModelRestorer {
            model,
            task_id: task_id.to_string(),
        })
    }
}

impl Restorer for ModelRestorer<'_> {
    fn output_scale(&self) -> usize {
        self.model
            .task(&self.task_id)
            .map(|t| t.output_scale())
            .unwrap_or(1)
    }

    fn restore_patch(&self, patch: &ImageBuffer) -> Result<ImageBuffer> {
        let y = self.model.infer(&patch.to_tensor(), &self.task_id)?;
        let mut out = ImageBuffer::batch_from_tensor(&y)?;
        Ok(out.remove(0).with_source(patch.source_id.clone()))
    }
}

/// Tiles `img`, restores every tile (in parallel), and merges on the grid
/// scaled by the restorer's factor. Images smaller than a tile are padded by
/// edge replication and the output is cropped back to `k·H × k·W`.
pub fn tiled_restore<R: Restorer + ?Sized>(
    restorer: &R,
    img: &ImageBuffer,
    patch: usize,
    overlap: usize,
) -> Result<ImageBuffer> {
    let k = restorer.output_scale();
    let (h, w) = (img.height(), img.width());
    let padded = img.pad_edge_to(h.max(patch), w.max(patch));
    let (grid, tiles) = extract_patches(&padded, patch, overlap)?;
    let restored: Vec<Result<ImageBuffer>> = par_map_range(tiles.len(), |i| restorer.restore_patch(&tiles[i]));
    let restored = restored.into_iter().collect::<Result<Vec<_>>>()?;
    for r in &restored {
        if r.height() != patch * k || r.width() != patch * k {
            return Err(Error::contract(format!(
                "restorer returned {}x{} for a {patch}px tile at scale {k}",
                r.height(),
                r.width()
            )));
        }
    }
    let merged = merge_patches(&grid.scaled(k), &restored)?;
    let out = if merged.height() == h * k && merged.width() == w * k {
        merged
    } else {
        merged.crop(0, 0, h * k, w * k)?
    };
    Ok(out.with_source(img.source_id.clone()))
}

/// Element `t` of the dihedral group: `t % 4` quarter turns clockwise, then a
/// horizontal mirror when `t ≥ 4`.
pub fn dihedral(img: &ImageBuffer, t: usize) -> ImageBuffer {
    let mut out = img.clone();
    for _ in 0..t % 4 {
        out = rotate90(&out);
    }
    if t >= 4 {
        out = mirror(&out);
    }
    out
}

/// Undoes [`dihedral`] with the same `t`.
pub fn dihedral_inverse(img: &ImageBuffer, t: usize) -> ImageBuffer {
    let mut out = if t >= 4 { mirror(img) } else { img.clone() };
    for _ in 0..(4 - t % 4) % 4 {
        out = rotate90(&out);
    }
    out
}

fn rotate90(img: &ImageBuffer) -> ImageBuffer {
    let (h, w) = (img.height(), img.width());
    ImageBuffer::from_fn(w, h, |y, x, c| img.get(h - 1 - x, y, c)).with_source(img.source_id.clone())
}

fn mirror(img: &ImageBuffer) -> ImageBuffer {
    let w = img.width();
    ImageBuffer::from_fn(img.height(), w, |y, x, c| img.get(y, w - 1 - x, c)).with_source(img.source_id.clone())
}

/// Averages tiled restorations of the 8 dihedral variants of `img`.
pub fn self_ensemble_infer<R: Restorer + ?Sized>(
    restorer: &R,
    img: &ImageBuffer,
    patch: usize,
    overlap: usize,
) -> Result<ImageBuffer> {
    let mut acc: Option<ImageBuffer> = None;
    for t in 0..8 {
        let out = dihedral_inverse(&tiled_restore(restorer, &dihedral(img, t), patch, overlap)?, t);
        match acc.as_mut() {
            None => acc = Some(out),
            Some(a) => {
                let n = (t + 1) as crate::numerics::Scalar;
                for (av, ov) in a.pixels_mut().iter_mut().zip(out.pixels()) {
                    *av += (ov - *av) / n;
                }
            }
        }
    }
    Ok(acc.expect("eight transforms"))
}
