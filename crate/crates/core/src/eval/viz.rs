use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::imaging::{encode_png, write_atomic};
use crate::model::IptModel;
use crate::numerics::Tensor;

/// Square matrix of cosine similarities, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityMatrix {
    pub n: usize,
    pub values: Vec<f64>,
}

impl SimilarityMatrix {
    /// Cosine similarity between all rows of `rows` (`n` vectors of equal
    /// length). The diagonal is set to exactly 1.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        let norms: Vec<f64> = rows.iter().map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt()).collect();
        if let Some(i) = norms.iter().position(|&v| !(v > 0.0)) {
            return Err(Error::contract(format!("embedding row {i} has zero norm")));
        }
        let mut values = vec![0.0; n * n];
        for i in 0..n {
            values[i * n + i] = 1.0;
            for j in i + 1..n {
                let dot: f64 = rows[i].iter().zip(&rows[j]).map(|(a, b)| a * b).sum();
                let s = (dot / (norms[i] * norms[j])).clamp(-1.0, 1.0);
                values[i * n + j] = s;
                values[j * n + i] = s;
            }
        }
        Ok(SimilarityMatrix { n, values })
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.n + j]
    }

    /// Mean |similarity| over off-diagonal entries.
    pub fn off_diagonal_mean_abs(&self) -> f64 {
        let n = self.n;
        if n < 2 {
            return 0.0;
        }
        let total: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| self.get(i, j).abs())
            .sum();
        total / (n * (n - 1)) as f64
    }

    /// 8-bit grayscale codes, −1 → 0 and +1 → 255, each entry drawn as a
    /// `cell × cell` block.
    pub fn to_gray(&self, cell: usize) -> Vec<u8> {
        let side = self.n * cell;
        let mut out = Vec::with_capacity(side * side);
        for y in 0..side {
            for x in 0..side {
                let s = self.get(y / cell, x / cell);
                out.push(((s + 1.0) / 2.0 * 255.0).round().clamp(0.0, 255.0) as u8);
            }
        }
        out
    }

    pub fn to_png(&self, cell: usize) -> Result<Vec<u8>> {
        let side = (self.n * cell) as u32;
        encode_png(side, side, png::ColorType::Grayscale, &self.to_gray(cell))
    }
}

fn tensor_rows(t: &Tensor, rows: usize) -> Vec<Vec<f64>> {
    let width = t.len() / rows;
    t.data()
        .chunks(width)
        .map(|r| r.iter().map(|&v| v as f64).collect())
        .collect()
}

/// Similarity of every pair of position-embedding rows.
pub fn position_similarity(model: &IptModel) -> Result<SimilarityMatrix> {
    let pos = &model.params["pos_embed"];
    SimilarityMatrix::from_rows(&tensor_rows(pos, model.config.max_tokens()))
}

/// A task embedding viewed as `P²` within-patch positions of `C` channels;
/// similarity between those positions.
pub fn task_similarity(model: &IptModel, task_id: &str) -> Result<SimilarityMatrix> {
    model.task(task_id)?;
    let e = &model.params[&format!("task.{task_id}.embed")];
    let pp = model.config.patch * model.config.patch;
    let c = model.config.channels;
    let rows: Vec<Vec<f64>> = (0..pp)
        .map(|pos| (0..c).map(|ch| e.data()[ch * pp + pos] as f64).collect())
        .collect();
    SimilarityMatrix::from_rows(&rows)
}

/// Cell size that makes the rendered image at least 128 px wide.
pub fn default_cell(n: usize) -> usize {
    128usize.div_ceil(n.max(1))
}

pub struct VizOutput {
    pub position: SimilarityMatrix,
    pub tasks: BTreeMap<String, SimilarityMatrix>,
    pub files: Vec<PathBuf>,
}

/// Writes `position_embedding.png` and one `task_embedding_{id}.png` per task.
pub fn viz_embeddings(model: &IptModel, out_dir: &Path) -> Result<VizOutput> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let position = position_similarity(model)?;
    let mut files = Vec::new();
    let p = out_dir.join("position_embedding.png");
    write_atomic(&p, &position.to_png(default_cell(position.n))?)?;
    files.push(p);
    let mut tasks = BTreeMap::new();
    for id in model.config.task_ids() {
        let m = task_similarity(model, &id)?;
        let p = out_dir.join(format!("task_embedding_{id}.png"));
        write_atomic(&p, &m.to_png(default_cell(m.n))?)?;
        files.push(p);
        tasks.insert(id, m);
    }
    Ok(VizOutput { position, tasks, files })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelConfig, TaskSpec};

    fn model() -> IptModel {
        let tasks = ["noise30", "sr2"].iter().map(|t| TaskSpec::new(t.parse().unwrap())).collect();
        IptModel::new(ModelConfig::desk(tasks), 0).unwrap()
    }

    #[test]
    fn matrices_are_symmetric_with_unit_diagonal() {
        let m = model();
        let s = position_similarity(&m).unwrap();
        assert_eq!(s.n, 144);
        for i in 0..s.n {
            assert_eq!(s.get(i, i), 1.0);
            for j in 0..s.n {
                assert_eq!(s.get(i, j), s.get(j, i));
            }
        }
        let gray = s.to_gray(1);
        for i in 0..s.n {
            assert_eq!(gray[i * s.n + i], 255);
            for j in 0..s.n {
                assert_eq!(gray[i * s.n + j], gray[j * s.n + i]);
            }
        }
        assert_eq!(task_similarity(&m, "sr2").unwrap().n, 16);
    }

    #[test]
    fn random_embeddings_are_nearly_orthogonal() {
        assert!(position_similarity(&model()).unwrap().off_diagonal_mean_abs() < 0.2);
    }

    #[test]
    fn gray_mapping_endpoints() {
        let s = SimilarityMatrix { n: 2, values: vec![1.0, -1.0, -1.0, 1.0] };
        assert_eq!(s.to_gray(1), vec![255, 0, 0, 255]);
        assert_eq!(s.to_gray(2).len(), 16);
    }

    #[test]
    fn files_are_written_and_stable() {
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        let a = viz_embeddings(&model(), d1.path()).unwrap();
        viz_embeddings(&model(), d2.path()).unwrap();
        assert_eq!(a.files.len(), 3);
        for f in &a.files {
            let name = f.file_name().unwrap();
            assert_eq!(std::fs::read(f).unwrap(), std::fs::read(d2.path().join(name)).unwrap());
        }
    }
}
