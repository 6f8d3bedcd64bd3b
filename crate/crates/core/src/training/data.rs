use std::collections::BTreeMap;

use log::warn;
use rand::Rng;

use crate::degradations::DatasetManifest;
use crate::error::{Error, Result};
use crate::imaging::{load_image, ImageBuffer};
use crate::numerics::Tensor;

/// A decoded training pair.
#[derive(Clone, Debug)]
pub struct TrainingPair {
    pub corrupted: ImageBuffer,
    pub clean: ImageBuffer,
}

/// Training pairs grouped by task, decoded once.
#[derive(Clone, Debug)]
pub struct TrainingSet {
    pub crop: usize,
    pub scales: BTreeMap<String, usize>,
    pub pairs: BTreeMap<String, Vec<TrainingPair>>,
}

/// Crops of one task stacked as `[B, 3, h, w]`.
#[derive(Clone, Debug)]
pub struct TaskBatch {
    pub task_id: String,
    pub inputs: Tensor,
    pub targets: Tensor,
}

impl TrainingSet {
    /// Loads every entry of the listed tasks. The corrupted image is rebuilt
    /// from the clean file and the entry seed, so noise is not clamped or
    /// quantized. Images smaller than the clean crop are skipped.
    pub fn from_manifest(manifest: &DatasetManifest, tasks: &[String], crop: usize) -> Result<Self> {
        let mut pairs: BTreeMap<String, Vec<TrainingPair>> = BTreeMap::new();
        let mut scales = BTreeMap::new();
        let mut clean_cache: BTreeMap<std::path::PathBuf, ImageBuffer> = BTreeMap::new();
        for task_id in tasks {
            let kind = manifest.task(task_id)?;
            let k = kind.output_scale();
            if crop % k != 0 {
                return Err(Error::config(format!("crop {crop} is not divisible by scale {k} of {task_id}")));
            }
            scales.insert(task_id.clone(), k);
            let list = pairs.entry(task_id.clone()).or_default();
            for e in manifest.entries_for(task_id) {
                let path = manifest.clean_path(e);
                let clean = match clean_cache.get(&path) {
                    Some(c) => c.clone(),
                    None => {
                        let c = load_image(&path)?;
                        clean_cache.insert(path.clone(), c.clone());
                        c
                    }
                };
                if clean.height() < crop || clean.width() < crop {
                    warn!("{} is smaller than the {crop}px crop; skipped", path.display());
                    continue;
                }
                let corrupted = manifest.regenerate(e, &clean)?;
                list.push(TrainingPair { corrupted, clean });
            }
        }
        Ok(TrainingSet { crop, scales, pairs })
    }

    /// Builds a set directly from in-memory pairs of one task.
    pub fn from_pairs(task_id: &str, scale: usize, crop: usize, pairs: Vec<TrainingPair>) -> Self {
        TrainingSet {
            crop,
            scales: BTreeMap::from([(task_id.to_string(), scale)]),
            pairs: BTreeMap::from([(task_id.to_string(), pairs)]),
        }
    }

    /// Tasks that have at least one usable pair.
    pub fn available_tasks(&self) -> Vec<String> {
        self.pairs
            .iter()
            .filter(|(_, p)| !p.is_empty())
            .map(|(t, _)| t.clone())
            .collect()
    }

    pub fn len(&self) -> usize {
        self.pairs.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Uniform choice among `tasks`.
pub fn choose_task<'a, R: Rng + ?Sized>(tasks: &'a [String], rng: &mut R) -> Result<&'a str> {
    if tasks.is_empty() {
        return Err(Error::contract("no task has training data"));
    }
    Ok(&tasks[rng.gen_range(0..tasks.len())])
}

/// Paired crops at matching positions: a `crop/k` window of the corrupted
/// image and the `crop` window of the clean image it came from.
pub fn paired_crop<R: Rng + ?Sized>(
    pair: &TrainingPair,
    crop: usize,
    k: usize,
    rng: &mut R,
) -> Result<(ImageBuffer, ImageBuffer)> {
    let lr = crop / k;
    let (h, w) = (pair.corrupted.height(), pair.corrupted.width());
    if h < lr || w < lr {
        return Err(Error::contract(format!("{h}x{w} input is smaller than the {lr}px crop")));
    }
    let y = rng.gen_range(0..=h - lr);
    let x = rng.gen_range(0..=w - lr);
    Ok((pair.corrupted.crop(y, x, lr, lr)?, pair.clean.crop(y * k, x * k, crop, crop)?))
}

/// Picks a task uniformly, then `batch_size` entries of it with replacement.
pub fn sample_task_batch<R: Rng + ?Sized>(
    set: &TrainingSet,
    batch_size: usize,
    rng: &mut R,
) -> Result<TaskBatch> {
    let tasks = set.available_tasks();
    let task_id = choose_task(&tasks, rng)?.to_string();
    let pairs = &set.pairs[&task_id];
    let k = set.scales[&task_id];
    let mut inputs = Vec::with_capacity(batch_size);
    let mut targets = Vec::with_capacity(batch_size);
    for _ in 0..batch_size {
        let pair = &pairs[rng.gen_range(0..pairs.len())];
        let (i, t) = paired_crop(pair, set.crop, k, rng)?;
        inputs.push(i);
        targets.push(t);
    }
    Ok(TaskBatch {
        task_id,
        inputs: ImageBuffer::batch_to_tensor(&inputs)?,
        targets: ImageBuffer::batch_to_tensor(&targets)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::degradations::{downsample, rng_from_seed, synthetic_scene};

    #[test]
    fn single_task_is_always_chosen() {
        let tasks = vec!["noise30".to_string()];
        let mut rng = rng_from_seed(1);
        for _ in 0..100 {
            assert_eq!(choose_task(&tasks, &mut rng).unwrap(), "noise30");
        }
        assert!(choose_task(&[], &mut rng).is_err());
    }

    #[test]
    fn six_way_choice_is_uniform() {
        let tasks: Vec<String> = (0..6).map(|i| format!("t{i}")).collect();
        let mut rng = rng_from_seed(7);
        let mut counts = [0usize; 6];
        let n = 60_000;
        for _ in 0..n {
            let t = choose_task(&tasks, &mut rng).unwrap();
            counts[t[1..].parse::<usize>().unwrap()] += 1;
        }
        for c in counts {
            assert!((c as f64 / n as f64 - 1.0 / 6.0).abs() < 0.01, "{counts:?}");
        }
    }

    #[test]
    fn sr_crops_pair_up() {
        let clean = synthetic_scene(60, 64, 3);
        let corrupted = downsample(&clean, 2).unwrap();
        let set = TrainingSet::from_pairs("sr2", 2, 48, vec![TrainingPair { corrupted, clean }]);
        let mut rng = rng_from_seed(2);
        let b = sample_task_batch(&set, 3, &mut rng).unwrap();
        assert_eq!(b.task_id, "sr2");
        assert_eq!(b.inputs.shape(), &[3, 3, 24, 24]);
        assert_eq!(b.targets.shape(), &[3, 3, 48, 48]);
    }

    #[test]
    fn crops_are_aligned() {
        let clean = synthetic_scene(48, 48, 3);
        let pair = TrainingPair { corrupted: clean.clone(), clean };
        let mut rng = rng_from_seed(0);
        for _ in 0..5 {
            let (a, b) = paired_crop(&pair, 16, 1, &mut rng).unwrap();
            assert_eq!(a, b);
        }
    }
}
