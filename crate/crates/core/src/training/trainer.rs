use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use log::info;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::checkpoint::{save_checkpoint, Checkpoint, RngState};
use super::config::TrainConfig;
use super::data::{sample_task_batch, TrainingSet};
use crate::degradations::{rng_from_seed, DatasetManifest};
use crate::error::{Error, Result};
use crate::losses::{combine, contrastive_loss, supervised_l1, LossBreakdown};
use crate::model::{Bound, IptModel, ModelConfig, TaskSpec};
use crate::numerics::{adam_step, AdamState, Scalar, Tape};

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const CHECKPOINT_FILE: &str = "checkpoint.ckpt";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub epoch: u64,
    pub task_id: String,
    pub lr: f64,
    pub loss: LossBreakdown,
}

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: u64,
    pub lr: f64,
    pub steps: usize,
    pub task_counts: BTreeMap<String, usize>,
    pub sup: f64,
    pub con: f64,
    pub total: f64,
}

/// State of one training run.
pub struct Trainer {
    pub model: IptModel,
    pub adam: AdamState,
    pub config: TrainConfig,
    pub data: TrainingSet,
    pub lambda: f64,
    /// Overrides the epoch schedule (fine-tuning).
    pub fixed_lr: Option<f64>,
    pub epoch: u64,
    pub step: u64,
    pub history: Vec<StepRecord>,
    pub manifest_hash: String,
    rng: ChaCha8Rng,
}

impl Trainer {
    pub fn new(model: IptModel, data: TrainingSet, config: TrainConfig, manifest_hash: String) -> Result<Self> {
        config.validate()?;
        if data.is_empty() {
            return Err(Error::contract("training set is empty"));
        }
        for t in data.available_tasks() {
            let spec = model.task(&t)?;
            let lr_crop = data.crop / spec.output_scale();
            if lr_crop % model.config.patch != 0 {
                return Err(Error::config(format!(
                    "{t}: input crop {lr_crop} is not divisible by patch {}",
                    model.config.patch
                )));
            }
            if lr_crop > model.config.crop {
                return Err(Error::config(format!("{t}: input crop {lr_crop} exceeds the model crop")));
            }
        }
        Ok(Trainer {
            rng: rng_from_seed(config.seed),
            lambda: config.lambda,
            fixed_lr: None,
            adam: AdamState::default(),
            model,
            config,
            data,
            epoch: 0,
            step: 0,
            history: Vec::new(),
            manifest_hash,
        })
    }

    /// Fresh model over the manifest's tasks (after `task_filter`).
    pub fn for_pretraining(manifest: &DatasetManifest, config: &TrainConfig) -> Result<Self> {
        let tasks = selected_tasks(manifest, config)?;
        let model_cfg = ModelConfig {
            crop: config.crop,
            tasks: tasks
                .iter()
                .map(|t| Ok(TaskSpec::new(manifest.task(t)?.clone())))
                .collect::<Result<_>>()?,
            ..config.model.clone()
        };
        let model = IptModel::new(model_cfg, config.seed)?;
        let data = TrainingSet::from_manifest(manifest, &tasks, config.crop)?;
        if data.available_tasks().is_empty() {
            return Err(Error::contract("no task has images at least as large as the crop"));
        }
        Trainer::new(model, data, config.clone(), manifest.content_hash())
    }

    pub fn lr(&self) -> f64 {
        self.fixed_lr.unwrap_or_else(|| self.config.lr_at(self.epoch as usize))
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.config
            .steps_per_epoch
            .unwrap_or_else(|| self.data.len().div_ceil(self.config.batch_size))
    }

    /// Losses of the current parameters on one batch, without updating.
    pub fn evaluate_batch(&self, batch: &super::data::TaskBatch) -> Result<LossBreakdown> {
        let tape = Tape::inference();
        self.losses(&tape, batch).map(|(b, _, _)| b)
    }

    fn losses<'t>(
        &self,
        tape: &'t Tape,
        batch: &super::data::TaskBatch,
    ) -> Result<(LossBreakdown, crate::numerics::Var<'t>, Bound<'t, '_>)> {
        let bound = Bound::new(tape, &self.model);
        let x = tape.constant(batch.inputs.clone());
        let y = tape.constant(batch.targets.clone());
        let (pred, feats) = self.model.forward_with_features(&bound, &x, &batch.task_id)?;
        let sup = supervised_l1(&pred, &y)?;
        let con = if feats.shape()[0] >= 2 {
            Some(contrastive_loss(&feats)?)
        } else if self.lambda > 0.0 {
            return Err(Error::contract("contrastive loss needs a batch of at least 2"));
        } else {
            None
        };
        let total = match con {
            Some(c) if self.lambda > 0.0 => combine(&sup, &c, self.lambda as Scalar)?,
            _ => sup,
        };
        let breakdown = LossBreakdown {
            supervised: sup.value().item() as f64,
            contrastive: con.map(|c| c.value().item() as f64).unwrap_or(0.0),
            lambda: self.lambda,
            total: total.value().item() as f64,
        };
        Ok((breakdown, total, bound))
    }

    /// Sample → forward → loss → backward → Adam.
    pub fn train_step(&mut self) -> Result<StepRecord> {
        let batch = sample_task_batch(&self.data, self.config.batch_size, &mut self.rng)?;
        let lr = self.lr();
        let (loss, grads) = {
            let tape = Tape::new();
            let (loss, total, bound) = self.losses(&tape, &batch)?;
            if !loss.is_finite() {
                return Err(Error::NonFinite {
                    step: self.step as usize,
                    task: batch.task_id.clone(),
                    detail: format!("{loss:?}"),
                });
            }
            let grads = bound.gradients(&tape.backward(total)?);
            (loss, grads)
        };
        adam_step(&mut self.model.params, &grads, &mut self.adam, lr as Scalar)?;
        let rec = StepRecord {
            step: self.step,
            epoch: self.epoch,
            task_id: batch.task_id,
            lr,
            loss,
        };
        self.step += 1;
        self.history.push(rec.clone());
        Ok(rec)
    }

    pub fn run_epoch(&mut self) -> Result<EpochMetrics> {
        let n = self.steps_per_epoch();
        let lr = self.lr();
        let mut counts = BTreeMap::new();
        let (mut sup, mut con, mut total) = (0.0, 0.0, 0.0);
        for _ in 0..n {
            let r = self.train_step()?;
            *counts.entry(r.task_id).or_insert(0) += 1;
            sup += r.loss.supervised;
            con += r.loss.contrastive;
            total += r.loss.total;
        }
        let m = EpochMetrics {
            epoch: self.epoch,
            lr,
            steps: n,
            task_counts: counts,
            sup: sup / n as f64,
            con: con / n as f64,
            total: total / n as f64,
        };
        info!(
            "epoch {} lr {:.2e} sup {:.5} con {:.5} total {:.5}",
            m.epoch, m.lr, m.sup, m.con, m.total
        );
        self.epoch += 1;
        Ok(m)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            model: self.model.clone(),
            adam: self.adam.clone(),
            epoch: self.epoch,
            step: self.step,
            rng: RngState::capture(&self.rng),
            manifest_hash: self.manifest_hash.clone(),
            train_config: Some(self.config.clone()),
        }
    }

    /// Runs `epochs` epochs, appending metrics and rewriting the checkpoint in
    /// `out_dir` after each one.
    pub fn run(&mut self, epochs: usize, out_dir: Option<&Path>) -> Result<Vec<EpochMetrics>> {
        let mut log = match out_dir {
            Some(dir) => {
                fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
                let p = dir.join(METRICS_FILE);
                Some((fs::File::create(&p).map_err(|e| Error::io(&p, e))?, p))
            }
            None => None,
        };
        let mut out = Vec::with_capacity(epochs);
        for _ in 0..epochs {
            let m = self.run_epoch()?;
            if let (Some((f, p)), Some(dir)) = (log.as_mut(), out_dir) {
                let line = serde_json::to_string(&m).map_err(|e| Error::Format(e.to_string()))?;
                writeln!(f, "{line}").map_err(|e| Error::io(p.as_path(), e))?;
                save_checkpoint(&self.checkpoint(), dir.join(CHECKPOINT_FILE))?;
            }
            out.push(m);
        }
        Ok(out)
    }
}

fn selected_tasks(manifest: &DatasetManifest, config: &TrainConfig) -> Result<Vec<String>> {
    match &config.task_filter {
        None => Ok(manifest.task_ids()),
        Some(filter) => {
            for t in filter {
                manifest.task(t)?;
            }
            Ok(filter.clone())
        }
    }
}

/// Result of a training run.
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub epochs: Vec<EpochMetrics>,
    pub steps: Vec<StepRecord>,
}

/// Multi-task pre-training from a manifest.
pub fn pretrain(manifest: &DatasetManifest, config: &TrainConfig, out_dir: Option<&Path>) -> Result<TrainOutcome> {
    let mut t = Trainer::for_pretraining(manifest, config)?;
    let epochs = t.run(config.epochs, out_dir)?;
    Ok(TrainOutcome {
        checkpoint: t.checkpoint(),
        epochs,
        steps: t.history,
    })
}

/// Drops every other task from `ckpt` and trains the rest on `task_id` with
/// a fresh optimizer, `finetune_lr` and `finetune_lambda`.
pub fn finetune(
    ckpt: &Checkpoint,
    task_id: &str,
    manifest: &DatasetManifest,
    config: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    let model = ckpt.model.retain_task(task_id)?;
    manifest.task(task_id)?;
    let crop = config.crop;
    let data = TrainingSet::from_manifest(manifest, &[task_id.to_string()], crop)?;
    let cfg = TrainConfig {
        lambda: config.finetune_lambda,
        epochs: config.finetune_epochs,
        decay_epoch: 0,
        ..config.clone()
    };
    let mut t = Trainer::new(model, data, cfg, manifest.content_hash())?;
    t.fixed_lr = Some(config.finetune_lr);
    let epochs = t.run(config.finetune_epochs, out_dir)?;
    Ok(TrainOutcome {
        checkpoint: t.checkpoint(),
        epochs,
        steps: t.history,
    })
}

/// Path of the checkpoint written by [`Trainer::run`].
pub fn checkpoint_path(out_dir: &Path) -> PathBuf {
    out_dir.join(CHECKPOINT_FILE)
}
