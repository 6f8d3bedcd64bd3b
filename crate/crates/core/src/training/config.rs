use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelConfig;

/// Optimisation settings for pre-training and fine-tuning.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_initial: f64,
    pub lr_after_decay: f64,
    /// First epoch trained at `lr_after_decay`.
    pub decay_epoch: usize,
    pub lambda: f64,
    /// Clean crop size in pixels; SR inputs are `crop / k`.
    pub crop: usize,
    pub seed: u64,
    /// Restrict pre-training to these task ids.
    pub task_filter: Option<Vec<String>>,
    /// Steps per epoch; `None` means one pass worth of batches over the entries.
    pub steps_per_epoch: Option<usize>,
    pub finetune_epochs: usize,
    pub finetune_lr: f64,
    pub finetune_lambda: f64,
    /// Architecture; its task list is replaced by the manifest's tasks.
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 4,
            lr_initial: 5e-5,
            lr_after_decay: 2e-5,
            decay_epoch: 20,
            lambda: 0.1,
            crop: 48,
            seed: 0,
            task_filter: None,
            steps_per_epoch: None,
            finetune_epochs: 30,
            finetune_lr: 2e-5,
            finetune_lambda: 0.0,
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs > 0 && self.decay_epoch >= self.epochs {
            return Err(Error::config(format!(
                "decay_epoch {} must be before epochs {}",
                self.decay_epoch, self.epochs
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be positive"));
        }
        for (name, lambda) in [("lambda", self.lambda), ("finetune_lambda", self.finetune_lambda)] {
            if !(lambda >= 0.0) {
                return Err(Error::config(format!("{name} must be non-negative")));
            }
            if lambda > 0.0 && self.batch_size < 2 {
                return Err(Error::config(format!("{name} > 0 needs batch_size ≥ 2")));
            }
        }
        for (name, lr) in [
            ("lr_initial", self.lr_initial),
            ("lr_after_decay", self.lr_after_decay),
            ("finetune_lr", self.finetune_lr),
        ] {
            if !(lr > 0.0) || !lr.is_finite() {
                return Err(Error::config(format!("{name} must be positive")));
            }
        }
        if self.crop == 0 || self.steps_per_epoch == Some(0) {
            return Err(Error::config("crop and steps_per_epoch must be positive"));
        }
        Ok(())
    }

    /// Step schedule: `lr_initial` before `decay_epoch`, `lr_after_decay` from then on.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        if epoch < self.decay_epoch {
            self.lr_initial
        } else {
            self.lr_after_decay
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_schedule_steps_once() {
        let c = TrainConfig::default();
        c.validate().unwrap();
        assert_eq!(c.lr_at(0), 5e-5);
        assert_eq!(c.lr_at(19), 5e-5);
        assert_eq!(c.lr_at(20), 2e-5);
        assert_eq!(c.lr_at(29), 2e-5);
    }

    #[test]
    fn invalid_configs() {
        let bad = [
            TrainConfig { decay_epoch: 30, ..Default::default() },
            TrainConfig { batch_size: 1, ..Default::default() },
            TrainConfig { lambda: -1.0, ..Default::default() },
            TrainConfig { lr_initial: 0.0, ..Default::default() },
        ];
        for c in bad {
            assert!(c.validate().is_err(), "{c:?}");
        }
        TrainConfig { batch_size: 1, lambda: 0.0, ..Default::default() }.validate().unwrap();
    }

    #[test]
    fn partial_json_fills_defaults() {
        let c: TrainConfig = serde_json::from_str(r#"{"epochs": 3, "decay_epoch": 2, "model": {"channels": 4}}"#).unwrap();
        assert_eq!(c.epochs, 3);
        assert_eq!(c.batch_size, 4);
        assert_eq!(c.model.channels, 4);
        assert_eq!(c.model.patch, 4);
    }
}
