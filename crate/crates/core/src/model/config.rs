use serde::{Deserialize, Serialize};

use crate::degradations::DegradationKind;
use crate::error::{Error, Result};

/// Layout of the per-task input stage.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    /// 3×3 conv then two residual blocks of 5×5 convs.
    #[default]
    ResBlocks,
    /// Three 3×3 convs with ReLU between them.
    Simple3,
}

/// A registered task: its id and the corruption it undoes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub task_id: String,
    pub degradation: DegradationKind,
}

impl TaskSpec {
    pub fn new(degradation: DegradationKind) -> Self {
        TaskSpec {
            task_id: degradation.task_id(),
            degradation,
        }
    }

    /// Restored extent divided by input extent.
    pub fn output_scale(&self) -> usize {
        self.degradation.output_scale()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Feature channels `C`.
    pub channels: usize,
    /// Feature patch size `P`; tokens have `d = P²·C` entries.
    pub patch: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub num_heads: usize,
    /// FFN hidden width; `None` means `4·d`.
    pub ffn_hidden: Option<usize>,
    #[serde(default)]
    pub head: HeadKind,
    /// Training crop in pixels; the position table covers `(crop/P)²` tokens.
    pub crop: usize,
    pub ln_eps: f64,
    pub init_std: f64,
    pub tasks: Vec<TaskSpec>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::desk(Vec::new())
    }
}

impl ModelConfig {
    /// Small CPU-friendly configuration.
    pub fn desk(tasks: Vec<TaskSpec>) -> Self {
        ModelConfig {
            channels: 8,
            patch: 4,
            encoder_layers: 2,
            decoder_layers: 2,
            num_heads: 4,
            ffn_hidden: None,
            head: HeadKind::ResBlocks,
            crop: 48,
            ln_eps: 1e-5,
            init_std: 0.02,
            tasks,
        }
    }

    /// Full-size layout (construction only): C=64, P=3, 12+12 layers, 8 heads,
    /// six tasks. Comes to about 114.6M parameters.
    pub fn full_scale() -> Self {
        ModelConfig {
            channels: 64,
            patch: 3,
            encoder_layers: 12,
            decoder_layers: 12,
            num_heads: 8,
            ..Self::desk(crate::degradations::default_tasks().into_iter().map(TaskSpec::new).collect())
        }
    }

    /// Token width `d = P²·C`.
    pub fn token_dim(&self) -> usize {
        self.patch * self.patch * self.channels
    }

    pub fn ffn_width(&self) -> usize {
        self.ffn_hidden.unwrap_or(4 * self.token_dim())
    }

    /// Side of the position-embedding grid.
    pub fn grid(&self) -> usize {
        self.crop / self.patch
    }

    pub fn max_tokens(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn task(&self, task_id: &str) -> Result<&TaskSpec> {
        self.tasks
            .iter()
            .find(|t| t.task_id == task_id)
            .ok_or_else(|| Error::UnknownTask(task_id.to_string()))
    }

    pub fn task_ids(&self) -> Vec<String> {
        self.tasks.iter().map(|t| t.task_id.clone()).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("channels", self.channels),
            ("patch", self.patch),
            ("num_heads", self.num_heads),
            ("crop", self.crop),
            ("ffn_hidden", self.ffn_width()),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::config(format!("{name} must be positive")));
            }
        }
        if self.token_dim() % self.num_heads != 0 {
            return Err(Error::config(format!(
                "token dim {} is not divisible by {} heads",
                self.token_dim(),
                self.num_heads
            )));
        }
        if self.crop % self.patch != 0 {
            return Err(Error::config(format!(
                "crop {} is not divisible by patch {}",
                self.crop, self.patch
            )));
        }
        if !(self.ln_eps > 0.0) || !(self.init_std >= 0.0) {
            return Err(Error::config("ln_eps must be positive and init_std non-negative"));
        }
        if self.tasks.is_empty() {
            return Err(Error::config("model needs at least one task"));
        }
        for (i, t) in self.tasks.iter().enumerate() {
            t.degradation.validate()?;
            if self.tasks[..i].iter().any(|o| o.task_id == t.task_id) {
                return Err(Error::config(format!("task {} registered twice", t.task_id)));
            }
        }
        Ok(())
    }

    /// Closed-form parameter count, independent of parameter construction.
    pub fn census(&self) -> usize {
        let d = self.token_dim();
        let h = self.ffn_width();
        let ln = 2 * d;
        let attn = 4 * d * d;
        let ffn = d * h + h + h * d + d;
        let encoder = self.encoder_layers * (2 * ln + attn + ffn);
        let decoder = self.decoder_layers * (4 * ln + 2 * attn + ffn);
        let tasks: usize = self.tasks.iter().map(|t| self.task_census(t)).sum();
        self.max_tokens() * d + encoder + decoder + tasks
    }

    /// Parameters owned by one task: head, tail and task embedding.
    pub fn task_census(&self, task: &TaskSpec) -> usize {
        let c = self.channels;
        let conv = |cin: usize, cout: usize, k: usize| cin * cout * k * k + cout;
        let head = match self.head {
            HeadKind::ResBlocks => conv(3, c, 3) + 4 * conv(c, c, 5),
            HeadKind::Simple3 => conv(3, c, 3) + 2 * conv(c, c, 3),
        };
        let k = task.output_scale();
        let tail = match k {
            1 => conv(c, 3, 3),
            4 => 2 * conv(c, 4 * c, 3) + conv(c, 3, 3),
            _ => conv(c, 3 * k * k, 3),
        };
        head + tail + self.token_dim()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_scale_census_is_near_114m() {
        let cfg = ModelConfig::full_scale();
        cfg.validate().unwrap();
        let n = cfg.census() as f64;
        assert!((n / 114e6 - 1.0).abs() < 0.02, "{n}");
    }

    #[test]
    fn validation_catches_bad_layouts() {
        let tasks = vec![TaskSpec::new("noise30".parse().unwrap())];
        let mut cfg = ModelConfig::desk(tasks.clone());
        cfg.validate().unwrap();
        cfg.num_heads = 3;
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        let mut cfg = ModelConfig::desk(tasks.clone());
        cfg.crop = 50;
        assert!(cfg.validate().is_err());
        let mut cfg = ModelConfig::desk(vec![tasks[0].clone(), tasks[0].clone()]);
        assert!(cfg.validate().is_err());
        cfg.tasks.clear();
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn desk_defaults() {
        let cfg = ModelConfig::default();
        assert_eq!(cfg.token_dim(), 128);
        assert_eq!(cfg.ffn_width(), 512);
        assert_eq!(cfg.max_tokens(), 144);
    }
}
