//! Multi-task pre-training, single-task fine-tuning and checkpoints.

mod checkpoint;
mod config;
mod data;
mod trainer;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, RngState, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use config::TrainConfig;
pub use data::{choose_task, paired_crop, sample_task_batch, TaskBatch, TrainingPair, TrainingSet};
pub use trainer::{
    checkpoint_path, finetune, pretrain, EpochMetrics, StepRecord, TrainOutcome, Trainer, CHECKPOINT_FILE,
    METRICS_FILE,
};
