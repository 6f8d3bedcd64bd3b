//! The `ipt` command line.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};
use sha2::{Digest, Sha256};

use crate::degradations::{load_manifest, parse_task_list, synthesize_dataset, MANIFEST_FILE};
use crate::eval::{
    evaluate, generalization_eval, self_ensemble_infer, tiled_restore, viz_embeddings, EvalReport, EvalSettings,
    ModelRestorer,
};
use crate::imaging::{load_image, save_image, DEFAULT_OVERLAP, DEFAULT_PATCH};
use crate::training::{finetune, load_checkpoint, pretrain, save_checkpoint, Checkpoint, TrainConfig, CHECKPOINT_FILE};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "ipt", version, about = "Multi-task image restoration transformer")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Corrupt a folder of clean PNGs and write a dataset manifest.
    Synth {
        #[arg(long, value_name = "DIR")]
        clean: PathBuf,
        /// Comma-separated task ids, e.g. sr2,sr3,sr4,noise30,noise50,rain.
        #[arg(long, default_value = "sr2,sr3,sr4,noise30,noise50,rain")]
        tasks: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },
    /// Multi-task pre-training from a manifest.
    Pretrain {
        #[arg(long, value_name = "FILE")]
        manifest: PathBuf,
        /// Training configuration (JSON); omitted fields take their defaults.
        #[arg(long, value_name = "FILE")]
        config: Option<PathBuf>,
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },
    /// Keep one task of a checkpoint and train it alone.
    Finetune {
        #[arg(long, value_name = "FILE")]
        ckpt: PathBuf,
        #[arg(long)]
        task: String,
        /// Dataset directory holding manifest.json.
        #[arg(long, value_name = "DIR")]
        data: PathBuf,
        #[arg(long, value_name = "FILE")]
        config: Option<PathBuf>,
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },
    /// Tiled PSNR/SSIM evaluation.
    Eval {
        #[arg(long, value_name = "FILE")]
        ckpt: PathBuf,
        /// Task to evaluate; required unless --sigmas is given.
        #[arg(long)]
        task: Option<String>,
        /// Directory with manifest.json, or clean PNGs to corrupt on the fly.
        #[arg(long, value_name = "DIR")]
        data: PathBuf,
        /// Noise levels (0..255 scale) for the unseen-noise protocol, e.g. 10,70.
        #[arg(long, value_delimiter = ',')]
        sigmas: Vec<f64>,
        #[arg(long)]
        self_ensemble: bool,
        #[arg(long)]
        quantized_psnr: bool,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = DEFAULT_PATCH)]
        patch: usize,
        #[arg(long, default_value_t = DEFAULT_OVERLAP)]
        overlap: usize,
        /// Write the JSON report(s) here.
        #[arg(long, value_name = "FILE")]
        report: Option<PathBuf>,
    },
    /// Restore a single image.
    Infer {
        #[arg(long, value_name = "FILE")]
        ckpt: PathBuf,
        #[arg(long)]
        task: String,
        #[arg(long = "in", value_name = "FILE")]
        input: PathBuf,
        #[arg(long, value_name = "FILE")]
        out: PathBuf,
        #[arg(long)]
        self_ensemble: bool,
        #[arg(long, default_value_t = DEFAULT_PATCH)]
        patch: usize,
        #[arg(long, default_value_t = DEFAULT_OVERLAP)]
        overlap: usize,
    },
    /// Render position/task embedding similarity heatmaps.
    Viz {
        #[arg(long, value_name = "FILE")]
        ckpt: PathBuf,
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },
}

fn read_config(path: Option<&Path>) -> anyhow::Result<TrainConfig> {
    let Some(p) = path else {
        return Ok(TrainConfig::default());
    };
    let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
    let cfg: TrainConfig = serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))?;
    cfg.validate()?;
    Ok(cfg)
}

fn load_ckpt(path: &Path) -> anyhow::Result<(Checkpoint, String)> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    let hash: String = Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect();
    let ckpt = load_checkpoint(path)?;
    Ok((ckpt, hash))
}

fn write_reports(reports: &[EvalReport], path: Option<&Path>) -> anyhow::Result<()> {
    for r in reports {
        print!("{}", r.to_table());
    }
    if let Some(p) = path {
        let json = if reports.len() == 1 {
            reports[0].to_json()?
        } else {
            serde_json::to_string_pretty(reports)?
        };
        crate::imaging::write_atomic(p, json.as_bytes())?;
    }
    Ok(())
}

/// Executes a parsed command.
pub fn execute(cmd: Command) -> anyhow::Result<()> {
    match cmd {
        Command::Synth { clean, tasks, seed, out } => {
            let tasks = parse_task_list(&tasks)?;
            let m = synthesize_dataset(&clean, &tasks, seed, &out)?;
            println!("{} entries written to {}", m.entries.len(), out.join(MANIFEST_FILE).display());
        }
        Command::Pretrain { manifest, config, out } => {
            let cfg = read_config(config.as_deref())?;
            let m = load_manifest(&manifest)?;
            let run = pretrain(&m, &cfg, Some(&out))?;
            println!(
                "trained {} steps; checkpoint {}",
                run.steps.len(),
                out.join(CHECKPOINT_FILE).display()
            );
        }
        Command::Finetune { ckpt, task, data, config, out } => {
            let (ck, _) = load_ckpt(&ckpt)?;
            let cfg = match config {
                Some(p) => read_config(Some(&p))?,
                None => ck.train_config.clone().unwrap_or_default(),
            };
            let m = load_manifest(data.join(MANIFEST_FILE))?;
            let run = finetune(&ck, &task, &m, &cfg, Some(&out))?;
            save_checkpoint(&run.checkpoint, out.join(CHECKPOINT_FILE))?;
            println!(
                "fine-tuned {task}: {} -> {} parameters; checkpoint {}",
                ck.param_count(),
                run.checkpoint.param_count(),
                out.join(CHECKPOINT_FILE).display()
            );
        }
        Command::Eval {
            ckpt,
            task,
            data,
            sigmas,
            self_ensemble,
            quantized_psnr,
            seed,
            patch,
            overlap,
            report,
        } => {
            let (ck, hash) = load_ckpt(&ckpt)?;
            let settings = EvalSettings {
                patch,
                overlap,
                self_ensemble,
                eval_seed: seed,
                quantized_psnr,
                routed_task: None,
            };
            let reports = if !sigmas.is_empty() {
                generalization_eval(&ck.model, &hash, &sigmas, &data, &settings)?
            } else {
                let Some(task) = task else {
                    bail!("either --task or --sigmas is required");
                };
                vec![evaluate(&ck.model, &hash, &task, &data, &settings)?]
            };
            write_reports(&reports, report.as_deref())?;
        }
        Command::Infer { ckpt, task, input, out, self_ensemble, patch, overlap } => {
            let (ck, _) = load_ckpt(&ckpt)?;
            let restorer = ModelRestorer::new(&ck.model, &task)?;
            let img = load_image(&input)?;
            let restored = if self_ensemble {
                self_ensemble_infer(&restorer, &img, patch, overlap)?
            } else {
                tiled_restore(&restorer, &img, patch, overlap)?
            };
            save_image(&restored, &out)?;
            println!("{}x{} -> {}x{}", img.width(), img.height(), restored.width(), restored.height());
        }
        Command::Viz { ckpt, out } => {
            let (ck, _) = load_ckpt(&ckpt)?;
            let v = viz_embeddings(&ck.model, &out)?;
            for f in v.files {
                println!("{}", f.display());
            }
        }
    }
    Ok(())
}

/// Parses `argv` (program name first) and runs it, returning the exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e:#}");
            EXIT_RUNTIME
        }
    }
}
