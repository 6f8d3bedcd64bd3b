use std::path::{Path, PathBuf};

use log::warn;

use super::report::{EvalReport, EvalSettings, ImageScore};
use super::restore::{self_ensemble_infer, tiled_restore, ModelRestorer, Restorer};
use crate::degradations::{derive_seed, load_manifest, DegradationKind, MANIFEST_FILE};
use crate::error::{Error, Result};
use crate::imaging::{load_image, psnr, psnr_quantized, ssim, ImageBuffer};
use crate::model::IptModel;

/// One corrupted/clean evaluation pair.
#[derive(Clone, Debug)]
pub struct EvalPair {
    pub id: String,
    pub corrupted: ImageBuffer,
    pub clean: ImageBuffer,
}

fn list_pngs(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
        .collect();
    out.sort();
    Ok(out)
}

/// Clean image cropped so each side is a multiple of `k`.
pub fn modcrop(img: &ImageBuffer, k: usize) -> Result<ImageBuffer> {
    let (h, w) = (img.height() / k * k, img.width() / k * k);
    if h == img.height() && w == img.width() {
        return Ok(img.clone());
    }
    img.crop(0, 0, h, w)
}

/// Corrupts every clean PNG of `dir` on the fly. Entry `i` uses the seed
/// `derive_seed(eval_seed, i, task_id)`; SR inputs come from the modcropped
/// clean image.
pub fn synthesize_pairs(
    dir: &Path,
    kind: &DegradationKind,
    eval_seed: u64,
    skipped: &mut Vec<String>,
) -> Result<Vec<EvalPair>> {
    let task_id = kind.task_id();
    let k = kind.output_scale();
    let mut pairs = Vec::new();
    for (i, path) in list_pngs(dir)?.iter().enumerate() {
        let clean = match load_image(path).and_then(|c| modcrop(&c, k)) {
            Ok(c) => c,
            Err(e) => {
                warn!("skipping {}: {e}", path.display());
                skipped.push(format!("{}: {e}", path.display()));
                continue;
            }
        };
        let corrupted = kind.apply(&clean, derive_seed(eval_seed, i as u64, &task_id))?;
        pairs.push(EvalPair {
            id: clean.source_id.clone(),
            corrupted,
            clean,
        });
    }
    Ok(pairs)
}

/// Pairs listed in a manifest for `task_id`. Unreadable or mismatched pairs
/// are reported in `skipped`.
pub fn manifest_pairs(manifest_path: &Path, task_id: &str, skipped: &mut Vec<String>) -> Result<Vec<EvalPair>> {
    let m = load_manifest(manifest_path)?;
    let k = m.task(task_id)?.output_scale();
    let mut pairs = Vec::new();
    for e in m.entries_for(task_id) {
        let loaded = load_image(m.corrupted_path(e)).and_then(|c| Ok((c, load_image(m.clean_path(e))?)));
        let (corrupted, clean) = match loaded {
            Ok(p) => p,
            Err(err) => {
                warn!("skipping {}: {err}", e.corrupted_path.display());
                skipped.push(format!("{}: {err}", e.corrupted_path.display()));
                continue;
            }
        };
        let (h, w) = (corrupted.height() * k, corrupted.width() * k);
        if clean.height() < h || clean.width() < w {
            let msg = format!("{}: clean image smaller than {k}x the input", e.corrupted_path.display());
            warn!("skipping {msg}");
            skipped.push(msg);
            continue;
        }
        pairs.push(EvalPair {
            id: clean.source_id.clone(),
            corrupted,
            clean: clean.crop(0, 0, h, w)?,
        });
    }
    Ok(pairs)
}

/// Restores every pair and scores the clamped output against its clean image.
pub fn score_pairs<R: Restorer + ?Sized>(
    restorer: &R,
    pairs: &[EvalPair],
    settings: &EvalSettings,
    skipped: &mut Vec<String>,
) -> Result<Vec<ImageScore>> {
    let mut scores = Vec::with_capacity(pairs.len());
    for p in pairs {
        let out = if settings.self_ensemble {
            self_ensemble_infer(restorer, &p.corrupted, settings.patch, settings.overlap)?
        } else {
            tiled_restore(restorer, &p.corrupted, settings.patch, settings.overlap)?
        }
        .clamped();
        if !out.same_extent(&p.clean) {
            let msg = format!(
                "{}: output {}x{} vs clean {}x{}",
                p.id,
                out.height(),
                out.width(),
                p.clean.height(),
                p.clean.width()
            );
            warn!("skipping {msg}");
            skipped.push(msg);
            continue;
        }
        let psnr = if settings.quantized_psnr {
            psnr_quantized(&out, &p.clean)?
        } else {
            psnr(&out, &p.clean)?
        };
        scores.push(ImageScore {
            id: p.id.clone(),
            psnr,
            ssim: ssim(&out, &p.clean)?,
        });
    }
    Ok(scores)
}

/// Pairs for `task_id` from `eval_dir`: the manifest entries when the
/// directory holds a manifest, otherwise clean PNGs corrupted on the fly.
pub fn load_eval_pairs(
    eval_dir: &Path,
    kind: &DegradationKind,
    eval_seed: u64,
    skipped: &mut Vec<String>,
) -> Result<Vec<EvalPair>> {
    let manifest = eval_dir.join(MANIFEST_FILE);
    if manifest.is_file() {
        manifest_pairs(&manifest, &kind.task_id(), skipped)
    } else {
        synthesize_pairs(eval_dir, kind, eval_seed, skipped)
    }
}

fn dataset_name(dir: &Path) -> String {
    dir.file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| dir.display().to_string())
}

/// Tiled evaluation of `task_id` on `eval_dir`.
pub fn evaluate(
    model: &IptModel,
    checkpoint_hash: &str,
    task_id: &str,
    eval_dir: &Path,
    settings: &EvalSettings,
) -> Result<EvalReport> {
    let kind = model.task(task_id)?.degradation.clone();
    evaluate_with(&ModelRestorer::new(model, task_id)?, &kind, checkpoint_hash, eval_dir, settings)
}

/// [`evaluate`] with any restorer.
pub fn evaluate_with<R: Restorer + ?Sized>(
    restorer: &R,
    kind: &DegradationKind,
    checkpoint_hash: &str,
    eval_dir: &Path,
    settings: &EvalSettings,
) -> Result<EvalReport> {
    let mut skipped = Vec::new();
    let pairs = load_eval_pairs(eval_dir, kind, settings.eval_seed, &mut skipped)?;
    let scores = score_pairs(restorer, &pairs, settings, &mut skipped)?;
    if scores.is_empty() {
        return Err(Error::contract(format!("no usable evaluation pairs in {}", eval_dir.display())));
    }
    Ok(EvalReport::new(
        &kind.task_id(),
        &dataset_name(eval_dir),
        scores,
        checkpoint_hash,
        settings.clone(),
        skipped,
    ))
}

/// Nearest trained noise task for `sigma`; ties go to the lower level.
pub fn route_noise_task(model: &IptModel, sigma: f64) -> Result<String> {
    model
        .config
        .tasks
        .iter()
        .filter_map(|t| match t.degradation {
            DegradationKind::Noise { sigma: s } => Some((s, t.task_id.clone())),
            _ => None,
        })
        .min_by(|a, b| {
            (a.0 - sigma)
                .abs()
                .total_cmp(&(b.0 - sigma).abs())
                .then(a.0.total_cmp(&b.0))
        })
        .map(|(_, id)| id)
        .ok_or_else(|| Error::config("checkpoint has no noise task"))
}

/// Noise levels the model may not have seen, each served by the nearest
/// trained noise head and tail. Clean PNGs in `clean_dir` are corrupted with
/// the evaluation seed.
pub fn generalization_eval(
    model: &IptModel,
    checkpoint_hash: &str,
    sigmas: &[f64],
    clean_dir: &Path,
    settings: &EvalSettings,
) -> Result<Vec<EvalReport>> {
    sigmas
        .iter()
        .map(|&sigma| {
            let routed = route_noise_task(model, sigma)?;
            let kind = DegradationKind::Noise { sigma };
            kind.validate()?;
            let mut skipped = Vec::new();
            let pairs = synthesize_pairs(clean_dir, &kind, settings.eval_seed, &mut skipped)?;
            let restorer = ModelRestorer::new(model, &routed)?;
            let scores = score_pairs(&restorer, &pairs, settings, &mut skipped)?;
            if scores.is_empty() {
                return Err(Error::contract(format!("no usable images in {}", clean_dir.display())));
            }
            let mut s = settings.clone();
            if routed != kind.task_id() {
                s.routed_task = Some(routed);
            }
            Ok(EvalReport::new(
                &kind.task_id(),
                &dataset_name(clean_dir),
                scores,
                checkpoint_hash,
                s,
                skipped,
            ))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::degradations::{parse_task_list, synthesize_dataset, synthetic_scene};
    use crate::eval::IdentityRestorer;
    use crate::imaging::save_image;
    use crate::model::{ModelConfig, TaskSpec};

    fn clean_dir(n: usize, size: usize) -> tempfile::TempDir {
        let d = tempfile::tempdir().unwrap();
        for i in 0..n {
            save_image(&synthetic_scene(size, size + 4, i as u64), d.path().join(format!("c{i}.png"))).unwrap();
        }
        d
    }

    #[test]
    fn identity_reports_input_psnr() {
        let d = clean_dir(3, 60);
        let kind: DegradationKind = "noise30".parse().unwrap();
        let settings = EvalSettings::default();
        let r = evaluate_with(&IdentityRestorer, &kind, "", d.path(), &settings).unwrap();
        let pairs = synthesize_pairs(d.path(), &kind, 0, &mut vec![]).unwrap();
        for (s, p) in r.images.iter().zip(&pairs) {
            assert_eq!(s.psnr, psnr(&p.corrupted.clamped(), &p.clean).unwrap());
        }
        let mean = r.images.iter().map(|s| s.psnr).sum::<f64>() / 3.0;
        assert_eq!(r.mean_psnr, mean);
    }

    #[test]
    fn manifest_directories_are_used_when_present() {
        let src = clean_dir(2, 50);
        let out = tempfile::tempdir().unwrap();
        synthesize_dataset(src.path(), &parse_task_list("noise30").unwrap(), 4, out.path()).unwrap();
        let kind: DegradationKind = "noise30".parse().unwrap();
        let r = evaluate_with(&IdentityRestorer, &kind, "", out.path(), &EvalSettings::default()).unwrap();
        assert_eq!(r.images.len(), 2);
        assert!(r.mean_psnr > 15.0 && r.mean_psnr < 25.0);
    }

    #[test]
    fn sr_model_output_matches_clean_extent() {
        let d = clean_dir(1, 100);
        let cfg = ModelConfig::desk(vec![TaskSpec::new("sr2".parse().unwrap())]);
        let m = IptModel::new(cfg, 0).unwrap();
        let r = evaluate(&m, "", "sr2", d.path(), &EvalSettings::default()).unwrap();
        assert_eq!(r.images.len(), 1);
        assert!(r.skipped.is_empty());
    }

    #[test]
    fn nearest_sigma_routing() {
        let tasks = ["noise30", "noise50", "sr2"].iter().map(|t| TaskSpec::new(t.parse().unwrap())).collect();
        let m = IptModel::new(ModelConfig::desk(tasks), 0).unwrap();
        assert_eq!(route_noise_task(&m, 10.0).unwrap(), "noise30");
        assert_eq!(route_noise_task(&m, 40.0).unwrap(), "noise30");
        assert_eq!(route_noise_task(&m, 41.0).unwrap(), "noise50");
        assert_eq!(route_noise_task(&m, 70.0).unwrap(), "noise50");
        let only_sr = IptModel::new(ModelConfig::desk(vec![TaskSpec::new("sr2".parse().unwrap())]), 0).unwrap();
        assert!(route_noise_task(&only_sr, 10.0).is_err());
    }
}
