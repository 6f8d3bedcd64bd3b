use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::write_atomic;

/// `f64` that may be infinite; infinities are written as the strings
/// `"inf"` / `"-inf"` because JSON has no literal for them.
pub(crate) mod float_or_inf {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else if *v > 0.0 {
            s.serialize_str("inf")
        } else if *v < 0.0 {
            s.serialize_str("-inf")
        } else {
            s.serialize_str("nan")
        }
    }

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Text(String),
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Num(v) => Ok(v),
            Repr::Text(t) => match t.as_str() {
                "inf" => Ok(f64::INFINITY),
                "-inf" => Ok(f64::NEG_INFINITY),
                "nan" => Ok(f64::NAN),
                other => Err(serde::de::Error::custom(format!("bad float {other}"))),
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageScore {
    pub id: String,
    #[serde(with = "float_or_inf")]
    pub psnr: f64,
    pub ssim: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSettings {
    pub patch: usize,
    pub overlap: usize,
    pub self_ensemble: bool,
    pub eval_seed: u64,
    /// PSNR on 8-bit quantized images instead of floats.
    pub quantized_psnr: bool,
    /// Task whose head and tail produced the outputs, when it differs from
    /// the reported task (unseen noise levels).
    pub routed_task: Option<String>,
}

impl Default for EvalSettings {
    fn default() -> Self {
        EvalSettings {
            patch: crate::imaging::DEFAULT_PATCH,
            overlap: crate::imaging::DEFAULT_OVERLAP,
            self_ensemble: false,
            eval_seed: 0,
            quantized_psnr: false,
            routed_task: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub task_id: String,
    pub dataset: String,
    pub images: Vec<ImageScore>,
    #[serde(with = "float_or_inf")]
    pub mean_psnr: f64,
    pub mean_ssim: f64,
    pub checkpoint_hash: String,
    pub settings: EvalSettings,
    /// Inputs excluded from the aggregate, with the reason.
    pub skipped: Vec<String>,
}

impl EvalReport {
    /// Fills the aggregates from `images`.
    pub fn new(
        task_id: &str,
        dataset: &str,
        images: Vec<ImageScore>,
        checkpoint_hash: &str,
        settings: EvalSettings,
        skipped: Vec<String>,
    ) -> Self {
        let n = images.len().max(1) as f64;
        let (mean_psnr, mean_ssim) = if images.is_empty() {
            (f64::NAN, f64::NAN)
        } else {
            (
                images.iter().map(|s| s.psnr).sum::<f64>() / n,
                images.iter().map(|s| s.ssim).sum::<f64>() / n,
            )
        };
        EvalReport {
            task_id: task_id.to_string(),
            dataset: dataset.to_string(),
            images,
            mean_psnr,
            mean_ssim,
            checkpoint_hash: checkpoint_hash.to_string(),
            settings,
            skipped,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_json()?.as_bytes())
    }

    /// Aligned plain-text table: one row per image plus the mean.
    pub fn to_table(&self) -> String {
        let width = self
            .images
            .iter()
            .map(|s| s.id.len())
            .chain(["average".len(), "image".len()])
            .max()
            .unwrap_or(5);
        let mut out = String::new();
        let _ = writeln!(out, "task {} on {}", self.task_id, self.dataset);
        let _ = writeln!(out, "{:<width$}  {:>9}  {:>7}", "image", "PSNR(dB)", "SSIM");
        for s in &self.images {
            let _ = writeln!(out, "{:<width$}  {:>9.2}  {:>7.4}", s.id, s.psnr, s.ssim);
        }
        let _ = writeln!(out, "{:<width$}  {:>9.2}  {:>7.4}", "average", self.mean_psnr, self.mean_ssim);
        for s in &self.skipped {
            let _ = writeln!(out, "skipped: {s}");
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn infinite_psnr_survives_json() {
        let r = EvalReport::new(
            "noise30",
            "set",
            vec![
                ImageScore { id: "a".into(), psnr: f64::INFINITY, ssim: 1.0 },
                ImageScore { id: "b".into(), psnr: 30.0, ssim: 0.5 },
            ],
            "h",
            EvalSettings::default(),
            vec![],
        );
        assert_eq!(r.mean_psnr, f64::INFINITY);
        let back: EvalReport = serde_json::from_str(&r.to_json().unwrap()).unwrap();
        assert_eq!(back, r);
        assert!(r.to_table().contains("average"));
    }

    #[test]
    fn aggregates_are_means() {
        let r = EvalReport::new(
            "t",
            "d",
            vec![
                ImageScore { id: "a".into(), psnr: 20.0, ssim: 0.25 },
                ImageScore { id: "b".into(), psnr: 31.0, ssim: 0.75 },
            ],
            "",
            EvalSettings::default(),
            vec![],
        );
        assert_eq!(r.mean_psnr, 25.5);
        assert_eq!(r.mean_ssim, 0.5);
    }
}
