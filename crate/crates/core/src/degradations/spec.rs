use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::bicubic::downsample;
use super::noise::add_gaussian_noise;
use super::rain::{add_rain_streaks, RainParams};
use crate::error::{Error, Result};
use crate::imaging::ImageBuffer;

/// One corruption family with its parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DegradationKind {
    /// Bicubic downsampling by `scale`.
    Sr { scale: usize },
    /// Additive Gaussian noise, sigma on the 0..255 scale.
    Noise { sigma: f64 },
    Rain(RainParams),
}

impl DegradationKind {
    pub fn validate(&self) -> Result<()> {
        match self {
            DegradationKind::Sr { scale } if !(2..=4).contains(scale) => {
                Err(Error::contract(format!("SR scale must be 2, 3 or 4, got {scale}")))
            }
            DegradationKind::Noise { sigma } if !(*sigma > 0.0 && sigma.is_finite()) => {
                Err(Error::contract(format!("noise sigma must be positive, got {sigma}")))
            }
            DegradationKind::Rain(p) => p.validate(),
            _ => Ok(()),
        }
    }

    /// Canonical task id: `sr2`, `noise30`, `rain`.
    pub fn task_id(&self) -> String {
        match self {
            DegradationKind::Sr { scale } => format!("sr{scale}"),
            DegradationKind::Noise { sigma } => {
                if sigma.fract() == 0.0 {
                    format!("noise{}", *sigma as i64)
                } else {
                    format!("noise{sigma}")
                }
            }
            DegradationKind::Rain(_) => "rain".to_string(),
        }
    }

    /// Ratio of restored to corrupted extents.
    pub fn output_scale(&self) -> usize {
        match self {
            DegradationKind::Sr { scale } => *scale,
            _ => 1,
        }
    }

    /// Applies the corruption. Noise is left unclamped; rain is clamped.
    pub fn apply(&self, clean: &ImageBuffer, seed: u64) -> Result<ImageBuffer> {
        self.validate()?;
        match self {
            DegradationKind::Sr { scale } => downsample(clean, *scale),
            DegradationKind::Noise { sigma } => add_gaussian_noise(clean, *sigma, seed),
            DegradationKind::Rain(p) => add_rain_streaks(clean, p, seed),
        }
    }
}

impl fmt::Display for DegradationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.task_id())
    }
}

impl FromStr for DegradationKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim().to_ascii_lowercase();
        let kind = if let Some(rest) = s.strip_prefix("sr") {
            let scale = rest
                .parse()
                .map_err(|_| Error::UnknownTask(s.clone()))?;
            DegradationKind::Sr { scale }
        } else if let Some(rest) = s.strip_prefix("noise") {
            let sigma = rest
                .parse()
                .map_err(|_| Error::UnknownTask(s.clone()))?;
            DegradationKind::Noise { sigma }
        } else if s == "rain" {
            DegradationKind::Rain(RainParams::default())
        } else {
            return Err(Error::UnknownTask(s));
        };
        kind.validate()?;
        Ok(kind)
    }
}

/// A corruption plus the seed that makes it reproducible.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DegradationSpec {
    pub kind: DegradationKind,
    pub seed: u64,
}

impl DegradationSpec {
    pub fn new(kind: DegradationKind, seed: u64) -> Result<Self> {
        kind.validate()?;
        Ok(DegradationSpec { kind, seed })
    }

    pub fn apply(&self, clean: &ImageBuffer) -> Result<ImageBuffer> {
        self.kind.apply(clean, self.seed)
    }
}

/// The six default pre-training tasks.
pub fn default_tasks() -> Vec<DegradationKind> {
    ["sr2", "sr3", "sr4", "noise30", "noise50", "rain"]
        .iter()
        .map(|s| s.parse().expect("built-in task ids parse"))
        .collect()
}

/// Parses a comma-separated task list such as `sr2,noise30,rain`.
pub fn parse_task_list(s: &str) -> Result<Vec<DegradationKind>> {
    let tasks: Vec<DegradationKind> = s
        .split(',')
        .filter(|t| !t.trim().is_empty())
        .map(str::parse)
        .collect::<Result<_>>()?;
    if tasks.is_empty() {
        return Err(Error::config("empty task list"));
    }
    Ok(tasks)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn task_ids_round_trip() {
        for t in default_tasks() {
            assert_eq!(t.task_id().parse::<DegradationKind>().unwrap(), t);
        }
        assert_eq!("noise10".parse::<DegradationKind>().unwrap(), DegradationKind::Noise { sigma: 10.0 });
    }

    #[test]
    fn invalid_ids_are_rejected() {
        assert!("sr5".parse::<DegradationKind>().is_err());
        assert!("noise0".parse::<DegradationKind>().is_err());
        assert!("blur".parse::<DegradationKind>().is_err());
        assert!(parse_task_list(",").is_err());
    }

    #[test]
    fn sr_output_is_floor_of_extent() {
        let img = ImageBuffer::filled(25, 31, 0.3);
        let out = DegradationKind::Sr { scale: 2 }.apply(&img, 0).unwrap();
        assert_eq!((out.height(), out.width()), (12, 15));
    }

    #[test]
    fn spec_serializes_with_kind_tag() {
        let spec = DegradationSpec::new(DegradationKind::Noise { sigma: 30.0 }, 5).unwrap();
        let json = serde_json::to_string(&spec).unwrap();
        assert!(json.contains("\"kind\":\"noise\""), "{json}");
        assert_eq!(serde_json::from_str::<DegradationSpec>(&json).unwrap(), spec);
    }
}
