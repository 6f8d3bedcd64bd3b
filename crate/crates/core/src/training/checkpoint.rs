//! Binary checkpoint container.
//!
//! Layout: 8-byte magic, `u64` LE header length, UTF-8 JSON header, then the
//! tensor payloads as little-endian scalars in directory order.

use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::TrainConfig;
use crate::error::{Error, Result};
use crate::imaging::write_atomic;
use crate::model::{IptModel, ModelConfig};
use crate::numerics::{AdamHyper, AdamState, NamedTensors, Scalar, Tensor, DTYPE_NAME};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"IPTCKPT\0";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Position of a ChaCha8 stream.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    /// Stored as a decimal string: JSON numbers cannot hold a u128 exactly.
    #[serde(with = "u128_string")]
    pub word_pos: u128,
}

mod u128_string {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &u128, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&v.to_string())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<u128, D::Error> {
        String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
    }
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        RngState {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

/// Everything needed to resume or evaluate a run.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: IptModel,
    pub adam: AdamState,
    pub epoch: u64,
    pub step: u64,
    pub rng: RngState,
    pub manifest_hash: String,
    pub train_config: Option<TrainConfig>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    dtype: String,
    offset: u64,
    len: u64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    version: u32,
    model: ModelConfig,
    epoch: u64,
    step: u64,
    rng: RngState,
    manifest_hash: String,
    adam_hyper: AdamHyper,
    adam_step_count: u64,
    train_config: Option<TrainConfig>,
    tensors: Vec<TensorEntry>,
}

const SECTIONS: [&str; 3] = ["param", "adam_m", "adam_v"];

fn scalar_bytes() -> usize {
    std::mem::size_of::<Scalar>()
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let groups: [&NamedTensors; 3] = [&self.model.params, &self.adam.first_moment, &self.adam.second_moment];
        let mut tensors = Vec::new();
        let mut offset = 0u64;
        for (section, group) in SECTIONS.iter().zip(groups) {
            for (name, t) in group {
                let len = (t.len() * scalar_bytes()) as u64;
                tensors.push(TensorEntry {
                    name: format!("{section}/{name}"),
                    shape: t.shape().to_vec(),
                    dtype: DTYPE_NAME.to_string(),
                    offset,
                    len,
                });
                offset += len;
            }
        }
        let header = Header {
            version: CHECKPOINT_VERSION,
            model: self.model.config.clone(),
            epoch: self.epoch,
            step: self.step,
            rng: self.rng,
            manifest_hash: self.manifest_hash.clone(),
            adam_hyper: self.adam.hyper,
            adam_step_count: self.adam.step_count,
            train_config: self.train_config.clone(),
            tensors,
        };
        let json = serde_json::to_vec(&header).map_err(|e| Error::Format(e.to_string()))?;
        let mut out = Vec::with_capacity(16 + json.len() + offset as usize);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for group in groups {
            for t in group.values() {
                for v in t.data() {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let fmt = |m: String| Error::Format(format!("checkpoint: {m}"));
        if bytes.len() < 16 || &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(fmt("missing magic bytes".into()));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let body = bytes
            .get(16..16usize.checked_add(hlen).ok_or_else(|| fmt("header length overflow".into()))?)
            .ok_or_else(|| fmt(format!("truncated header ({hlen} bytes declared)")))?;
        let header: Header = serde_json::from_slice(body).map_err(|e| fmt(e.to_string()))?;
        if header.version != CHECKPOINT_VERSION {
            return Err(fmt(format!(
                "version {} is not supported (expected {CHECKPOINT_VERSION})",
                header.version
            )));
        }
        let payload = &bytes[16 + hlen..];
        let mut groups: [NamedTensors; 3] = Default::default();
        let mut end = 0u64;
        for e in &header.tensors {
            let width = match e.dtype.as_str() {
                "f64" => 8,
                "f32" => 4,
                other => return Err(fmt(format!("unknown dtype {other}"))),
            };
            let count: usize = e.shape.iter().product();
            if e.len != (count * width) as u64 {
                return Err(fmt(format!("{}: length {} does not match shape {:?}", e.name, e.len, e.shape)));
            }
            let start = e.offset as usize;
            let raw = payload
                .get(start..start + e.len as usize)
                .ok_or_else(|| fmt(format!("truncated payload at {}", e.name)))?;
            let data: Vec<Scalar> = if width == 8 {
                raw.chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")) as Scalar)
                    .collect()
            } else {
                raw.chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as Scalar)
                    .collect()
            };
            let (section, name) = e
                .name
                .split_once('/')
                .ok_or_else(|| fmt(format!("bad tensor name {}", e.name)))?;
            let idx = SECTIONS
                .iter()
                .position(|s| *s == section)
                .ok_or_else(|| fmt(format!("unknown section {section}")))?;
            groups[idx].insert(name.to_string(), Tensor::new(&e.shape, data)?);
            end = end.max(e.offset + e.len);
        }
        if payload.len() as u64 != end {
            return Err(fmt(format!("{} trailing payload bytes", payload.len() as u64 - end)));
        }
        let [params, first_moment, second_moment] = groups;
        let model = IptModel::from_parts(header.model, params)?;
        let adam = AdamState {
            first_moment,
            second_moment,
            step_count: header.adam_step_count,
            hyper: header.adam_hyper,
        };
        Ok(Checkpoint {
            model,
            adam,
            epoch: header.epoch,
            step: header.step,
            rng: header.rng,
            manifest_hash: header.manifest_hash,
            train_config: header.train_config,
        })
    }

    /// Number of model parameters (optimizer moments excluded).
    pub fn param_count(&self) -> usize {
        self.model.param_count()
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path.as_ref(), &ckpt.to_bytes()?)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes).map_err(|e| match e {
        Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
        other => other,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::degradations::rng_from_seed;
    use crate::model::TaskSpec;
    use rand::RngCore;

    fn sample() -> Checkpoint {
        let cfg = ModelConfig {
            channels: 4,
            patch: 2,
            encoder_layers: 1,
            decoder_layers: 1,
            num_heads: 2,
            crop: 8,
            ..ModelConfig::desk(vec![
                TaskSpec::new("noise30".parse().unwrap()),
                TaskSpec::new("sr2".parse().unwrap()),
            ])
        };
        let model = IptModel::new(cfg, 3).unwrap();
        let mut adam = AdamState::default();
        adam.step_count = 7;
        for (name, t) in model.params.iter().take(5) {
            adam.first_moment.insert(name.clone(), t.map(|v| v + 0.125));
            adam.second_moment.insert(name.clone(), t.map(|v| v * v));
        }
        let mut rng = rng_from_seed(5);
        rng.next_u64();
        Checkpoint {
            model,
            adam,
            epoch: 2,
            step: 40,
            rng: RngState::capture(&rng),
            manifest_hash: "abc".into(),
            train_config: Some(TrainConfig::default()),
        }
    }

    #[test]
    fn round_trip_is_byte_exact() {
        let c = sample();
        let bytes = c.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn rng_state_resumes_the_stream() {
        let mut rng = rng_from_seed(11);
        rng.next_u32();
        let mut resumed = RngState::capture(&rng).restore();
        for _ in 0..10 {
            assert_eq!(rng.next_u64(), resumed.next_u64());
        }
    }

    #[test]
    fn truncation_and_version_errors() {
        let bytes = sample().to_bytes().unwrap();
        for cut in [0, 7, 12, 40, bytes.len() - 1] {
            assert!(matches!(Checkpoint::from_bytes(&bytes[..cut]), Err(Error::Format(_))), "cut {cut}");
        }
        let text = String::from_utf8_lossy(&bytes[16..]).into_owned();
        let pos = text.find("\"version\":1").unwrap();
        let mut bumped = bytes.clone();
        bumped[16 + pos + 10] = b'9';
        let err = Checkpoint::from_bytes(&bumped).unwrap_err().to_string();
        assert!(err.contains("version 9"), "{err}");
    }

    #[test]
    fn files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.ckpt");
        let c = sample();
        save_checkpoint(&c, &p).unwrap();
        assert_eq!(load_checkpoint(&p).unwrap(), c);
        assert!(matches!(load_checkpoint(dir.path().join("missing")), Err(Error::Io { .. })));
    }
}
