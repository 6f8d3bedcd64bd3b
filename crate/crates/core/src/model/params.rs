use crate::degradations::{derive_seed, rng_from_seed};
use crate::numerics::{NamedTensors, Scalar, Tensor};

use super::config::{HeadKind, ModelConfig, TaskSpec};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum Init {
    Zeros,
    Ones,
    Normal,
}

pub(crate) struct Slot {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

fn slot(out: &mut Vec<Slot>, name: String, shape: &[usize], init: Init) {
    out.push(Slot {
        name,
        shape: shape.to_vec(),
        init,
    });
}

fn conv(out: &mut Vec<Slot>, prefix: &str, cin: usize, cout: usize, k: usize) {
    slot(out, format!("{prefix}.weight"), &[cout, cin, k, k], Init::Normal);
    slot(out, format!("{prefix}.bias"), &[cout], Init::Zeros);
}

fn norm(out: &mut Vec<Slot>, prefix: &str, d: usize) {
    slot(out, format!("{prefix}.gamma"), &[d], Init::Ones);
    slot(out, format!("{prefix}.beta"), &[d], Init::Zeros);
}

fn attention(out: &mut Vec<Slot>, prefix: &str, d: usize) {
    for w in ["wq", "wk", "wv", "wo"] {
        slot(out, format!("{prefix}.{w}"), &[d, d], Init::Normal);
    }
}

fn ffn(out: &mut Vec<Slot>, prefix: &str, d: usize, h: usize) {
    slot(out, format!("{prefix}.w1"), &[d, h], Init::Normal);
    slot(out, format!("{prefix}.b1"), &[h], Init::Zeros);
    slot(out, format!("{prefix}.w2"), &[h, d], Init::Normal);
    slot(out, format!("{prefix}.b2"), &[d], Init::Zeros);
}

pub(crate) fn task_slots(cfg: &ModelConfig, task: &TaskSpec) -> Vec<Slot> {
    let mut out = Vec::new();
    let c = cfg.channels;
    let p = format!("task.{}", task.task_id);
    slot(&mut out, format!("{p}.embed"), &[cfg.token_dim()], Init::Normal);
    conv(&mut out, &format!("{p}.head.conv"), 3, c, 3);
    match cfg.head {
        HeadKind::ResBlocks => {
            for r in 0..2 {
                for i in 0..2 {
                    conv(&mut out, &format!("{p}.head.res{r}.conv{i}"), c, c, 5);
                }
            }
        }
        HeadKind::Simple3 => {
            for i in 1..3 {
                conv(&mut out, &format!("{p}.head.conv{i}"), c, c, 3);
            }
        }
    }
    match task.output_scale() {
        1 => conv(&mut out, &format!("{p}.tail.conv0"), c, 3, 3),
        4 => {
            conv(&mut out, &format!("{p}.tail.conv0"), c, 4 * c, 3);
            conv(&mut out, &format!("{p}.tail.conv1"), c, 4 * c, 3);
            conv(&mut out, &format!("{p}.tail.conv2"), c, 3, 3);
        }
        k => conv(&mut out, &format!("{p}.tail.conv0"), c, 3 * k * k, 3),
    }
    out
}

/// Every parameter the configuration defines.
pub(crate) fn layout(cfg: &ModelConfig) -> Vec<Slot> {
    let d = cfg.token_dim();
    let h = cfg.ffn_width();
    let mut out = Vec::new();
    slot(&mut out, "pos_embed".into(), &[cfg.max_tokens(), d], Init::Normal);
    for l in 0..cfg.encoder_layers {
        let p = format!("encoder.{l}");
        norm(&mut out, &format!("{p}.ln1"), d);
        attention(&mut out, &format!("{p}.attn"), d);
        norm(&mut out, &format!("{p}.ln2"), d);
        ffn(&mut out, &format!("{p}.ffn"), d, h);
    }
    for l in 0..cfg.decoder_layers {
        let p = format!("decoder.{l}");
        norm(&mut out, &format!("{p}.ln1"), d);
        attention(&mut out, &format!("{p}.attn1"), d);
        norm(&mut out, &format!("{p}.ln2"), d);
        norm(&mut out, &format!("{p}.ln_mem"), d);
        attention(&mut out, &format!("{p}.attn2"), d);
        norm(&mut out, &format!("{p}.ln3"), d);
        ffn(&mut out, &format!("{p}.ffn"), d, h);
    }
    for t in &cfg.tasks {
        out.extend(task_slots(cfg, t));
    }
    out
}

/// Draws every parameter. Each tensor has its own stream seeded from
/// `(seed, name)`, so adding or removing a task leaves the others unchanged.
pub(crate) fn initialize(cfg: &ModelConfig, seed: u64) -> NamedTensors {
    layout(cfg)
        .into_iter()
        .map(|s| {
            let t = match s.init {
                Init::Zeros => Tensor::zeros(&s.shape),
                Init::Ones => Tensor::ones(&s.shape),
                Init::Normal => {
                    let mut rng = rng_from_seed(derive_seed(seed, 0, &s.name));
                    Tensor::randn(&s.shape, cfg.init_std as Scalar, &mut rng)
                }
            };
            (s.name, t)
        })
        .collect()
}
