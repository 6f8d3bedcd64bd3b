//! Oracles and fixtures shared by the integration tests.
#![allow(dead_code)]

use std::path::Path;

use ipt::degradations::{parse_task_list, synthesize_dataset, synthetic_scene, DatasetManifest, DegradationKind};
use ipt::imaging::save_image;
use ipt::model::{Bound, IptModel, ModelConfig, TaskSpec};
use ipt::numerics::{Scalar, Tape, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Central-difference step. Truncation error grows as h², roundoff in the
/// O(100) objective as ε·|f|/h; 1e-4 keeps both below ~1e-10.
pub const FD_STEP: Scalar = 1e-4;
/// Denominator floor for the relative error, so exact zeros compare absolutely.
pub const REL_FLOOR: f64 = 1e-6;

pub fn randn(shape: &[usize], seed: u64) -> Tensor {
    Tensor::randn(shape, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Worst relative error of one checked function.
#[derive(Debug, Clone)]
pub struct GradCheck {
    pub name: String,
    pub entries: usize,
    pub max_rel: f64,
}

/// Contracts the output of `f` against a fixed random tensor so every op is
/// checked through a scalar objective.
fn objective(out: &Tensor, seed: u64) -> f64 {
    let w = randn(out.shape(), seed);
    out.data().iter().zip(w.data()).map(|(a, b)| (a * b) as f64).sum()
}

/// Central differences of `f` with respect to every entry of every input,
/// compared with the tape's reverse-mode gradient.
pub fn check_fn<F>(name: &str, inputs: &[Tensor], f: F) -> GradCheck
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> ipt::Result<Var<'t>>,
{
    let seed = 0xfd;
    let tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&tape, &vars).unwrap();
    let w = tape.constant(randn(&out.shape(), seed));
    let grads = tape.backward(out.mul(&w).unwrap().sum()).unwrap();

    let eval = |xs: &[Tensor]| -> f64 {
        let t = Tape::inference();
        let v: Vec<Var> = xs.iter().map(|x| t.constant(x.clone())).collect();
        objective(&f(&t, &v).unwrap().value(), seed)
    };
    let mut xs = inputs.to_vec();
    let mut max_rel = 0.0f64;
    let mut entries = 0;
    for (k, v) in vars.iter().enumerate() {
        let zero = Tensor::zeros(inputs[k].shape());
        let g = grads.get(*v).unwrap_or(&zero).clone();
        for i in 0..inputs[k].len() {
            let orig = xs[k].data()[i];
            xs[k].data_mut()[i] = orig + FD_STEP;
            let up = eval(&xs);
            xs[k].data_mut()[i] = orig - FD_STEP;
            let down = eval(&xs);
            xs[k].data_mut()[i] = orig;
            let fd = (up - down) / (2.0 * FD_STEP as f64);
            max_rel = max_rel.max(rel_err(g.data()[i] as f64, fd));
            entries += 1;
        }
    }
    GradCheck { name: name.to_string(), entries, max_rel }
}

/// Central differences over every parameter entry of `model` for the
/// projected output of `task_id` on `x`.
pub fn check_model(model: &mut IptModel, x: &Tensor, task_id: &str) -> GradCheck {
    let seed = 0x1b7;
    let tape = Tape::new();
    let b = Bound::new(&tape, model);
    let y = model.forward(&b, &tape.constant(x.clone()), task_id).unwrap();
    let w = tape.constant(randn(&y.shape(), seed));
    let grads = b.gradients(&tape.backward(y.mul(&w).unwrap().sum()).unwrap());

    let names: Vec<String> = model.params.keys().cloned().collect();
    let mut max_rel = 0.0f64;
    let mut entries = 0;
    for name in names {
        let n = model.params[&name].len();
        for i in 0..n {
            let orig = model.params[&name].data()[i];
            model.params.get_mut(&name).unwrap().data_mut()[i] = orig + FD_STEP;
            let up = objective(&model.infer(x, task_id).unwrap(), seed);
            model.params.get_mut(&name).unwrap().data_mut()[i] = orig - FD_STEP;
            let down = objective(&model.infer(x, task_id).unwrap(), seed);
            model.params.get_mut(&name).unwrap().data_mut()[i] = orig;
            let fd = (up - down) / (2.0 * FD_STEP as f64);
            let an = grads.get(&name).map_or(0.0, |g| g.data()[i] as f64);
            max_rel = max_rel.max(rel_err(an, fd));
            entries += 1;
        }
    }
    GradCheck { name: format!("ipt[{task_id}]"), entries, max_rel }
}

pub fn task(id: &str) -> TaskSpec {
    TaskSpec::new(id.parse::<DegradationKind>().unwrap())
}

/// P=2, C=4, one encoder and one decoder layer, one head.
pub fn tiny_config(tasks: &[&str]) -> ModelConfig {
    ModelConfig {
        channels: 4,
        patch: 2,
        encoder_layers: 1,
        decoder_layers: 1,
        num_heads: 1,
        crop: 8,
        ..ModelConfig::desk(tasks.iter().map(|t| task(t)).collect())
    }
}

/// Writes `n` synthetic scenes and corrupts them for `tasks`.
pub fn scene_dataset(dir: &Path, n: u64, size: usize, tasks: &str, seed: u64) -> DatasetManifest {
    let clean = dir.join("clean_src");
    std::fs::create_dir_all(&clean).unwrap();
    for i in 0..n {
        save_image(&synthetic_scene(size, size, i), clean.join(format!("scene{i:02}.png"))).unwrap();
    }
    synthesize_dataset(&clean, &parse_task_list(tasks).unwrap(), seed, dir.join("data")).unwrap()
}

/// Direct triple loop over the contrastive objective: the mean over
/// `(j, i1, i2)` of `−log(exp(cos(f_j,i1, f_j,i2)) / Σ_{k≠j} exp(cos(f_j,i1, f_k,i2)))`.
pub fn contrastive_oracle(f: &Tensor) -> f64 {
    let s = f.shape();
    let (b, n, d) = (s[0], s[1], s[2]);
    let row = |j: usize, i: usize| &f.data()[(j * n + i) * d..(j * n + i + 1) * d];
    let cos = |a: &[Scalar], c: &[Scalar]| {
        let dot: f64 = a.iter().zip(c).map(|(x, y)| (x * y) as f64).sum();
        let na: f64 = a.iter().map(|x| (x * x) as f64).sum::<f64>().sqrt();
        let nc: f64 = c.iter().map(|x| (x * x) as f64).sum::<f64>().sqrt();
        dot / (na * nc)
    };
    let mut total = 0.0;
    for j in 0..b {
        for i1 in 0..n {
            for i2 in 0..n {
                let num = cos(row(j, i1), row(j, i2)).exp();
                let den: f64 = (0..b).filter(|&k| k != j).map(|k| cos(row(j, i1), row(k, i2)).exp()).sum();
                total -= (num / den).ln();
            }
        }
    }
    total / (b * n * n) as f64
}
