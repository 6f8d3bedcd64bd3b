use std::cell::RefCell;
use std::collections::BTreeMap;
use std::rc::Rc;

use super::config::{HeadKind, ModelConfig, TaskSpec};
use super::params::{initialize, task_slots};
use crate::error::{Error, Result};
use crate::numerics::{
    conv2d, layer_norm, linear, multi_head_attention, pixel_shuffle, AttentionWeights, Gradients, NamedTensors,
    Scalar, Tape, Tensor, Var,
};

/// Named parameters plus the configuration that shapes them.
#[derive(Clone, Debug, PartialEq)]
pub struct IptModel {
    pub config: ModelConfig,
    pub params: NamedTensors,
}

/// Parameters of one model placed on a tape. Each parameter becomes a leaf
/// the first time it is requested, so a backward pass only yields gradients
/// for the parameters the forward pass actually touched.
pub struct Bound<'t, 'm> {
    tape: &'t Tape,
    model: &'m IptModel,
    vars: RefCell<BTreeMap<String, Var<'t>>>,
}

impl<'t, 'm> Bound<'t, 'm> {
    pub fn new(tape: &'t Tape, model: &'m IptModel) -> Self {
        Bound {
            tape,
            model,
            vars: RefCell::new(BTreeMap::new()),
        }
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn model(&self) -> &'m IptModel {
        self.model
    }

    pub fn get(&self, name: &str) -> Result<Var<'t>> {
        if let Some(v) = self.vars.borrow().get(name) {
            return Ok(*v);
        }
        let t = self
            .model
            .params
            .get(name)
            .ok_or_else(|| Error::Format(format!("model has no parameter {name}")))?;
        let v = self.tape.param(t.clone());
        self.vars.borrow_mut().insert(name.to_string(), v);
        Ok(v)
    }

    /// Names bound so far, sorted.
    pub fn bound_names(&self) -> Vec<String> {
        self.vars.borrow().keys().cloned().collect()
    }

    /// Gradients of every bound parameter that the loss reached.
    pub fn gradients(&self, grads: &Gradients) -> NamedTensors {
        self.vars
            .borrow()
            .iter()
            .filter_map(|(n, v)| grads.get(*v).map(|g| (n.clone(), g.clone())))
            .collect()
    }

    fn conv(&self, x: &Var<'t>, prefix: &str, pad: usize) -> Result<Var<'t>> {
        let w = self.get(&format!("{prefix}.weight"))?;
        let b = self.get(&format!("{prefix}.bias"))?;
        conv2d(x, &w, Some(&b), 1, pad)
    }

    fn norm(&self, x: &Var<'t>, prefix: &str) -> Result<Var<'t>> {
        let g = self.get(&format!("{prefix}.gamma"))?;
        let b = self.get(&format!("{prefix}.beta"))?;
        layer_norm(x, &g, &b, self.model.config.ln_eps as Scalar)
    }

    fn attention(&self, prefix: &str) -> Result<AttentionWeights<'t>> {
        Ok(AttentionWeights {
            wq: self.get(&format!("{prefix}.wq"))?,
            wk: self.get(&format!("{prefix}.wk"))?,
            wv: self.get(&format!("{prefix}.wv"))?,
            wo: self.get(&format!("{prefix}.wo"))?,
        })
    }

    fn ffn(&self, x: &Var<'t>, prefix: &str) -> Result<Var<'t>> {
        let h = linear(
            x,
            &self.get(&format!("{prefix}.w1"))?,
            Some(&self.get(&format!("{prefix}.b1"))?),
        )?
        .relu();
        linear(
            &h,
            &self.get(&format!("{prefix}.w2"))?,
            Some(&self.get(&format!("{prefix}.b2"))?),
        )
    }
}

/// `[B, C, H, W] → [B, N, P²·C]`: P×P blocks in raster order, each flattened
/// as (channel, row, column).
pub fn patchify<'t>(f: &Var<'t>, p: usize) -> Result<Var<'t>> {
    let s = f.shape();
    if s.len() != 4 || p == 0 || s[2] % p != 0 || s[3] % p != 0 {
        return Err(Error::dim(format!("patchify: extents of {s:?} not divisible by {p}")));
    }
    let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
    let (gh, gw) = (h / p, w / p);
    let d = p * p * c;
    let mut index = Vec::with_capacity(b * c * h * w);
    for bi in 0..b {
        for pr in 0..gh {
            for pc in 0..gw {
                for ci in 0..c {
                    for i in 0..p {
                        for j in 0..p {
                            index.push(((bi * c + ci) * h + pr * p + i) * w + pc * p + j);
                        }
                    }
                }
            }
        }
    }
    f.gather(&[b, gh * gw, d], Rc::from(index))
}

/// Inverse of [`patchify`] for a feature map of `channels × h × w`.
pub fn depatchify<'t>(tokens: &Var<'t>, channels: usize, p: usize, h: usize, w: usize) -> Result<Var<'t>> {
    let s = tokens.shape();
    let d = p * p * channels;
    if s.len() != 3 || p == 0 || h % p != 0 || w % p != 0 || s[1] != (h / p) * (w / p) || s[2] != d {
        return Err(Error::dim(format!(
            "depatchify: tokens {s:?} do not tile {channels}x{h}x{w} with patch {p}"
        )));
    }
    let (b, gw, n) = (s[0], w / p, s[1]);
    let mut index = Vec::with_capacity(b * channels * h * w);
    for bi in 0..b {
        for ci in 0..channels {
            for y in 0..h {
                for x in 0..w {
                    let tok = (y / p) * gw + x / p;
                    let e = ci * p * p + (y % p) * p + x % p;
                    index.push((bi * n + tok) * d + e);
                }
            }
        }
    }
    tokens.gather(&[b, channels, h, w], Rc::from(index))
}

impl IptModel {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let params = initialize(&config, seed);
        Ok(IptModel { config, params })
    }

    pub fn from_parts(config: ModelConfig, params: NamedTensors) -> Result<Self> {
        config.validate()?;
        let expected = super::params::layout(&config);
        if expected.len() != params.len() {
            return Err(Error::Format(format!(
                "expected {} parameter tensors, found {}",
                expected.len(),
                params.len()
            )));
        }
        for slot in expected {
            match params.get(&slot.name) {
                Some(t) if t.shape() == slot.shape.as_slice() => {}
                Some(t) => {
                    return Err(Error::Format(format!(
                        "parameter {} has shape {:?}, expected {:?}",
                        slot.name,
                        t.shape(),
                        slot.shape
                    )))
                }
                None => return Err(Error::Format(format!("parameter {} missing", slot.name))),
            }
        }
        Ok(IptModel { config, params })
    }

    /// Total scalar parameter count of the constructed tensors.
    pub fn param_count(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    pub fn task(&self, task_id: &str) -> Result<&TaskSpec> {
        self.config.task(task_id)
    }

    /// Names of parameters owned by one task.
    pub fn task_param_names(&self, task_id: &str) -> Result<Vec<String>> {
        let t = self.task(task_id)?;
        Ok(task_slots(&self.config, t).into_iter().map(|s| s.name).collect())
    }

    /// Copy that keeps only `task_id`'s head, tail and embedding.
    pub fn retain_task(&self, task_id: &str) -> Result<IptModel> {
        let keep = self.task(task_id)?.clone();
        let mut config = self.config.clone();
        config.tasks = vec![keep];
        let mut params = self.params.clone();
        for other in self.config.tasks.iter().filter(|t| t.task_id != task_id) {
            for s in task_slots(&self.config, other) {
                params.remove(&s.name);
            }
        }
        IptModel::from_parts(config, params)
    }

    /// `[B, 3, H, W] → [B, C, H, W]`.
    pub fn head_forward<'t>(&self, b: &Bound<'t, '_>, x: &Var<'t>, task_id: &str) -> Result<Var<'t>> {
        self.task(task_id)?;
        let p = format!("task.{task_id}.head");
        let f = b.conv(x, &format!("{p}.conv"), 1)?;
        match self.config.head {
            HeadKind::ResBlocks => {
                let mut f = f;
                for r in 0..2 {
                    let h = b.conv(&f, &format!("{p}.res{r}.conv0"), 2)?.relu();
                    let h = b.conv(&h, &format!("{p}.res{r}.conv1"), 2)?;
                    f = f.add(&h)?;
                }
                Ok(f)
            }
            HeadKind::Simple3 => {
                let f = b.conv(&f.relu(), &format!("{p}.conv1"), 1)?;
                b.conv(&f.relu(), &format!("{p}.conv2"), 1)
            }
        }
    }

    /// Position embeddings for a `gh × gw` token grid, taken from the top-left
    /// corner of the full table.
    fn position_rows<'t>(&self, b: &Bound<'t, '_>, gh: usize, gw: usize) -> Result<Var<'t>> {
        let g = self.config.grid();
        if gh > g || gw > g {
            return Err(Error::config(format!(
                "token grid {gh}x{gw} exceeds the position table {g}x{g}"
            )));
        }
        let d = self.config.token_dim();
        let mut index = Vec::with_capacity(gh * gw * d);
        for r in 0..gh {
            for c in 0..gw {
                let row = r * g + c;
                index.extend(row * d..(row + 1) * d);
            }
        }
        b.get("pos_embed")?.gather(&[gh * gw, d], Rc::from(index))
    }

    /// Pre-norm encoder over `[B, gh·gw, d]` tokens, after adding position embeddings.
    pub fn encoder_forward<'t>(
        &self,
        b: &Bound<'t, '_>,
        tokens: &Var<'t>,
        gh: usize,
        gw: usize,
    ) -> Result<Var<'t>> {
        let s = tokens.shape();
        if s.len() != 3 || s[1] != gh * gw || s[2] != self.config.token_dim() {
            return Err(Error::dim(format!(
                "encoder: tokens {s:?} do not match a {gh}x{gw} grid of width {}",
                self.config.token_dim()
            )));
        }
        let heads = self.config.num_heads;
        let mut y = tokens.add(&self.position_rows(b, gh, gw)?)?;
        for l in 0..self.config.encoder_layers {
            let p = format!("encoder.{l}");
            let n = b.norm(&y, &format!("{p}.ln1"))?;
            y = y.add(&multi_head_attention(&n, &n, &n, &b.attention(&format!("{p}.attn"))?, heads)?)?;
            let n = b.norm(&y, &format!("{p}.ln2"))?;
            y = y.add(&b.ffn(&n, &format!("{p}.ffn"))?)?;
        }
        Ok(y)
    }

    /// Decoder conditioned on the task embedding, which is added to the
    /// queries and keys of the self-attention and to the queries of the
    /// attention over the encoder output.
    pub fn decoder_forward<'t>(&self, b: &Bound<'t, '_>, enc_out: &Var<'t>, task_id: &str) -> Result<Var<'t>> {
        self.task(task_id)?;
        let heads = self.config.num_heads;
        let et = b.get(&format!("task.{task_id}.embed"))?;
        let mut z = *enc_out;
        for l in 0..self.config.decoder_layers {
            let p = format!("decoder.{l}");
            let n = b.norm(&z, &format!("{p}.ln1"))?;
            let qk = n.add(&et)?;
            z = z.add(&multi_head_attention(&qk, &qk, &n, &b.attention(&format!("{p}.attn1"))?, heads)?)?;
            let n = b.norm(&z, &format!("{p}.ln2"))?;
            let q = n.add(&et)?;
            let mem = b.norm(enc_out, &format!("{p}.ln_mem"))?;
            z = z.add(&multi_head_attention(&q, &mem, &mem, &b.attention(&format!("{p}.attn2"))?, heads)?)?;
            let n = b.norm(&z, &format!("{p}.ln3"))?;
            z = z.add(&b.ffn(&n, &format!("{p}.ffn"))?)?;
        }
        Ok(z)
    }

    /// `[B, C, H, W] → [B, 3, kH, kW]`.
    pub fn tail_forward<'t>(&self, b: &Bound<'t, '_>, f: &Var<'t>, task_id: &str) -> Result<Var<'t>> {
        let k = self.task(task_id)?.output_scale();
        let p = format!("task.{task_id}.tail");
        match k {
            1 => b.conv(f, &format!("{p}.conv0"), 1),
            4 => {
                let f = pixel_shuffle(&b.conv(f, &format!("{p}.conv0"), 1)?, 2)?;
                let f = pixel_shuffle(&b.conv(&f, &format!("{p}.conv1"), 1)?, 2)?;
                b.conv(&f, &format!("{p}.conv2"), 1)
            }
            k => pixel_shuffle(&b.conv(f, &format!("{p}.conv0"), 1)?, k),
        }
    }

    /// Restored image and the decoder tokens `[B, N, d]`.
    pub fn forward_with_features<'t>(
        &self,
        b: &Bound<'t, '_>,
        x: &Var<'t>,
        task_id: &str,
    ) -> Result<(Var<'t>, Var<'t>)> {
        let s = x.shape();
        let p = self.config.patch;
        if s.len() != 4 || s[1] != 3 {
            return Err(Error::dim(format!("model input must be [B,3,H,W], got {s:?}")));
        }
        if s[2] % p != 0 || s[3] % p != 0 {
            return Err(Error::dim(format!("input extents {}x{} not divisible by patch {p}", s[2], s[3])));
        }
        let (h, w) = (s[2], s[3]);
        let f = self.head_forward(b, x, task_id)?;
        let tokens = patchify(&f, p)?;
        let enc = self.encoder_forward(b, &tokens, h / p, w / p)?;
        let dec = self.decoder_forward(b, &enc, task_id)?;
        let fd = depatchify(&dec, self.config.channels, p, h, w)?;
        Ok((self.tail_forward(b, &fd, task_id)?, dec))
    }

    pub fn forward<'t>(&self, b: &Bound<'t, '_>, x: &Var<'t>, task_id: &str) -> Result<Var<'t>> {
        Ok(self.forward_with_features(b, x, task_id)?.0)
    }

    /// Forward pass on a value-only tape.
    pub fn infer(&self, x: &Tensor, task_id: &str) -> Result<Tensor> {
        let tape = Tape::inference();
        let b = Bound::new(&tape, self);
        let xv = tape.constant(x.clone());
        let y = self.forward(&b, &xv, task_id)?;
        let out = (*y.value()).clone();
        Ok(out)
    }
}
