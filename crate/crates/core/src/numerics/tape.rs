//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Tape`] records every operation applied to its [`Var`] handles. Calling
//! [`Tape::backward`] on a scalar walks the record in reverse and returns a
//! [`Gradients`] table. A tape built with [`Tape::inference`] stores values
//! only: no backward records, no gradient buffers.

use std::cell::RefCell;
use std::fmt;
use std::rc::Rc;

use super::kernels::{col2im, gemm, im2col, ConvGeom, MatView};
use super::tensor::{numel, Scalar, Tensor};
use crate::error::{Error, Result};
use crate::parallel::par_map_range;

pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    recording: bool,
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
    requires_grad: bool,
}

enum Op {
    Leaf,
    Add { a: usize, b: usize },
    Sub { a: usize, b: usize },
    Mul { a: usize, b: usize },
    Scale { a: usize, c: Scalar },
    MatMul { a: usize, b: usize, shared_b: bool },
    Conv2d {
        x: usize,
        w: usize,
        bias: Option<usize>,
        geom: ConvGeom,
        batch: usize,
        cout: usize,
    },
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Vec<Scalar>,
        rstd: Vec<Scalar>,
    },
    Softmax { x: usize },
    LogSumExp { x: usize, probs: Vec<Scalar> },
    Relu { x: usize },
    Abs { x: usize },
    Gather { x: usize, index: Rc<[usize]> },
    Reshape { x: usize },
    Sum { x: usize },
    Mean { x: usize },
    L2Normalize { x: usize, norms: Vec<Scalar> },
}

impl Op {
    fn parents(&self) -> Vec<usize> {
        match self {
            Op::Leaf => vec![],
            Op::Add { a, b } | Op::Sub { a, b } | Op::Mul { a, b } | Op::MatMul { a, b, .. } => {
                vec![*a, *b]
            }
            Op::Conv2d { x, w, bias, .. } => {
                let mut p = vec![*x, *w];
                p.extend(bias);
                p
            }
            Op::LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::Scale { a: x, .. }
            | Op::Softmax { x }
            | Op::LogSumExp { x, .. }
            | Op::Relu { x }
            | Op::Abs { x }
            | Op::Gather { x, .. }
            | Op::Reshape { x }
            | Op::Sum { x }
            | Op::Mean { x }
            | Op::L2Normalize { x, .. } => vec![*x],
        }
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.value().shape())
    }
}

/// Gradients produced by one backward pass, indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the loss w.r.t. `v`; `None` when `v` is unreachable or constant.
    pub fn get(&self, v: Var<'_>) -> Option<&Tensor> {
        self.grads.get(v.id).and_then(Option::as_ref)
    }
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    /// A recording tape: parameters added with [`Tape::param`] receive gradients.
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
            recording: true,
        }
    }

    /// A value-only tape for forward passes that never call `backward`.
    pub fn inference() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
            recording: false,
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Differentiable leaf.
    pub fn param(&self, t: Tensor) -> Var<'_> {
        self.push_leaf(t, self.recording)
    }

    /// Non-differentiable leaf.
    pub fn constant(&self, t: Tensor) -> Var<'_> {
        self.push_leaf(t, false)
    }

    fn push_leaf(&self, t: Tensor, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(t),
            op: Op::Leaf,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn push(&self, value: Tensor, op: Op) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        let requires_grad =
            self.recording && op.parents().iter().any(|&p| nodes[p].requires_grad);
        nodes.push(Node {
            value: Rc::new(value),
            op: if requires_grad { op } else { Op::Leaf },
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn value_of(&self, id: usize) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    /// Reverse-mode accumulation from a scalar `loss`.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        if !self.recording {
            return Err(Error::contract("backward on an inference tape"));
        }
        let nodes = self.nodes.borrow();
        if nodes[loss.id].value.len() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                nodes[loss.id].value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..nodes.len()).map(|_| None).collect();
        if !nodes[loss.id].requires_grad {
            return Ok(Gradients { grads });
        }
        grads[loss.id] = Some(Tensor::ones(nodes[loss.id].value.shape()));
        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            backprop_node(&nodes, node, &g, &mut grads);
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }
}

fn accumulate(nodes: &[Node], grads: &mut [Option<Tensor>], id: usize, g: Tensor) {
    if !nodes[id].requires_grad {
        return;
    }
    match &mut grads[id] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn backprop_node(nodes: &[Node], node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
    let val = |id: usize| -> &Tensor { &nodes[id].value };
    match &node.op {
        Op::Leaf => {}
        Op::Add { a, b } => {
            accumulate(nodes, grads, *a, g.clone());
            if nodes[*b].requires_grad {
                let gb = reduce_to_suffix(g, val(*b).shape());
                accumulate(nodes, grads, *b, gb);
            }
        }
        Op::Sub { a, b } => {
            accumulate(nodes, grads, *a, g.clone());
            if nodes[*b].requires_grad {
                let gb = reduce_to_suffix(g, val(*b).shape()).map(|v| -v);
                accumulate(nodes, grads, *b, gb);
            }
        }
        Op::Mul { a, b } => {
            let (va, vb) = (val(*a), val(*b));
            if nodes[*a].requires_grad {
                let d = g.data().iter().zip(vb.data()).map(|(g, b)| g * b).collect();
                accumulate(nodes, grads, *a, Tensor::new(va.shape(), d).unwrap());
            }
            if nodes[*b].requires_grad {
                let d = g.data().iter().zip(va.data()).map(|(g, a)| g * a).collect();
                accumulate(nodes, grads, *b, Tensor::new(vb.shape(), d).unwrap());
            }
        }
        Op::Scale { a, c } => accumulate(nodes, grads, *a, g.map(|v| v * c)),
        Op::MatMul { a, b, shared_b } => {
            let (va, vb) = (val(*a), val(*b));
            let (m, k, n, batch) = matmul_dims(va.shape(), vb.shape());
            if nodes[*a].requires_grad {
                let mut ga = vec![0.0; va.len()];
                for i in 0..batch {
                    let gi = MatView::row_major(&g.data()[i * m * n..(i + 1) * m * n], m, n);
                    let boff = if *shared_b { 0 } else { i * k * n };
                    let bi = MatView::row_major(&vb.data()[boff..boff + k * n], k, n);
                    gemm(gi, bi.t(), &mut ga[i * m * k..(i + 1) * m * k], 0.0);
                }
                accumulate(nodes, grads, *a, Tensor::new(va.shape(), ga).unwrap());
            }
            if nodes[*b].requires_grad {
                let mut gb = vec![0.0; vb.len()];
                for i in 0..batch {
                    let gi = MatView::row_major(&g.data()[i * m * n..(i + 1) * m * n], m, n);
                    let ai = MatView::row_major(&va.data()[i * m * k..(i + 1) * m * k], m, k);
                    if *shared_b {
                        gemm(ai.t(), gi, &mut gb, if i == 0 { 0.0 } else { 1.0 });
                    } else {
                        gemm(ai.t(), gi, &mut gb[i * k * n..(i + 1) * k * n], 0.0);
                    }
                }
                accumulate(nodes, grads, *b, Tensor::new(vb.shape(), gb).unwrap());
            }
        }
        Op::Conv2d {
            x,
            w,
            bias,
            geom,
            batch,
            cout,
        } => {
            let (vx, vw) = (val(*x), val(*w));
            let need_x = nodes[*x].requires_grad;
            let need_w = nodes[*w].requires_grad;
            let in_sz = geom.cin * geom.h * geom.w;
            let out_sz = cout * geom.col_cols();
            let kk = geom.col_rows();
            let per_sample = par_map_range(*batch, |bi| {
                let gb = MatView::row_major(&g.data()[bi * out_sz..(bi + 1) * out_sz], *cout, geom.col_cols());
                let gw = need_w.then(|| {
                    let mut cols = vec![0.0; kk * geom.col_cols()];
                    im2col(&vx.data()[bi * in_sz..(bi + 1) * in_sz], geom, &mut cols);
                    let mut gw = vec![0.0; cout * kk];
                    gemm(gb, MatView::row_major(&cols, kk, geom.col_cols()).t(), &mut gw, 0.0);
                    gw
                });
                let gx = need_x.then(|| {
                    let mut dcols = vec![0.0; kk * geom.col_cols()];
                    gemm(MatView::row_major(vw.data(), *cout, kk).t(), gb, &mut dcols, 0.0);
                    let mut gx = vec![0.0; in_sz];
                    col2im(&dcols, geom, &mut gx);
                    gx
                });
                (gw, gx)
            });
            if need_x {
                let mut gx = Vec::with_capacity(vx.len());
                for (_, s) in &per_sample {
                    gx.extend_from_slice(s.as_ref().unwrap());
                }
                accumulate(nodes, grads, *x, Tensor::new(vx.shape(), gx).unwrap());
            }
            if need_w {
                let mut gw = vec![0.0; vw.len()];
                for (s, _) in &per_sample {
                    for (a, b) in gw.iter_mut().zip(s.as_ref().unwrap()) {
                        *a += b;
                    }
                }
                accumulate(nodes, grads, *w, Tensor::new(vw.shape(), gw).unwrap());
            }
            if let Some(bias) = bias {
                if nodes[*bias].requires_grad {
                    let hw = geom.col_cols();
                    let mut gbias = vec![0.0; *cout];
                    for bi in 0..*batch {
                        for (co, gbv) in gbias.iter_mut().enumerate() {
                            let off = bi * out_sz + co * hw;
                            *gbv += g.data()[off..off + hw].iter().sum::<Scalar>();
                        }
                    }
                    accumulate(nodes, grads, *bias, Tensor::new(&[*cout], gbias).unwrap());
                }
            }
        }
        Op::LayerNorm {
            x,
            gamma,
            beta,
            xhat,
            rstd,
        } => {
            let vg = val(*gamma);
            let d = vg.len();
            let rows = xhat.len() / d;
            if nodes[*gamma].requires_grad || nodes[*beta].requires_grad {
                let mut gg = vec![0.0; d];
                let mut gbeta = vec![0.0; d];
                for r in 0..rows {
                    for j in 0..d {
                        let gv = g.data()[r * d + j];
                        gg[j] += gv * xhat[r * d + j];
                        gbeta[j] += gv;
                    }
                }
                accumulate(nodes, grads, *gamma, Tensor::new(&[d], gg).unwrap());
                accumulate(nodes, grads, *beta, Tensor::new(&[d], gbeta).unwrap());
            }
            if nodes[*x].requires_grad {
                let mut gx = vec![0.0; xhat.len()];
                for r in 0..rows {
                    let gr = &g.data()[r * d..(r + 1) * d];
                    let xr = &xhat[r * d..(r + 1) * d];
                    let mut mean_gh = 0.0;
                    let mut mean_ghx = 0.0;
                    for j in 0..d {
                        let gh = gr[j] * vg.data()[j];
                        mean_gh += gh;
                        mean_ghx += gh * xr[j];
                    }
                    mean_gh /= d as Scalar;
                    mean_ghx /= d as Scalar;
                    for j in 0..d {
                        let gh = gr[j] * vg.data()[j];
                        gx[r * d + j] = rstd[r] * (gh - mean_gh - xr[j] * mean_ghx);
                    }
                }
                accumulate(nodes, grads, *x, Tensor::new(val(*x).shape(), gx).unwrap());
            }
        }
        Op::Softmax { x } => {
            let y = &node.value;
            let n = *y.shape().last().unwrap();
            let mut gx = vec![0.0; y.len()];
            for ((gr, yr), out) in g
                .data()
                .chunks(n)
                .zip(y.data().chunks(n))
                .zip(gx.chunks_mut(n))
            {
                let dot: Scalar = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                for j in 0..n {
                    out[j] = yr[j] * (gr[j] - dot);
                }
            }
            accumulate(nodes, grads, *x, Tensor::new(y.shape(), gx).unwrap());
        }
        Op::LogSumExp { x, probs } => {
            let vx = val(*x);
            let n = *vx.shape().last().unwrap();
            let gx = probs
                .iter()
                .enumerate()
                .map(|(i, p)| p * g.data()[i / n])
                .collect();
            accumulate(nodes, grads, *x, Tensor::new(vx.shape(), gx).unwrap());
        }
        Op::Relu { x } => {
            let vx = val(*x);
            let gx = g
                .data()
                .iter()
                .zip(vx.data())
                .map(|(g, x)| if *x > 0.0 { *g } else { 0.0 })
                .collect();
            accumulate(nodes, grads, *x, Tensor::new(vx.shape(), gx).unwrap());
        }
        Op::Abs { x } => {
            let vx = val(*x);
            let gx = g
                .data()
                .iter()
                .zip(vx.data())
                .map(|(g, x)| {
                    if *x > 0.0 {
                        *g
                    } else if *x < 0.0 {
                        -*g
                    } else {
                        0.0
                    }
                })
                .collect();
            accumulate(nodes, grads, *x, Tensor::new(vx.shape(), gx).unwrap());
        }
        Op::Gather { x, index } => {
            let vx = val(*x);
            let mut gx = vec![0.0; vx.len()];
            for (gv, &src) in g.data().iter().zip(index.iter()) {
                gx[src] += gv;
            }
            accumulate(nodes, grads, *x, Tensor::new(vx.shape(), gx).unwrap());
        }
        Op::Reshape { x } => {
            accumulate(nodes, grads, *x, g.reshape(val(*x).shape()).unwrap());
        }
        Op::Sum { x } => accumulate(nodes, grads, *x, Tensor::full(val(*x).shape(), g.item())),
        Op::Mean { x } => {
            let vx = val(*x);
            accumulate(nodes, grads, *x, Tensor::full(vx.shape(), g.item() / vx.len() as Scalar));
        }
        Op::L2Normalize { x, norms } => {
            let y = &node.value;
            let n = *y.shape().last().unwrap();
            let mut gx = vec![0.0; y.len()];
            for (r, ((gr, yr), out)) in g
                .data()
                .chunks(n)
                .zip(y.data().chunks(n))
                .zip(gx.chunks_mut(n))
                .enumerate()
            {
                let dot: Scalar = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                for j in 0..n {
                    out[j] = (gr[j] - yr[j] * dot) / norms[r];
                }
            }
            accumulate(nodes, grads, *x, Tensor::new(y.shape(), gx).unwrap());
        }
    }
}

/// Sums `g` over its leading axes so it matches `suffix` (a trailing sub-shape of `g`).
fn reduce_to_suffix(g: &Tensor, suffix: &[usize]) -> Tensor {
    let n = numel(suffix);
    if n == g.len() {
        return g.reshape(suffix).unwrap();
    }
    let mut out = vec![0.0; n];
    for chunk in g.data().chunks(n) {
        for (o, v) in out.iter_mut().zip(chunk) {
            *o += v;
        }
    }
    Tensor::new(suffix, out).unwrap()
}

/// `(m, k, n, batch)` for a validated matmul.
fn matmul_dims(a: &[usize], b: &[usize]) -> (usize, usize, usize, usize) {
    let m = a[a.len() - 2];
    let k = a[a.len() - 1];
    let n = b[b.len() - 1];
    let batch = numel(&a[..a.len() - 2]);
    (m, k, n, batch)
}

fn same_shape(op: &str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::dim(format!(
            "{op}: shapes {:?} and {:?} differ",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

fn suffix_compatible(op: &str, a: &Tensor, b: &Tensor) -> Result<()> {
    let (sa, sb) = (a.shape(), b.shape());
    if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
        return Err(Error::dim(format!(
            "{op}: shape {sb:?} does not broadcast onto {sa:?}"
        )));
    }
    Ok(())
}

fn last_axis(op: &str, t: &Tensor) -> Result<usize> {
    match t.shape().last() {
        Some(&n) if n > 0 => Ok(n),
        _ => Err(Error::dim(format!("{op}: needs a non-empty last axis, got {:?}", t.shape()))),
    }
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.tape.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    fn same_tape(&self, other: &Var<'t>) {
        assert!(std::ptr::eq(self.tape, other.tape), "vars from different tapes");
    }

    /// `self + other`, where `other`'s shape may be a trailing suffix of `self`'s.
    pub fn add(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.same_tape(other);
        let (a, b) = (self.value(), other.value());
        suffix_compatible("add", &a, &b)?;
        let n = b.len();
        let data = a
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v + b.data()[i % n])
            .collect();
        Ok(self.tape.push(
            Tensor::new(a.shape(), data)?,
            Op::Add {
                a: self.id,
                b: other.id,
            },
        ))
    }

    pub fn sub(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.same_tape(other);
        let (a, b) = (self.value(), other.value());
        suffix_compatible("sub", &a, &b)?;
        let n = b.len();
        let data = a
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v - b.data()[i % n])
            .collect();
        Ok(self.tape.push(
            Tensor::new(a.shape(), data)?,
            Op::Sub {
                a: self.id,
                b: other.id,
            },
        ))
    }

    /// Elementwise product of equal shapes.
    pub fn mul(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.same_tape(other);
        let (a, b) = (self.value(), other.value());
        same_shape("mul", &a, &b)?;
        let data = a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect();
        Ok(self.tape.push(
            Tensor::new(a.shape(), data)?,
            Op::Mul {
                a: self.id,
                b: other.id,
            },
        ))
    }

    pub fn scale(&self, c: Scalar) -> Var<'t> {
        let t = self.value().map(|v| v * c);
        self.tape.push(t, Op::Scale { a: self.id, c })
    }

    /// Matrix product over the last two axes.
    ///
    /// `other` is either a plain `[k, n]` matrix shared across `self`'s batch
    /// prefix, or carries the same batch prefix as `self`.
    pub fn matmul(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.same_tape(other);
        let (a, b) = (self.value(), other.value());
        let (sa, sb) = (a.shape(), b.shape());
        let err = || Error::dim(format!("matmul: incompatible shapes {sa:?} and {sb:?}"));
        if sa.len() < 2 || sb.len() < 2 || sa[sa.len() - 1] != sb[sb.len() - 2] {
            return Err(err());
        }
        let shared_b = sb.len() == 2;
        if !shared_b && sa[..sa.len() - 2] != sb[..sb.len() - 2] {
            return Err(err());
        }
        let (m, k, n, batch) = matmul_dims(sa, sb);
        let mut out = vec![0.0; batch * m * n];
        for i in 0..batch {
            let ai = MatView::row_major(&a.data()[i * m * k..(i + 1) * m * k], m, k);
            let boff = if shared_b { 0 } else { i * k * n };
            let bi = MatView::row_major(&b.data()[boff..boff + k * n], k, n);
            gemm(ai, bi, &mut out[i * m * n..(i + 1) * m * n], 0.0);
        }
        let mut shape = sa[..sa.len() - 2].to_vec();
        shape.extend([m, n]);
        Ok(self.tape.push(
            Tensor::new(&shape, out)?,
            Op::MatMul {
                a: self.id,
                b: other.id,
                shared_b,
            },
        ))
    }

    pub fn relu(&self) -> Var<'t> {
        let t = self.value().map(|v| v.max(0.0));
        self.tape.push(t, Op::Relu { x: self.id })
    }

    pub fn abs(&self) -> Var<'t> {
        let t = self.value().map(Scalar::abs);
        self.tape.push(t, Op::Abs { x: self.id })
    }

    /// Softmax over the last axis with max subtraction.
    pub fn softmax(&self) -> Result<Var<'t>> {
        let x = self.value();
        let n = last_axis("softmax", &x)?;
        let mut out = vec![0.0; x.len()];
        for (row, o) in x.data().chunks(n).zip(out.chunks_mut(n)) {
            let m = row.iter().copied().fold(Scalar::NEG_INFINITY, Scalar::max);
            let mut s = 0.0;
            for (oj, &xj) in o.iter_mut().zip(row) {
                *oj = (xj - m).exp();
                s += *oj;
            }
            for oj in o.iter_mut() {
                *oj /= s;
            }
        }
        Ok(self
            .tape
            .push(Tensor::new(x.shape(), out)?, Op::Softmax { x: self.id }))
    }

    /// `log Σ exp` over the last axis; the axis is removed from the shape.
    pub fn logsumexp(&self) -> Result<Var<'t>> {
        let x = self.value();
        let n = last_axis("logsumexp", &x)?;
        let mut out = Vec::with_capacity(x.len() / n);
        let mut probs = vec![0.0; x.len()];
        for (row, p) in x.data().chunks(n).zip(probs.chunks_mut(n)) {
            let m = row.iter().copied().fold(Scalar::NEG_INFINITY, Scalar::max);
            let mut s = 0.0;
            for (pj, &xj) in p.iter_mut().zip(row) {
                *pj = (xj - m).exp();
                s += *pj;
            }
            for pj in p.iter_mut() {
                *pj /= s;
            }
            out.push(m + s.ln());
        }
        let shape = &x.shape()[..x.ndim() - 1];
        Ok(self.tape.push(
            Tensor::new(shape, out)?,
            Op::LogSumExp { x: self.id, probs },
        ))
    }

    /// Scales each last-axis slice to unit Euclidean norm.
    pub fn l2_normalize(&self) -> Result<Var<'t>> {
        let x = self.value();
        let n = last_axis("l2_normalize", &x)?;
        let mut norms = Vec::with_capacity(x.len() / n);
        let mut out = vec![0.0; x.len()];
        for (r, (row, o)) in x.data().chunks(n).zip(out.chunks_mut(n)).enumerate() {
            let norm = row.iter().map(|v| v * v).sum::<Scalar>().sqrt();
            if norm <= 0.0 || !norm.is_finite() {
                return Err(Error::contract(format!("row {r} has zero or non-finite norm")));
            }
            for (oj, &xj) in o.iter_mut().zip(row) {
                *oj = xj / norm;
            }
            norms.push(norm);
        }
        Ok(self.tape.push(
            Tensor::new(x.shape(), out)?,
            Op::L2Normalize { x: self.id, norms },
        ))
    }

    pub fn sum(&self) -> Var<'t> {
        let s = self.value().sum();
        self.tape.push(Tensor::scalar(s), Op::Sum { x: self.id })
    }

    pub fn mean(&self) -> Var<'t> {
        let x = self.value();
        let s = x.sum() / x.len() as Scalar;
        self.tape.push(Tensor::scalar(s), Op::Mean { x: self.id })
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'t>> {
        let t = self.value().reshape(shape)?;
        Ok(self.tape.push(t, Op::Reshape { x: self.id }))
    }

    /// `out[i] = self[index[i]]`, laid out with `shape`.
    pub fn gather(&self, shape: &[usize], index: Rc<[usize]>) -> Result<Var<'t>> {
        let x = self.value();
        if numel(shape) != index.len() {
            return Err(Error::dim(format!(
                "gather: shape {shape:?} needs {} indices, got {}",
                numel(shape),
                index.len()
            )));
        }
        if let Some(&bad) = index.iter().find(|&&i| i >= x.len()) {
            return Err(Error::dim(format!("gather: index {bad} out of range {}", x.len())));
        }
        let data = index.iter().map(|&i| x.data()[i]).collect();
        Ok(self
            .tape
            .push(Tensor::new(shape, data)?, Op::Gather { x: self.id, index }))
    }

    /// Swaps the last two axes.
    pub fn transpose_last2(&self) -> Result<Var<'t>> {
        let shape = self.shape();
        if shape.len() < 2 {
            return Err(Error::dim(format!("transpose: needs ≥2 axes, got {shape:?}")));
        }
        let (r, c) = (shape[shape.len() - 2], shape[shape.len() - 1]);
        let batch = numel(&shape[..shape.len() - 2]);
        let mut index = Vec::with_capacity(batch * r * c);
        for b in 0..batch {
            for j in 0..c {
                for i in 0..r {
                    index.push(b * r * c + i * c + j);
                }
            }
        }
        let mut out_shape = shape[..shape.len() - 2].to_vec();
        out_shape.extend([c, r]);
        self.gather(&out_shape, index.into())
    }
}

/// Layer normalization over the last axis: `gamma·(x−μ)/√(σ²+eps) + beta`.
pub fn layer_norm<'t>(x: &Var<'t>, gamma: &Var<'t>, beta: &Var<'t>, eps: Scalar) -> Result<Var<'t>> {
    let xv = x.value();
    let d = last_axis("layer_norm", &xv)?;
    let (gv, bv) = (gamma.value(), beta.value());
    if gv.shape() != [d] || bv.shape() != [d] {
        return Err(Error::dim(format!(
            "layer_norm: gamma {:?} / beta {:?} must be [{d}]",
            gv.shape(),
            bv.shape()
        )));
    }
    if eps <= 0.0 {
        return Err(Error::contract("layer_norm: eps must be positive"));
    }
    let rows = xv.len() / d;
    let mut xhat = vec![0.0; xv.len()];
    let mut rstd = Vec::with_capacity(rows);
    let mut out = vec![0.0; xv.len()];
    for r in 0..rows {
        let row = &xv.data()[r * d..(r + 1) * d];
        let mean = row.iter().sum::<Scalar>() / d as Scalar;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<Scalar>() / d as Scalar;
        let rs = 1.0 / (var + eps).sqrt();
        for j in 0..d {
            let h = (row[j] - mean) * rs;
            xhat[r * d + j] = h;
            out[r * d + j] = gv.data()[j] * h + bv.data()[j];
        }
        rstd.push(rs);
    }
    Ok(x.tape.push(
        Tensor::new(xv.shape(), out)?,
        Op::LayerNorm {
            x: x.id,
            gamma: gamma.id,
            beta: beta.id,
            xhat,
            rstd,
        },
    ))
}

/// 2-D cross-correlation of `x: [B, Cin, H, W]` with `w: [Cout, Cin, kh, kw]`.
pub fn conv2d<'t>(
    x: &Var<'t>,
    w: &Var<'t>,
    bias: Option<&Var<'t>>,
    stride: usize,
    pad: usize,
) -> Result<Var<'t>> {
    let (xv, wv) = (x.value(), w.value());
    let (sx, sw) = (xv.shape(), wv.shape());
    if sx.len() != 4 || sw.len() != 4 || sx[1] != sw[1] {
        return Err(Error::dim(format!("conv2d: input {sx:?} vs weight {sw:?}")));
    }
    if stride == 0 {
        return Err(Error::contract("conv2d: stride must be ≥ 1"));
    }
    let (batch, cin, h, wd) = (sx[0], sx[1], sx[2], sx[3]);
    let (cout, kh, kw) = (sw[0], sw[2], sw[3]);
    let hp = (h + 2 * pad) as isize - kh as isize;
    let wp = (wd + 2 * pad) as isize - kw as isize;
    if hp < 0 || wp < 0 {
        return Err(Error::dim(format!(
            "conv2d: kernel {kh}x{kw} with pad {pad} leaves no output for {h}x{wd}"
        )));
    }
    let geom = ConvGeom {
        cin,
        h,
        w: wd,
        kh,
        kw,
        stride,
        pad,
        ho: hp as usize / stride + 1,
        wo: wp as usize / stride + 1,
    };
    let bv = match bias {
        Some(b) => {
            let bv = b.value();
            if bv.shape() != [cout] {
                return Err(Error::dim(format!("conv2d: bias {:?} must be [{cout}]", bv.shape())));
            }
            Some(bv)
        }
        None => None,
    };
    let in_sz = cin * h * wd;
    let out_sz = cout * geom.col_cols();
    let kk = geom.col_rows();
    let mut out = vec![0.0; batch * out_sz];
    let (xdata, wdata) = (xv.data(), wv.data());
    let bdata = bv.as_ref().map(|b| b.data());
    crate::parallel::par_chunks_mut(&mut out, out_sz.max(1), |bi, o| {
        let mut cols = vec![0.0; kk * geom.col_cols()];
        im2col(&xdata[bi * in_sz..(bi + 1) * in_sz], &geom, &mut cols);
        gemm(
            MatView::row_major(wdata, cout, kk),
            MatView::row_major(&cols, kk, geom.col_cols()),
            o,
            0.0,
        );
        if let Some(bd) = bdata {
            for (co, plane) in o.chunks_mut(geom.col_cols()).enumerate() {
                let b = bd[co];
                plane.iter_mut().for_each(|v| *v += b);
            }
        }
    });
    Ok(x.tape.push(
        Tensor::new(&[batch, cout, geom.ho, geom.wo], out)?,
        Op::Conv2d {
            x: x.id,
            w: w.id,
            bias: bias.map(|b| b.id),
            geom,
            batch,
            cout,
        },
    ))
}
