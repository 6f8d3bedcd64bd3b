//! Composite differentiable operations built from tape primitives.

use std::rc::Rc;

use super::tape::Var;
use super::tensor::Scalar;
use crate::error::{Error, Result};

/// Depth-to-space: `[B, C·r², H, W] → [B, C, r·H, r·W]`.
///
/// Output pixel `(c, h·r + i, w·r + j)` reads input channel `c·r² + i·r + j` at `(h, w)`.
pub fn pixel_shuffle<'t>(x: &Var<'t>, r: usize) -> Result<Var<'t>> {
    let s = x.shape();
    if s.len() != 4 || r == 0 || s[1] % (r * r) != 0 {
        return Err(Error::dim(format!(
            "pixel_shuffle: channels of {s:?} not divisible by r²={}",
            r * r
        )));
    }
    let index = pixel_shuffle_index(&s, r);
    x.gather(&[s[0], s[1] / (r * r), s[2] * r, s[3] * r], index.into())
}

pub(crate) fn pixel_shuffle_index(s: &[usize], r: usize) -> Vec<usize> {
    let (b, cin, h, w) = (s[0], s[1], s[2], s[3]);
    let c = cin / (r * r);
    let (ho, wo) = (h * r, w * r);
    let mut index = Vec::with_capacity(b * cin * h * w);
    for bi in 0..b {
        for ci in 0..c {
            for y in 0..ho {
                for xo in 0..wo {
                    let ch = ci * r * r + (y % r) * r + (xo % r);
                    index.push(((bi * cin + ch) * h + y / r) * w + xo / r);
                }
            }
        }
    }
    index
}

/// Space-to-depth, the inverse rearrangement of [`pixel_shuffle`].
pub fn pixel_unshuffle<'t>(x: &Var<'t>, r: usize) -> Result<Var<'t>> {
    let s = x.shape();
    if s.len() != 4 || r == 0 || s[2] % r != 0 || s[3] % r != 0 {
        return Err(Error::dim(format!("pixel_unshuffle: extents of {s:?} not divisible by {r}")));
    }
    let (b, c, ho, wo) = (s[0], s[1], s[2], s[3]);
    let fwd = pixel_shuffle_index(&[b, c * r * r, ho / r, wo / r], r);
    let mut inv = vec![0usize; fwd.len()];
    for (out_pos, &src) in fwd.iter().enumerate() {
        inv[src] = out_pos;
    }
    x.gather(&[b, c * r * r, ho / r, wo / r], inv.into())
}

/// `x·w (+ bias)` with `w: [in, out]`.
pub fn linear<'t>(x: &Var<'t>, w: &Var<'t>, bias: Option<&Var<'t>>) -> Result<Var<'t>> {
    let y = x.matmul(w)?;
    match bias {
        Some(b) => y.add(b),
        None => Ok(y),
    }
}

/// Projection matrices of one attention block, each `[d, d]`.
#[derive(Clone, Copy, Debug)]
pub struct AttentionWeights<'t> {
    pub wq: Var<'t>,
    pub wk: Var<'t>,
    pub wv: Var<'t>,
    pub wo: Var<'t>,
}

/// `[B, N, d] → [B, heads, N, d/heads]`.
fn split_heads<'t>(x: &Var<'t>, heads: usize) -> Result<Var<'t>> {
    let s = x.shape();
    let (b, n, d) = (s[0], s[1], s[2]);
    let dh = d / heads;
    let mut index = Vec::with_capacity(b * n * d);
    for bi in 0..b {
        for h in 0..heads {
            for t in 0..n {
                for j in 0..dh {
                    index.push((bi * n + t) * d + h * dh + j);
                }
            }
        }
    }
    x.gather(&[b, heads, n, dh], Rc::from(index))
}

/// `[B, heads, N, dh] → [B, N, heads·dh]`.
fn merge_heads<'t>(x: &Var<'t>) -> Result<Var<'t>> {
    let s = x.shape();
    let (b, heads, n, dh) = (s[0], s[1], s[2], s[3]);
    let mut index = Vec::with_capacity(b * n * heads * dh);
    for bi in 0..b {
        for t in 0..n {
            for h in 0..heads {
                for j in 0..dh {
                    index.push(((bi * heads + h) * n + t) * dh + j);
                }
            }
        }
    }
    x.gather(&[b, n, heads * dh], Rc::from(index))
}

/// Multi-head scaled dot-product attention with bias-free projections.
///
/// Accepts `[N, d]` or `[B, N, d]` inputs; `k` and `v` share a sequence length
/// that may differ from `q`'s. Each head attends with scale `1/√(d/heads)` and
/// the concatenated heads pass through `wo`.
pub fn multi_head_attention<'t>(
    q: &Var<'t>,
    k: &Var<'t>,
    v: &Var<'t>,
    weights: &AttentionWeights<'t>,
    num_heads: usize,
) -> Result<Var<'t>> {
    let qs = q.shape();
    let unbatched = qs.len() == 2;
    let lift = |x: &Var<'t>| -> Result<Var<'t>> {
        let s = x.shape();
        match s.len() {
            2 => x.reshape(&[1, s[0], s[1]]),
            3 => Ok(*x),
            _ => Err(Error::dim(format!("attention: expected [N,d] or [B,N,d], got {s:?}"))),
        }
    };
    let (q3, k3, v3) = (lift(q)?, lift(k)?, lift(v)?);
    let d = q3.shape()[2];
    if num_heads == 0 || d % num_heads != 0 {
        return Err(Error::config(format!(
            "token dim {d} is not divisible by {num_heads} heads"
        )));
    }
    if k3.shape() != v3.shape() || k3.shape()[0] != q3.shape()[0] || k3.shape()[2] != d {
        return Err(Error::dim(format!(
            "attention: q {:?}, k {:?}, v {:?} are inconsistent",
            q3.shape(),
            k3.shape(),
            v3.shape()
        )));
    }
    let dh = d / num_heads;
    let qh = split_heads(&q3.matmul(&weights.wq)?, num_heads)?;
    let kh = split_heads(&k3.matmul(&weights.wk)?, num_heads)?;
    let vh = split_heads(&v3.matmul(&weights.wv)?, num_heads)?;
    let scores = qh
        .matmul(&kh.transpose_last2()?)?
        .scale(1.0 / (dh as Scalar).sqrt());
    let attn = scores.softmax()?;
    let ctx = merge_heads(&attn.matmul(&vh)?)?;
    let out = ctx.matmul(&weights.wo)?;
    if unbatched {
        out.reshape(&[qs[0], d])
    } else {
        Ok(out)
    }
}
