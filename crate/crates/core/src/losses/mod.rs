//! Training objectives.

use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Scalar, Var};

/// Mean absolute error over all elements.
pub fn supervised_l1<'t>(pred: &Var<'t>, target: &Var<'t>) -> Result<Var<'t>> {
    let (sp, st) = (pred.shape(), target.shape());
    if sp != st {
        return Err(Error::contract(format!("l1: prediction {sp:?} vs target {st:?}")));
    }
    Ok(pred.sub(target)?.abs().mean())
}

/// Patch-wise contrastive loss over decoder features `[B, N, d]`.
///
/// For image `j` and patches `(i1, i2)` the term is
/// `−cos(f_j,i1, f_j,i2) + log Σ_{k≠j} exp(cos(f_j,i1, f_k,i2))`, averaged over
/// all `B·N²` triples. Pairs with `i1 == i2` are included. The value can be
/// negative.
pub fn contrastive_loss<'t>(features: &Var<'t>) -> Result<Var<'t>> {
    let s = features.shape();
    if s.len() != 3 {
        return Err(Error::dim(format!("contrastive: expected [B,N,d], got {s:?}")));
    }
    let (b, n, d) = (s[0], s[1], s[2]);
    if b < 2 {
        return Err(Error::contract(format!("contrastive loss needs a batch of at least 2, got {b}")));
    }
    let u = features.reshape(&[b * n, d])?.l2_normalize()?;
    let sim = u.matmul(&u.transpose_last2()?)?;
    let bn = b * n;
    let mut cross = Vec::with_capacity(b * n * n * (b - 1));
    let mut same = Vec::with_capacity(b * n * n);
    for j in 0..b {
        for i1 in 0..n {
            let row = (j * n + i1) * bn;
            for i2 in 0..n {
                same.push(row + j * n + i2);
                for k in (0..b).filter(|&k| k != j) {
                    cross.push(row + k * n + i2);
                }
            }
        }
    }
    let denom = sim.gather(&[b, n, n, b - 1], Rc::from(cross))?.logsumexp()?.mean();
    let numer = sim.gather(&[b, n, n], Rc::from(same))?.mean();
    denom.sub(&numer)
}

/// `lambda·con + sup` on the tape.
pub fn combine<'t>(sup: &Var<'t>, con: &Var<'t>, lambda: Scalar) -> Result<Var<'t>> {
    if !(lambda >= 0.0) {
        return Err(Error::contract(format!("lambda must be non-negative, got {lambda}")));
    }
    con.scale(lambda).add(sup)
}

/// Scalar values of one loss evaluation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub supervised: f64,
    pub contrastive: f64,
    pub lambda: f64,
    pub total: f64,
}

/// Builds the breakdown with `total = lambda·con + sup`.
pub fn total_loss(sup: Scalar, con: Scalar, lambda: Scalar) -> Result<LossBreakdown> {
    if !(lambda >= 0.0) {
        return Err(Error::contract(format!("lambda must be non-negative, got {lambda}")));
    }
    Ok(LossBreakdown {
        supervised: sup as f64,
        contrastive: con as f64,
        lambda: lambda as f64,
        total: (lambda * con + sup) as f64,
    })
}

impl LossBreakdown {
    pub fn is_finite(&self) -> bool {
        self.supervised.is_finite() && self.contrastive.is_finite() && self.total.is_finite()
    }
}
