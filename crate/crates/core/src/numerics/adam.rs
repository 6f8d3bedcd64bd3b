use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Parameter or gradient tables keyed by parameter name.
pub type NamedTensors = BTreeMap<String, Tensor>;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamHyper {
    pub beta1: Scalar,
    pub beta2: Scalar,
    pub eps: Scalar,
}

impl Default for AdamHyper {
    fn default() -> Self {
        AdamHyper {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Bias-corrected Adam moments, created lazily per parameter on its first gradient.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub first_moment: NamedTensors,
    pub second_moment: NamedTensors,
    pub step_count: u64,
    pub hyper: AdamHyper,
}

impl Default for AdamState {
    fn default() -> Self {
        Self::new(AdamHyper::default())
    }
}

impl AdamState {
    pub fn new(hyper: AdamHyper) -> Self {
        AdamState {
            first_moment: BTreeMap::new(),
            second_moment: BTreeMap::new(),
            step_count: 0,
            hyper,
        }
    }

    /// Drops moments for parameters that are no longer present.
    pub fn retain(&mut self, keep: impl Fn(&str) -> bool) {
        self.first_moment.retain(|k, _| keep(k));
        self.second_moment.retain(|k, _| keep(k));
    }
}

/// One Adam update of every parameter that has a gradient.
///
/// Parameters absent from `grads` are left untouched, as are their moments.
pub fn adam_step(
    params: &mut NamedTensors,
    grads: &NamedTensors,
    state: &mut AdamState,
    lr: Scalar,
) -> Result<()> {
    for (name, g) in grads {
        let p = params
            .get(name)
            .ok_or_else(|| Error::contract(format!("gradient for unknown parameter `{name}`")))?;
        if p.shape() != g.shape() {
            return Err(Error::contract(format!(
                "parameter `{name}` has shape {:?} but gradient {:?}",
                p.shape(),
                g.shape()
            )));
        }
        for table in [&state.first_moment, &state.second_moment] {
            if let Some(m) = table.get(name) {
                if m.shape() != p.shape() {
                    return Err(Error::contract(format!(
                        "moment for `{name}` has shape {:?}, parameter {:?}",
                        m.shape(),
                        p.shape()
                    )));
                }
            }
        }
    }

    state.step_count += 1;
    let AdamHyper { beta1, beta2, eps } = state.hyper;
    let t = state.step_count as i32;
    let c1 = 1.0 - beta1.powi(t);
    let c2 = 1.0 - beta2.powi(t);
    for (name, g) in grads {
        let p = params.get_mut(name).expect("checked above");
        let m = state
            .first_moment
            .entry(name.clone())
            .or_insert_with(|| Tensor::zeros(g.shape()));
        let v = state
            .second_moment
            .entry(name.clone())
            .or_insert_with(|| Tensor::zeros(g.shape()));
        for (((pi, &gi), mi), vi) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut())
            .zip(v.data_mut())
        {
            *mi = beta1 * *mi + (1.0 - beta1) * gi;
            *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
            let mhat = *mi / c1;
            let vhat = *vi / c2;
            *pi -= lr * mhat / (vhat.sqrt() + eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one(name: &str, t: Tensor) -> NamedTensors {
        BTreeMap::from([(name.to_string(), t)])
    }

    #[test]
    fn zero_gradient_leaves_params_and_counts_step() {
        let mut params = one("w", Tensor::new(&[3], vec![1.0, -2.0, 0.5]).unwrap());
        let before = params.clone();
        let mut st = AdamState::default();
        adam_step(&mut params, &one("w", Tensor::zeros(&[3])), &mut st, 1e-3).unwrap();
        assert_eq!(params, before);
        assert_eq!(st.step_count, 1);
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let mut params = one("w", Tensor::zeros(&[4]));
        let g = Tensor::new(&[4], vec![3.0, -0.2, 1e-3, -50.0]).unwrap();
        let mut st = AdamState::default();
        let lr = 0.01;
        adam_step(&mut params, &one("w", g.clone()), &mut st, lr).unwrap();
        for (p, gi) in params["w"].data().iter().zip(g.data()) {
            let expected = -lr * gi.signum();
            assert!((p - expected).abs() < 1e-4 * lr, "{p} vs {expected}");
        }
    }

    #[test]
    fn constant_gradient_updates_do_not_grow() {
        let mut params = one("w", Tensor::zeros(&[3]));
        let g = one("w", Tensor::new(&[3], vec![0.7, -1.3, 4.0]).unwrap());
        let mut st = AdamState::default();
        adam_step(&mut params, &g, &mut st, 0.1).unwrap();
        let after1 = params["w"].clone();
        adam_step(&mut params, &g, &mut st, 0.1).unwrap();
        for i in 0..3 {
            let u1 = after1.data()[i].abs();
            let u2 = (params["w"].data()[i] - after1.data()[i]).abs();
            assert!(u2 <= u1 * (1.0 + 1e-6), "step 2 {u2} > step 1 {u1}");
        }
    }

    #[test]
    fn shape_mismatch_is_contract_error() {
        let mut params = one("w", Tensor::zeros(&[3]));
        let err = adam_step(&mut params, &one("w", Tensor::zeros(&[2])), &mut AdamState::default(), 0.1);
        assert!(matches!(err, Err(Error::Contract(_))));
    }

    #[test]
    fn params_without_gradients_are_skipped() {
        let mut params = one("a", Tensor::ones(&[2]));
        params.insert("b".into(), Tensor::ones(&[2]));
        let mut st = AdamState::default();
        adam_step(&mut params, &one("a", Tensor::ones(&[2])), &mut st, 0.1).unwrap();
        assert_eq!(params["b"], Tensor::ones(&[2]));
        assert!(!st.first_moment.contains_key("b"));
    }
}
