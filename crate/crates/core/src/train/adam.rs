use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// Adam moments keyed by parameter name.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

impl Default for AdamState {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, m: BTreeMap::new(), v: BTreeMap::new() }
    }
}

impl AdamState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn first_moment(&self, name: &str) -> Option<&[f64]> {
        self.m.get(name).map(Vec::as_slice)
    }
}

pub fn adam_step(params: &mut ParamStore, grads: &ParamStore, state: &mut AdamState, lr: f64) -> Result<()> {
    adam_step_with(params, grads, state, |_| lr)
}

/// One bias-corrected Adam update of every parameter that has a gradient,
/// with a per-name learning rate.
pub fn adam_step_with(
    params: &mut ParamStore,
    grads: &ParamStore,
    state: &mut AdamState,
    lr_for: impl Fn(&str) -> f64,
) -> Result<()> {
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - state.beta1.powi(t);
    let c2 = 1.0 - state.beta2.powi(t);
    for (name, g) in grads.iter() {
        let p = params.get(name)?;
        if p.shape() != g.shape() {
            return Err(Error::Shape { op: "adam", node: 0, lhs: p.shape().to_vec(), rhs: g.shape().to_vec() });
        }
        let n = g.len();
        let m = state.m.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
        let v = state.v.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
        let lr = lr_for(name);
        let mut data = p.data().to_vec();
        for i in 0..n {
            let gi = g.data()[i];
            m[i] = state.beta1 * m[i] + (1.0 - state.beta1) * gi;
            v[i] = state.beta2 * v[i] + (1.0 - state.beta2) * gi * gi;
            let mh = m[i] / c1;
            let vh = v[i] / c2;
            data[i] -= lr * mh / (vh.sqrt() + state.eps);
        }
        params.insert(name.clone(), Tensor::new(p.shape().to_vec(), data)?);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store(v: &[f64]) -> ParamStore {
        let mut s = ParamStore::new();
        s.insert("p", Tensor::row(v));
        s
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut p = store(&[1.0, -2.0]);
        let before = p.clone();
        let mut st = AdamState::new();
        adam_step(&mut p, &store(&[0.0, 0.0]), &mut st, 0.1).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn first_step_closed_form() {
        let g = [0.5, -3.0, 1e-3];
        let mut p = store(&[0.0; 3]);
        let mut st = AdamState::new();
        adam_step(&mut p, &store(&g), &mut st, 0.01).unwrap();
        for (x, gi) in p.get("p").unwrap().data().iter().zip(g) {
            // m̂ = g, v̂ = g², so the step is lr·g/(|g| + ε)
            let want = -0.01 * gi / (gi.abs() + 1e-8);
            assert!((x - want).abs() < 1e-15);
        }
    }

    #[test]
    fn repeated_runs_match() {
        let run = || {
            let mut p = store(&[0.3, 0.1]);
            let mut st = AdamState::new();
            for k in 0..20 {
                let x = p.get("p").unwrap().data().to_vec();
                let g = store(&[2.0 * x[0] + k as f64 * 0.01, x[1].sin()]);
                adam_step(&mut p, &g, &mut st, 0.05).unwrap();
            }
            p
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn shape_mismatch_errors() {
        let mut p = store(&[0.0; 2]);
        assert!(adam_step(&mut p, &store(&[1.0; 3]), &mut AdamState::new(), 0.1).is_err());
    }
}
