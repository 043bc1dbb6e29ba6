//! AdamW with decoupled weight decay.

use crate::params::ParamStore;
use crate::real::Real;
use ndarray::{Array2, Zip};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// Weight decay applies to linear weights only, not to biases, norm gains,
/// tokens or positional tables.
pub fn decays(name: &str) -> bool {
    name.ends_with(".weight") && !name.split('.').any(|p| p.starts_with("norm"))
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamW<F> {
    pub cfg: AdamWConfig,
    pub m: ParamStore<F>,
    pub v: ParamStore<F>,
    /// Updates applied to each parameter so far.
    pub steps: BTreeMap<String, u64>,
}

impl<F: Real> AdamW<F> {
    pub fn new(cfg: AdamWConfig) -> Self {
        AdamW {
            cfg,
            m: ParamStore::new(),
            v: ParamStore::new(),
            steps: BTreeMap::new(),
        }
    }

    /// Updates every parameter that has a gradient in `grads`.
    pub fn step(&mut self, params: &mut ParamStore<F>, grads: &ParamStore<F>, lr: f64) {
        let c = self.cfg;
        let (b1, b2) = (F::of(c.beta1), F::of(c.beta2));
        for (name, g) in grads.iter() {
            let Some(p) = params.get_mut(name) else { continue };
            let t = self.steps.entry(name.clone()).or_insert(0);
            *t += 1;
            let bc1 = F::of(1.0 - c.beta1.powi(*t as i32));
            let bc2 = F::of(1.0 - c.beta2.powi(*t as i32));
            if !self.m.contains(name) {
                self.m.insert(name.clone(), Array2::zeros(g.dim()));
                self.v.insert(name.clone(), Array2::zeros(g.dim()));
            }
            let m = self.m.get_mut(name).unwrap();
            Zip::from(&mut *m)
                .and(g)
                .for_each(|m, &g| *m = b1 * *m + (F::one() - b1) * g);
            let v = self.v.get_mut(name).unwrap();
            Zip::from(&mut *v)
                .and(g)
                .for_each(|v, &g| *v = b2 * *v + (F::one() - b2) * g * g);
            let m = self.m.get(name).unwrap();
            let v = self.v.get(name).unwrap();
            let lr_f = F::of(lr);
            let decay = if decays(name) {
                F::one() - F::of(lr * c.weight_decay)
            } else {
                F::one()
            };
            let eps = F::of(c.eps);
            Zip::from(p).and(m).and(v).for_each(|p, &m, &v| {
                let mhat = m / bc1;
                let vhat = v / bc2;
                *p = *p * decay - lr_f * mhat / (vhat.sqrt() + eps);
            });
        }
    }
}
