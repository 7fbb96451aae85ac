//! Adam with per-parameter moments that can be reset when a parameter is
//! (re)unfrozen.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Gradients, ParamSet};
use crate::error::{Error, Result};
use crate::math::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return Err(Error::config("optimizer.lr", "must be finite and >= 0"));
        }
        for (field, b) in [("optimizer.beta1", self.beta1), ("optimizer.beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::config(field, "must lie in [0, 1)"));
            }
        }
        if !(self.eps.is_finite() && self.eps > 0.0) {
            return Err(Error::config("optimizer.eps", "must be finite and > 0"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
struct Moments {
    m: Matrix,
    v: Matrix,
    step: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    slots: BTreeMap<String, Moments>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            slots: BTreeMap::new(),
        }
    }

    /// Forgets the moments and step count of `name`.
    pub fn reset(&mut self, name: &str) {
        self.slots.remove(name);
    }

    /// Number of updates applied to `name` since its last reset.
    pub fn step_count(&self, name: &str) -> u64 {
        self.slots.get(name).map_or(0, |s| s.step)
    }

    /// One update of every trainable parameter. Frozen ones are not touched.
    pub fn step(&mut self, params: &mut ParamSet, grads: &Gradients) -> Result<()> {
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let names: Vec<String> = params.trainable_names().map(str::to_owned).collect();
        for name in names {
            let g = grads
                .get(&name)
                .ok_or_else(|| Error::invalid("adam_step", format!("no gradient for {name}")))?;
            let p = params.get_mut(&name).expect("name came from the set");
            if g.shape() != p.value.shape() {
                return Err(Error::dims("adam_step", crate::math::fmt_shape(p.value.shape()), crate::math::fmt_shape(g.shape())));
            }
            let slot = self.slots.entry(name).or_insert_with(|| Moments {
                m: Matrix::zeros(g.rows(), g.cols()),
                v: Matrix::zeros(g.rows(), g.cols()),
                step: 0,
            });
            slot.step += 1;
            let c1 = 1.0 - beta1.powf(slot.step as f64);
            let c2 = 1.0 - beta2.powf(slot.step as f64);
            let values = p.value.as_mut_slice();
            let (m, v) = (slot.m.as_mut_slice(), slot.v.as_mut_slice());
            for (i, &gi) in g.as_slice().iter().enumerate() {
                m[i] = beta1 * m[i] + (1.0 - beta1) * gi;
                v[i] = beta2 * v[i] + (1.0 - beta2) * gi * gi;
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                values[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
