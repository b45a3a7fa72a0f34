use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::params::ParameterStore;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled decay rate, applied as `θ ← θ (1 - lr·rate)` before the moment update.
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub config: AdamConfig,
    /// Per-prefix learning rates; the longest matching prefix wins.
    group_lrs: Vec<(String, f64)>,
    step: u64,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepReport {
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
    /// Factor the gradients were multiplied by (1.0 when under the threshold).
    pub clip_scale: f64,
}

impl AdamState {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            group_lrs: Vec::new(),
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn set_group_lr(&mut self, prefix: &str, lr: f64) {
        match self.group_lrs.iter_mut().find(|(p, _)| p == prefix) {
            Some(entry) => entry.1 = lr,
            None => self.group_lrs.push((prefix.to_string(), lr)),
        }
    }

    pub fn lr_for(&self, name: &str) -> f64 {
        self.group_lrs
            .iter()
            .filter(|(p, _)| name.starts_with(p.as_str()))
            .max_by_key(|(p, _)| p.len())
            .map_or(self.config.lr, |(_, lr)| *lr)
    }

    pub fn first_moment(&self, name: &str) -> Option<&[f64]> {
        self.m.get(name).map(Vec::as_slice)
    }

    pub fn second_moment(&self, name: &str) -> Option<&[f64]> {
        self.v.get(name).map(Vec::as_slice)
    }
}

/// Scales the global gradient norm of `store` down to at most `clip`, then
/// applies one bias-corrected Adam update to every trainable tensor.
pub fn clip_and_step(store: &mut ParameterStore, adam: &mut AdamState, clip: f64) -> Result<StepReport> {
    for (name, t) in store.iter() {
        if let Some(g) = t.grad() {
            if g.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFiniteGradient(name.to_string()));
            }
        }
    }
    let grad_norm = store.grad_norm();
    let clip_scale = if grad_norm > clip { clip / grad_norm } else { 1.0 };
    if clip_scale != 1.0 {
        for (_, t) in store.iter_mut() {
            if let Some(g) = t.grad_mut() {
                g.iter_mut().for_each(|x| *x *= clip_scale);
            }
        }
    }

    adam.step += 1;
    let t = adam.step as i32;
    let AdamConfig {
        beta1,
        beta2,
        eps,
        weight_decay,
        ..
    } = adam.config;
    let bc1 = 1.0 - beta1.powi(t);
    let bc2 = 1.0 - beta2.powi(t);

    let lrs: Vec<(String, f64)> = store
        .names()
        .map(|n| (n.to_string(), adam.lr_for(n)))
        .collect();
    for ((name, tensor), (_, lr)) in store.iter_mut().zip(lrs) {
        if !tensor.requires_grad() {
            continue;
        }
        let n = tensor.numel();
        let grad = tensor.grad().map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; n]);
        let m = adam.m.entry(name.to_string()).or_insert_with(|| vec![0.0; n]);
        let v = adam.v.entry(name.to_string()).or_insert_with(|| vec![0.0; n]);
        let data = tensor.data_mut();
        for i in 0..n {
            if weight_decay != 0.0 {
                data[i] *= 1.0 - lr * weight_decay;
            }
            m[i] = beta1 * m[i] + (1.0 - beta1) * grad[i];
            v[i] = beta2 * v[i] + (1.0 - beta2) * grad[i] * grad[i];
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            data[i] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(StepReport {
        grad_norm,
        clip_scale,
    })
}
