//! Adam with bias correction and an externally supplied learning-rate factor.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates of one parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
        }
    }
}

/// One Adam update of `param` in place. `t` is the 1-based step count used
/// for bias correction and `lr` the already-decayed learning rate.
pub fn adam_step(
    param: &mut [f64],
    grad: &[f64],
    state: &mut AdamState,
    t: u64,
    lr: f64,
    cfg: &AdamConfig,
) {
    debug_assert!(t >= 1);
    let bc1 = 1.0 - cfg.beta1.powi(t as i32);
    let bc2 = 1.0 - cfg.beta2.powi(t as i32);
    for i in 0..param.len() {
        let g = grad[i];
        let m = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * g;
        let v = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * g * g;
        state.m[i] = m;
        state.v[i] = v;
        param[i] -= lr * (m / bc1) / ((v / bc2).sqrt() + cfg.eps);
    }
}

/// Rescales all gradients together so their joint L2 norm is at most
/// `max_norm`. Returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut [&mut BTreeMap<String, Tensor>], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|g| g.values())
        .flat_map(|t| t.data().iter())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            for t in g.values_mut() {
                t.data_mut().iter_mut().for_each(|v| *v *= s);
            }
        }
    }
    norm
}

/// Single optimizer over any number of parameter stores.
///
/// State is keyed by `(store index, tensor name)`, so callers must pass the
/// stores in the same order on every step.
#[derive(Clone, Debug)]
pub struct Adam {
    cfg: AdamConfig,
    t: u64,
    states: BTreeMap<(usize, String), AdamState>,
}

impl Adam {
    pub fn new(cfg: AdamConfig) -> Self {
        Self {
            cfg,
            t: 0,
            states: BTreeMap::new(),
        }
    }

    pub fn config(&self) -> &AdamConfig {
        &self.cfg
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Applies one step with learning rate `cfg.lr * lr_factor`. Tensors with
    /// no gradient entry are left untouched. Fails without modifying anything
    /// if a gradient is non-finite or a store is frozen.
    pub fn step(
        &mut self,
        stores: &mut [&mut ParamStore],
        grads: &[&BTreeMap<String, Tensor>],
        lr_factor: f64,
    ) -> Result<()> {
        self.step_scaled(stores, grads, lr_factor, |_, _| 1.0)
    }

    /// [`Adam::step`] with an extra per-tensor learning-rate multiplier
    /// `scale(store index, tensor name)`.
    pub fn step_scaled(
        &mut self,
        stores: &mut [&mut ParamStore],
        grads: &[&BTreeMap<String, Tensor>],
        lr_factor: f64,
        scale: impl Fn(usize, &str) -> f64,
    ) -> Result<()> {
        assert_eq!(stores.len(), grads.len());
        for (store, g) in stores.iter().zip(grads) {
            if store.is_frozen() && !g.is_empty() {
                return Err(Error::Usage(
                    "attempted to update a frozen parameter store".into(),
                ));
            }
            for (name, grad) in g.iter() {
                let Some(p) = store.get(name) else {
                    return Err(Error::Usage(format!(
                        "gradient for unknown parameter '{name}'"
                    )));
                };
                if p.shape() != grad.shape() {
                    return Err(Error::Dimension(format!(
                        "gradient for '{name}' has shape {:?}, parameter {:?}",
                        grad.shape(),
                        p.shape()
                    )));
                }
                if !grad.is_finite() {
                    return Err(Error::Numeric(format!(
                        "non-finite gradient for parameter '{name}'"
                    )));
                }
            }
        }
        self.t += 1;
        let lr = self.cfg.lr * lr_factor;
        for (si, (store, g)) in stores.iter_mut().zip(grads).enumerate() {
            for (name, p) in store.iter_mut() {
                let Some(grad) = g.get(name.as_str()) else {
                    continue;
                };
                let state = self
                    .states
                    .entry((si, name.clone()))
                    .or_insert_with(|| AdamState::new(p.len()));
                adam_step(
                    p.data_mut(),
                    grad.data(),
                    state,
                    self.t,
                    lr * scale(si, name),
                    &self.cfg,
                );
            }
        }
        Ok(())
    }
}
