use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Moment accumulators for one parameter tensor.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        AdamState {
            m: vec![0.0; len],
            v: vec![0.0; len],
            step: 0,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.m.iter().chain(&self.v).all(|x| x.is_finite())
    }
}

/// One bias-corrected Adam update. A non-finite gradient leaves the tensor
/// and its state untouched and returns `Ok(false)`.
pub fn adam_step(params: &mut [f64], grads: &[f64], state: &mut AdamState, lr: f64, cfg: &AdamConfig) -> Result<bool> {
    if params.len() != grads.len() || state.m.len() != params.len() || state.v.len() != params.len() {
        return Err(Error::shape(
            format!("{} parameters", params.len()),
            format!("{} grads, {} moments", grads.len(), state.m.len()),
        ));
    }
    if !grads.iter().all(|g| g.is_finite()) {
        return Ok(false);
    }
    state.step += 1;
    let t = state.step as f64;
    let bc1 = 1.0 - cfg.beta1.powf(t);
    let bc2 = 1.0 - cfg.beta2.powf(t);
    for i in 0..params.len() {
        let g = grads[i];
        state.m[i] = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * g;
        state.v[i] = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * g * g;
        let m_hat = state.m[i] / bc1;
        let v_hat = state.v[i] / bc2;
        params[i] -= lr * m_hat / (v_hat.sqrt() + cfg.eps);
    }
    Ok(true)
}

/// Adam states for an ordered list of tensors sharing one learning rate.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamGroup {
    pub lr: f64,
    pub states: Vec<AdamState>,
    pub skipped: u64,
}

impl ParamGroup {
    pub fn new(lr: f64, sizes: &[usize]) -> Self {
        ParamGroup {
            lr,
            states: sizes.iter().map(|&n| AdamState::new(n)).collect(),
            skipped: 0,
        }
    }

    /// Steps every tensor; `grads[i]` pairs with `params[i]`.
    pub fn step(&mut self, params: Vec<&mut [f64]>, grads: &[&[f64]], cfg: &AdamConfig) -> Result<()> {
        if params.len() != self.states.len() || grads.len() != self.states.len() {
            return Err(Error::shape(format!("{} tensors", self.states.len()), params.len()));
        }
        for ((p, g), s) in params.into_iter().zip(grads).zip(&mut self.states) {
            if !adam_step(p, g, s, self.lr, cfg)? {
                self.skipped += 1;
                log::warn!("non-finite gradient, tensor update skipped ({} so far)", self.skipped);
            }
        }
        Ok(())
    }
}
