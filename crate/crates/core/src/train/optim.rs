//! AdamW with linear warmup, plus the EMA shadow.

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub warmup_steps: u64,
    /// Global-norm clip; `None` disables clipping.
    pub clip: Option<f64>,
}

impl Default for AdamHyper {
    fn default() -> Self {
        Self { lr: 3e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0, warmup_steps: 2500, clip: None }
    }
}

impl AdamHyper {
    /// Learning rate used by update number `step` (1-based).
    pub fn lr_at(&self, step: u64) -> f64 {
        if self.warmup_steps == 0 {
            self.lr
        } else {
            self.lr * (step as f64 / self.warmup_steps as f64).min(1.0)
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    /// Updates applied so far.
    pub step: u64,
}

impl OptimizerState {
    pub fn new(n: usize) -> Self {
        Self { m: vec![0.0; n], v: vec![0.0; n], step: 0 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct UpdateInfo {
    pub lr: f64,
    /// Norm before clipping.
    pub grad_norm: f64,
}

/// One decoupled-weight-decay Adam update. Nothing changes if any gradient
/// is non-finite; the error names the offending parameter via `name_of`.
pub fn optimizer_step(
    params: &mut [f64],
    grads: &[f64],
    state: &mut OptimizerState,
    hyper: &AdamHyper,
    name_of: &dyn Fn(usize) -> String,
) -> Result<UpdateInfo> {
    if grads.len() != params.len() || state.m.len() != params.len() || state.v.len() != params.len() {
        return Err(Error::Shape(format!("{} gradients for {} parameters", grads.len(), params.len())));
    }
    if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
        return Err(Error::NonFiniteGradient { param: name_of(i) });
    }
    let grad_norm = grads.iter().map(|g| g * g).sum::<f64>().sqrt();
    let scale = match hyper.clip {
        Some(c) if grad_norm > c => c / grad_norm,
        _ => 1.0,
    };
    state.step += 1;
    let n = state.step as i32;
    let lr = hyper.lr_at(state.step);
    let c1 = 1.0 - hyper.beta1.powi(n);
    let c2 = 1.0 - hyper.beta2.powi(n);
    for i in 0..params.len() {
        let g = grads[i] * scale;
        state.m[i] = hyper.beta1 * state.m[i] + (1.0 - hyper.beta1) * g;
        state.v[i] = hyper.beta2 * state.v[i] + (1.0 - hyper.beta2) * g * g;
        let mhat = state.m[i] / c1;
        let vhat = state.v[i] / c2;
        params[i] -= lr * (mhat / (vhat.sqrt() + hyper.eps) + hyper.weight_decay * params[i]);
    }
    Ok(UpdateInfo { lr, grad_norm })
}

/// `shadow ← decay·shadow + (1 − decay)·params`.
pub fn ema_update(shadow: &mut [f64], params: &[f64], decay: f64) {
    debug_assert_eq!(shadow.len(), params.len());
    for (s, &p) in shadow.iter_mut().zip(params) {
        *s = decay * *s + (1.0 - decay) * p;
    }
}
