//! Adam and the warmup + cosine-decay learning-rate schedule.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::tensor::ParamStore;

pub const DEFAULT_BETA1: f64 = 0.9;
pub const DEFAULT_BETA2: f64 = 0.999;
pub const DEFAULT_EPSILON: f64 = 1e-8;

/// First/second moment estimates for every tensor of a [`ParamStore`].
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamState {
    pub fn new(store: &ParamStore) -> Self {
        let zeros: Vec<Vec<f64>> = store
            .tensors()
            .iter()
            .map(|t| vec![0.0; t.numel()])
            .collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            step: 0,
            beta1: DEFAULT_BETA1,
            beta2: DEFAULT_BETA2,
            epsilon: DEFAULT_EPSILON,
        }
    }
}

/// One bias-corrected Adam update over every parameter that requires a
/// gradient. Parameters without an accumulated gradient are treated as
/// having a zero gradient. The step counter always advances.
pub fn adam_step(store: &mut ParamStore, state: &mut AdamState, lr: f64) -> Result<()> {
    if state.m.len() != store.len() {
        return Err(Error::shape(
            "adam_step",
            format!("state for {} tensors, store has {}", state.m.len(), store.len()),
        ));
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - state.beta1.powi(t);
    let c2 = 1.0 - state.beta2.powi(t);
    for (i, p) in store.tensors_mut().iter_mut().enumerate() {
        if !p.requires_grad() {
            continue;
        }
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        if m.len() != p.numel() {
            return Err(Error::shape(
                "adam_step",
                format!("moment length {} vs parameter {}", m.len(), p.numel()),
            ));
        }
        let grad = p.grad().map(<[f64]>::to_vec);
        let data = p.data_mut();
        for j in 0..data.len() {
            let g = grad.as_ref().map_or(0.0, |g| g[j]);
            m[j] = state.beta1 * m[j] + (1.0 - state.beta1) * g;
            v[j] = state.beta2 * v[j] + (1.0 - state.beta2) * g * g;
            let mhat = m[j] / c1;
            let vhat = v[j] / c2;
            data[j] -= lr * mhat / (vhat.sqrt() + state.epsilon);
        }
    }
    Ok(())
}

/// Linear warmup to `base_lr`, then half-cosine decay to zero at
/// `total_steps`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleSpec {
    pub base_lr: f64,
    pub total_steps: u64,
    pub warmup_steps: u64,
}

impl ScheduleSpec {
    pub fn new(base_lr: f64, total_steps: u64, warmup_steps: u64) -> Result<Self> {
        if !base_lr.is_finite() || base_lr <= 0.0 || warmup_steps >= total_steps {
            return Err(Error::precondition(
                "schedule",
                format!(
                    "need base_lr > 0 and warmup {warmup_steps} < total {total_steps}, got lr {base_lr}"
                ),
            ));
        }
        Ok(Self {
            base_lr,
            total_steps,
            warmup_steps,
        })
    }

    /// Warmup covering `floor(frac · total)` steps.
    pub fn with_warmup_fraction(base_lr: f64, total_steps: u64, frac: f64) -> Result<Self> {
        let warmup = (frac * total_steps as f64).floor() as u64;
        Self::new(base_lr, total_steps, warmup)
    }
}

pub fn lr_at(step: u64, s: &ScheduleSpec) -> f64 {
    let step = step.min(s.total_steps);
    if step < s.warmup_steps {
        return s.base_lr * step as f64 / s.warmup_steps as f64;
    }
    let progress = (step - s.warmup_steps) as f64 / (s.total_steps - s.warmup_steps) as f64;
    s.base_lr * 0.5 * (1.0 + (PI * progress).cos())
}
