//! AdamW with global-norm clipping, the warmup/linear-decay schedule,
//! checkpoints and weight averaging.

use rand::SeedableRng;

use super::{ModelError, ModelState, ParamSet};
use crate::math::{powi, round, sqrt};
use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum Warmup {
    Steps(u64),
    /// Fraction of `total_updates`, rounded to the nearest step.
    Fraction(f64),
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields, default))]
pub struct TrainConfig {
    pub peak_lr: f64,
    pub warmup: Warmup,
    pub total_updates: u64,
    pub clip_norm: f64,
    pub weight_decay: f64,
    pub adam_betas: (f64, f64),
    pub adam_eps: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::pretrain_default()
    }
}

impl TrainConfig {
    /// Pretraining optimizer settings: betas (0.9, 0.999), eps 1e-8,
    /// weight decay 0.01, clip 1.0. Schedule and batch are desk-scale.
    pub fn pretrain_default() -> Self {
        TrainConfig {
            peak_lr: 5e-4,
            warmup: Warmup::Steps(100),
            total_updates: 2000,
            clip_norm: 1.0,
            weight_decay: 0.01,
            adam_betas: (0.9, 0.999),
            adam_eps: 1e-8,
            batch_size: 8,
            seed: 0,
        }
    }

    pub fn warmup_steps(&self) -> u64 {
        match self.warmup {
            Warmup::Steps(s) => s,
            Warmup::Fraction(f) => round(f * self.total_updates as f64) as u64,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: &str| Err(ModelError::InvalidTrainConfig(m.into()));
        if self.total_updates == 0 || self.warmup_steps() >= self.total_updates {
            return bad("warmup must be shorter than total_updates");
        }
        if !(self.clip_norm > 0.0) {
            return bad("clip_norm must be positive");
        }
        if !(self.peak_lr >= 0.0 && self.peak_lr.is_finite()) || self.weight_decay < 0.0 || self.adam_eps <= 0.0 {
            return bad("learning rate, weight decay and eps must be non-negative and finite");
        }
        let (b1, b2) = self.adam_betas;
        if !((0.0..1.0).contains(&b1) && (0.0..1.0).contains(&b2)) {
            return bad("adam betas must lie in [0, 1)");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        Ok(())
    }
}

/// Linear warmup from 0 to `peak_lr`, then linear decay to 0 at
/// `total_updates`. Steps past the end stay at 0.
pub fn lr_at(step: u64, t: &TrainConfig) -> f64 {
    let w = t.warmup_steps();
    if step >= t.total_updates {
        return 0.0;
    }
    if step < w {
        return t.peak_lr * step as f64 / w as f64;
    }
    t.peak_lr * (t.total_updates - step) as f64 / (t.total_updates - w) as f64
}

/// Position of a ChaCha stream, enough to resume it exactly.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &Rng) -> Self {
        RngState { seed: rng.get_seed(), stream: rng.get_stream(), word_pos: rng.get_word_pos() }
    }

    pub fn restore(&self) -> Rng {
        let mut r = Rng::from_seed(self.seed);
        r.set_stream(self.stream);
        r.set_word_pos(self.word_pos);
        r
    }
}

/// Model plus optimizer state.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: ModelState,
    pub adam_m: ParamSet,
    pub adam_v: ParamSet,
    /// Completed updates.
    pub step: u64,
    pub schedule: TrainConfig,
    pub rng: RngState,
}

impl Checkpoint {
    /// Zero moments at step 0.
    pub fn new(model: ModelState, schedule: TrainConfig) -> Self {
        let adam_m = model.params.zeros_like();
        let adam_v = model.params.zeros_like();
        let rng = RngState::capture(&crate::rng::seeded(schedule.seed));
        Checkpoint { model, adam_m, adam_v, step: 0, schedule, rng }
    }

    pub fn fingerprint(&self) -> u64 {
        self.model.fingerprint()
    }

    /// Checks moment shapes against the parameters.
    pub fn validate(&self) -> Result<(), ModelError> {
        if !(self.adam_m.same_shape(&self.model.params) && self.adam_v.same_shape(&self.model.params)) {
            return Err(ModelError::ShapeMismatch("moment tensors do not match parameters".into()));
        }
        Ok(())
    }
}

/// Norm and learning rate of an applied update.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepInfo {
    pub lr: f64,
    pub grad_norm: f64,
}

/// One AdamW update of `ck` at `lr_at(step + 1)`. Rejects non-finite
/// gradients without touching the checkpoint.
pub fn adam_step(ck: &mut Checkpoint, grads: &ParamSet, t: &TrainConfig) -> Result<StepInfo, ModelError> {
    let step = ck.step + 1;
    let info = adam_update(&mut ck.model.params, &mut ck.adam_m, &mut ck.adam_v, grads, lr_at(step, t), step, t)?;
    ck.step += 1;
    Ok(info)
}

/// The AdamW rule on bare tensors at learning rate `lr`: global-norm
/// clip to `clip_norm`, moments bias-corrected for update number
/// `bias_step` (1-based), decoupled weight decay `p -= lr * (update + wd * p)`.
/// Only the clip, betas, eps and weight decay of `t` are used.
pub fn adam_update(
    params: &mut ParamSet,
    m: &mut ParamSet,
    v: &mut ParamSet,
    grads: &ParamSet,
    lr: f64,
    bias_step: u64,
    t: &TrainConfig,
) -> Result<StepInfo, ModelError> {
    if !(grads.same_shape(params) && m.same_shape(params) && v.same_shape(params)) {
        return Err(ModelError::ShapeMismatch("gradient or moment tensors do not match parameters".into()));
    }
    if let Some(name) = grads.first_non_finite() {
        return Err(ModelError::NonFiniteGradient(name.into()));
    }
    let norm = sqrt(grads.sum_sq());
    let shrink = if norm > t.clip_norm { norm / t.clip_norm } else { 1.0 };
    let (b1, b2) = t.adam_betas;
    let e = bias_step.min(i32::MAX as u64) as i32;
    let bc1 = 1.0 - powi(b1, e);
    let bc2 = 1.0 - powi(b2, e);
    let (c1, c2) = (1.0 / bc1, 1.0 / sqrt(bc2));
    let decay = 1.0 - lr * t.weight_decay;
    let moments = m.tensors_mut().iter_mut().zip(v.tensors_mut().iter_mut());
    for ((p, (m, v)), g) in params.tensors_mut().iter_mut().zip(moments).zip(grads.tensors()) {
        for (((p, m), v), &g) in p.iter_mut().zip(m.iter_mut()).zip(v.iter_mut()).zip(g) {
            let g = g / shrink;
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            *p = *p * decay - lr * (*m * c1) / (sqrt(*v) * c2 + t.adam_eps);
        }
    }
    Ok(StepInfo { lr, grad_norm: norm })
}

/// Elementwise mean of parameter sets, computed as `a₀ + Σ(aᵢ − a₀)/n` so
/// that identical inputs average to themselves exactly.
pub fn swa_average(states: &[&ModelState]) -> Result<ModelState, ModelError> {
    let first = *states.first().ok_or_else(|| ModelError::ShapeMismatch("no checkpoints to average".into()))?;
    let fp = first.fingerprint();
    if states.iter().any(|s| s.fingerprint() != fp || !s.params.same_shape(&first.params)) {
        return Err(ModelError::FingerprintMismatch);
    }
    let n = states.len() as f64;
    let mut out = first.clone();
    for (k, t) in out.params.tensors_mut().iter_mut().enumerate() {
        for (i, x) in t.iter_mut().enumerate() {
            let a0 = *x;
            let dev: f64 = states[1..].iter().map(|s| s.params.tensors()[k][i] - a0).sum();
            *x = a0 + dev / n;
        }
    }
    Ok(out)
}
