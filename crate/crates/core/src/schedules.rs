//! Closed-form scalar schedules, all evaluated in `f64`.
//!
//! Three kinds cover the training recipes: linear warmup into cosine decay
//! for the pretraining learning rate, a multistep decay for fine-tuning, and
//! a rising cosine for the EMA momentum. Schedules are step-granular; the
//! engine converts epochs to steps.

use crate::error::{CoreError, Result};
use crate::tensor::Element;

/// Learning rate: linear from `warmup_start` to `base` over `warmup_steps`,
/// then cosine from `base` down to `min` so that the final step (index
/// `total_steps - 1`) lands exactly on `min`.
#[derive(Debug, Clone, PartialEq)]
pub struct WarmupCosine {
    pub warmup_start: f64,
    pub base: f64,
    pub min: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
}

impl WarmupCosine {
    pub fn new(
        warmup_start: f64,
        base: f64,
        min: f64,
        warmup_steps: usize,
        total_steps: usize,
    ) -> Result<Self> {
        if total_steps == 0 || warmup_steps >= total_steps {
            return Err(CoreError::invalid(
                "warmup-cosine schedule",
                format!("warmup_steps {warmup_steps} must be < total_steps {total_steps}"),
            ));
        }
        if !(warmup_start.is_finite() && base.is_finite() && min.is_finite()) {
            return Err(CoreError::invalid("warmup-cosine schedule", "non-finite endpoint"));
        }
        Ok(WarmupCosine { warmup_start, base, min, warmup_steps, total_steps })
    }

    pub fn lr_at(&self, step: usize) -> f64 {
        let step = step.min(self.total_steps - 1);
        if step < self.warmup_steps {
            let t = step as f64 / self.warmup_steps as f64;
            return self.warmup_start + (self.base - self.warmup_start) * t;
        }
        let span = (self.total_steps - 1 - self.warmup_steps) as f64;
        if span == 0.0 {
            return self.min;
        }
        let t = (step - self.warmup_steps) as f64 / span;
        self.min + (self.base - self.min) * (f64::cos(std::f64::consts::PI * t) + 1.0) / 2.0
    }
}

/// Learning rate multiplied by `gamma` at each milestone epoch:
/// `lr(e) = base · gamma^(#{m : e ≥ m})`.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiStep {
    pub base: f64,
    pub milestones: Vec<usize>,
    pub gamma: f64,
}

impl MultiStep {
    pub fn new(base: f64, milestones: Vec<usize>, gamma: f64) -> Result<Self> {
        if !milestones.windows(2).all(|w| w[0] < w[1]) {
            return Err(CoreError::invalid(
                "multistep schedule",
                "milestones must be strictly increasing",
            ));
        }
        if !(base.is_finite() && gamma.is_finite()) || gamma <= 0.0 {
            return Err(CoreError::invalid("multistep schedule", "bad base or gamma"));
        }
        Ok(MultiStep { base, milestones, gamma })
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        let hits = self.milestones.iter().filter(|&&m| epoch >= m).count();
        self.base * self.gamma.powi(hits as i32)
    }
}

/// EMA momentum rising along a cosine:
/// `τ(t) = τ_final − (τ_final − τ_base) · (cos(πt/T) + 1)/2` with
/// `T = total_steps − 1`, so `τ(0) = τ_base` and `τ(T) = τ_final`.
#[derive(Debug, Clone, PartialEq)]
pub struct CosineTau {
    pub tau_base: f64,
    pub tau_final: f64,
    pub total_steps: usize,
}

impl CosineTau {
    pub fn new(tau_base: f64, tau_final: f64, total_steps: usize) -> Result<Self> {
        if total_steps == 0 {
            return Err(CoreError::invalid("cosine-tau schedule", "total_steps must be > 0"));
        }
        for v in [tau_base, tau_final] {
            if !(0.0..=1.0).contains(&v) {
                return Err(CoreError::invalid(
                    "cosine-tau schedule",
                    format!("tau {v} outside [0,1]"),
                ));
            }
        }
        Ok(CosineTau { tau_base, tau_final, total_steps })
    }

    pub fn tau_at(&self, step: usize) -> f64 {
        if self.total_steps == 1 {
            return self.tau_final;
        }
        let step = step.min(self.total_steps - 1);
        let t = step as f64 / (self.total_steps - 1) as f64;
        self.tau_final
            - (self.tau_final - self.tau_base) * (f64::cos(std::f64::consts::PI * t) + 1.0) / 2.0
    }
}

/// In-place EMA: `teacher ← τ·teacher + (1−τ)·student`.
pub fn ema_update<E: Element>(teacher: &mut [E], student: &[E], tau: E) {
    assert_eq!(teacher.len(), student.len(), "ema_update: length mismatch");
    let one_minus = E::one() - tau;
    for (t, &s) in teacher.iter_mut().zip(student) {
        *t = tau * *t + one_minus * s;
    }
}
