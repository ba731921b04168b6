//! Learning-rate schedule: linear warm-up from zero, then cosine annealing.

use std::f64::consts::PI;

use crate::config::ScheduleSection;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScheduleSpec {
    pub base_lr: f64,
    pub lr_min: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
}

impl ScheduleSpec {
    pub fn from_config(s: &ScheduleSection) -> Self {
        Self {
            base_lr: s.base_lr,
            lr_min: s.lr_min,
            warmup_steps: s.warmup_epochs * s.steps_per_epoch,
            total_steps: s.epochs * s.steps_per_epoch,
        }
    }

    /// Index of the last optimizer step.
    pub fn final_step(&self) -> usize {
        self.total_steps.saturating_sub(1)
    }
}

/// Learning rate for the 0-based `step`: `base · step / W` during warm-up,
/// then `lr_min + (base − lr_min)(1 + cos(π t)) / 2` with `t` running from
/// 0 at step `W` to 1 at the final step.
pub fn lr_at(step: usize, spec: &ScheduleSpec) -> f64 {
    let w = spec.warmup_steps;
    if step < w {
        return spec.base_lr * step as f64 / w as f64;
    }
    let last = spec.final_step();
    if step >= last {
        return spec.lr_min;
    }
    let t = (step - w) as f64 / (last - w) as f64;
    spec.lr_min + (spec.base_lr - spec.lr_min) * 0.5 * (1.0 + (PI * t).cos())
}
