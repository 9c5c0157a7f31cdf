//! SGD and AdamW with mask-aware updates plus learning-rate schedules.
//!
//! The optimizer only ever touches the flat indices a plan marks trainable;
//! frozen scalars are skipped entirely, never multiplied by zero, so they
//! stay bit-identical to their initial values.

use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    #[default]
    AdamW,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct OptimizerSettings {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for OptimizerSettings {
    fn default() -> Self {
        OptimizerSettings {
            kind: OptimizerKind::AdamW,
            lr: 1e-3,
            weight_decay: 0.0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    #[default]
    Constant,
    Cosine,
}

/// Learning-rate schedule: linear warmup into either a constant rate or a
/// half-cosine decay to zero.
#[derive(Debug, Clone, Copy)]
pub struct Schedule {
    pub kind: ScheduleKind,
    pub base_lr: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
}

impl Schedule {
    pub fn lr_at(&self, step: usize) -> f64 {
        if self.warmup_steps > 0 && step < self.warmup_steps {
            return self.base_lr * (step + 1) as f64 / self.warmup_steps as f64;
        }
        match self.kind {
            ScheduleKind::Constant => self.base_lr,
            ScheduleKind::Cosine => {
                let span = self.total_steps.saturating_sub(self.warmup_steps).max(1);
                let t = (step - self.warmup_steps).min(span) as f64 / span as f64;
                self.base_lr * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
            }
        }
    }
}

#[derive(Debug, Clone)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
}

/// Mask-aware first-order optimizer. State is keyed by parameter name and
/// allocated lazily at full parameter size; only trainable indices move.
#[derive(Debug)]
pub struct Optimizer {
    pub settings: OptimizerSettings,
    step: usize,
    state: BTreeMap<String, Moments>,
}

impl Optimizer {
    pub fn new(settings: OptimizerSettings) -> Self {
        Optimizer { settings, step: 0, state: BTreeMap::new() }
    }

    /// Advance the shared step counter (bias correction) before applying
    /// per-parameter updates for this step.
    pub fn begin_step(&mut self) {
        self.step += 1;
    }

    /// Apply one update to the trainable indices of a parameter.
    /// `apply_decay` gates decoupled weight decay (weight matrices only).
    pub fn update(
        &mut self,
        key: &str,
        data: &mut [f64],
        grad: &[f64],
        trainable: &[usize],
        lr: f64,
        apply_decay: bool,
    ) {
        debug_assert_eq!(data.len(), grad.len());
        match self.settings.kind {
            OptimizerKind::Sgd => {
                for &i in trainable {
                    if apply_decay && self.settings.weight_decay > 0.0 {
                        data[i] -= lr * self.settings.weight_decay * data[i];
                    }
                    data[i] -= lr * grad[i];
                }
            }
            OptimizerKind::AdamW => {
                let s = self.settings;
                let mom = self.state.entry(key.to_string()).or_insert_with(|| Moments {
                    m: vec![0.0; data.len()],
                    v: vec![0.0; data.len()],
                });
                let bc1 = 1.0 - s.beta1.powi(self.step as i32);
                let bc2 = 1.0 - s.beta2.powi(self.step as i32);
                for &i in trainable {
                    if apply_decay && s.weight_decay > 0.0 {
                        data[i] -= lr * s.weight_decay * data[i];
                    }
                    let g = grad[i];
                    mom.m[i] = s.beta1 * mom.m[i] + (1.0 - s.beta1) * g;
                    mom.v[i] = s.beta2 * mom.v[i] + (1.0 - s.beta2) * g * g;
                    let m_hat = mom.m[i] / bc1;
                    let v_hat = mom.v[i] / bc2;
                    data[i] -= lr * m_hat / (v_hat.sqrt() + s.eps);
                }
            }
        }
    }
}
