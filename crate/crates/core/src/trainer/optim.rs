//! First-order optimizers and learning-rate schedules.

use ndarray::Zip;
use serde::{Deserialize, Serialize};

use crate::encoder::{ParamKind, ParameterSet};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum OptimizerConfig {
    Sgd { lr: f64, momentum: f64 },
    Adam { lr: f64, beta1: f64, beta2: f64, eps: f64 },
}

impl OptimizerConfig {
    pub fn adam(lr: f64) -> Self {
        OptimizerConfig::Adam { lr, beta1: 0.9, beta2: 0.98, eps: 1e-9 }
    }

    pub fn lr(&self) -> f64 {
        match *self {
            OptimizerConfig::Sgd { lr, .. } | OptimizerConfig::Adam { lr, .. } => lr,
        }
    }

    pub fn with_lr(self, lr: f64) -> Self {
        match self {
            OptimizerConfig::Sgd { momentum, .. } => OptimizerConfig::Sgd { lr, momentum },
            OptimizerConfig::Adam { beta1, beta2, eps, .. } => OptimizerConfig::Adam { lr, beta1, beta2, eps },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LrSchedule {
    Constant,
    /// Linear warmup to the base rate, then inverse square-root decay.
    Warmup { steps: usize },
}

impl LrSchedule {
    /// Multiplier for the zero-based `step`.
    pub fn factor(&self, step: usize) -> f64 {
        match *self {
            LrSchedule::Constant => 1.0,
            LrSchedule::Warmup { steps } => {
                let w = steps.max(1) as f64;
                let t = (step + 1) as f64;
                (t / w).min((w / t).sqrt())
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct Optimizer {
    config: OptimizerConfig,
    schedule: LrSchedule,
    first: ParameterSet,
    second: ParameterSet,
    steps: usize,
}

impl Optimizer {
    pub fn new(config: OptimizerConfig, schedule: LrSchedule, params: &ParameterSet) -> Self {
        Self { config, schedule, first: params.zeros_like(), second: params.zeros_like(), steps: 0 }
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn current_lr(&self) -> f64 {
        self.config.lr() * self.schedule.factor(self.steps)
    }

    /// Applies one update to the trainable entries of `params`.
    pub fn step(&mut self, params: &mut ParameterSet, grads: &ParameterSet) {
        let lr = self.current_lr();
        self.steps += 1;
        let t = self.steps as i32;
        for idx in 0..params.len() {
            if params.entries()[idx].kind != ParamKind::Weight {
                continue;
            }
            let g = grads.value(idx);
            match self.config {
                OptimizerConfig::Sgd { momentum, .. } => {
                    let buf = self.first.value_mut(idx);
                    Zip::from(&mut *buf).and(g).for_each(|b, &g| *b = momentum * *b + g);
                    if lr != 0.0 {
                        Zip::from(params.value_mut(idx)).and(&*buf).for_each(|p, &b| *p -= lr * b);
                    }
                }
                OptimizerConfig::Adam { beta1, beta2, eps, .. } => {
                    let m = self.first.value_mut(idx);
                    Zip::from(&mut *m).and(g).for_each(|m, &g| *m = beta1 * *m + (1.0 - beta1) * g);
                    let v = self.second.value_mut(idx);
                    Zip::from(&mut *v).and(g).for_each(|v, &g| *v = beta2 * *v + (1.0 - beta2) * g * g);
                    if lr != 0.0 {
                        let c1 = 1.0 - beta1.powi(t);
                        let c2 = 1.0 - beta2.powi(t);
                        Zip::from(params.value_mut(idx))
                            .and(self.first.value(idx))
                            .and(self.second.value(idx))
                            .for_each(|p, &m, &v| *p -= lr * (m / c1) / ((v / c2).sqrt() + eps));
                    }
                }
            }
        }
    }
}

/// Rescales `grads` so their global norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_grad_norm(grads: &mut ParameterSet, max_norm: f64) -> f64 {
    let norm = grads.values().map(|g| g * g).sum::<f64>().sqrt();
    if max_norm > 0.0 && norm > max_norm {
        grads.scale(max_norm / norm);
    }
    norm
}
