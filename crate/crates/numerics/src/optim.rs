use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::params::ParamStore;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OptimizerKind {
    SgdMomentum { momentum: f64 },
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    #[serde(flatten)]
    pub kind: OptimizerKind,
    pub lr: f64,
    #[serde(default)]
    pub weight_decay: f64,
}

impl OptimizerConfig {
    pub fn sgd(lr: f64, momentum: f64) -> Self {
        Self {
            kind: OptimizerKind::SgdMomentum { momentum },
            lr,
            weight_decay: 0.0,
        }
    }

    pub fn adam(lr: f64) -> Self {
        Self {
            kind: OptimizerKind::Adam {
                beta1: 0.9,
                beta2: 0.999,
                eps: 1e-8,
            },
            lr,
            weight_decay: 0.0,
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
struct Slot {
    first: Vec<f64>,
    second: Vec<f64>,
}

/// Stateful first-order optimizer. Moment buffers are keyed by parameter name.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Optimizer {
    config: OptimizerConfig,
    steps: u64,
    slots: IndexMap<String, Slot>,
}

impl Optimizer {
    pub fn new(config: OptimizerConfig) -> Self {
        assert!(config.lr > 0.0, "learning rate must be positive");
        Self {
            config,
            steps: 0,
            slots: IndexMap::new(),
        }
    }

    pub fn config(&self) -> &OptimizerConfig {
        &self.config
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Applies one update to every parameter holding a gradient, then zeroes
    /// all gradients. Parameters without a gradient are left untouched.
    pub fn step(&mut self, params: &mut ParamStore) {
        self.steps += 1;
        let t = self.steps as i32;
        let OptimizerConfig {
            kind,
            lr,
            weight_decay,
        } = self.config;
        for (name, p) in params.iter_mut() {
            let Some(grad) = p.grad().map(<[f64]>::to_vec) else {
                continue;
            };
            let slot = self.slots.entry(name.clone()).or_default();
            if slot.first.len() != grad.len() {
                slot.first = vec![0.0; grad.len()];
                slot.second = vec![0.0; grad.len()];
            }
            let data = p.data_mut();
            match kind {
                OptimizerKind::SgdMomentum { momentum } => {
                    for i in 0..data.len() {
                        let g = grad[i] + weight_decay * data[i];
                        slot.first[i] = momentum * slot.first[i] + g;
                        data[i] -= lr * slot.first[i];
                    }
                }
                OptimizerKind::Adam { beta1, beta2, eps } => {
                    let c1 = 1.0 - beta1.powi(t);
                    let c2 = 1.0 - beta2.powi(t);
                    for i in 0..data.len() {
                        let g = grad[i] + weight_decay * data[i];
                        slot.first[i] = beta1 * slot.first[i] + (1.0 - beta1) * g;
                        slot.second[i] = beta2 * slot.second[i] + (1.0 - beta2) * g * g;
                        let m = slot.first[i] / c1;
                        let v = slot.second[i] / c2;
                        data[i] -= lr * m / (v.sqrt() + eps);
                    }
                }
            }
        }
        params.zero_grad();
    }
}
