//! Parameter update rules. Both minimize the loss held in the gradients,
//! so maximizing an objective means feeding it in negated.

use serde::{Deserialize, Serialize};

use super::{ParamStore, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OptimizerConfig {
    Sgd { lr: f64 },
    Adam { lr: f64, beta1: f64, beta2: f64, eps: f64 },
}

impl OptimizerConfig {
    pub fn adam(lr: f64) -> Self {
        OptimizerConfig::Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn lr(&self) -> f64 {
        match *self {
            OptimizerConfig::Sgd { lr } | OptimizerConfig::Adam { lr, .. } => lr,
        }
    }
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self::adam(1e-3)
    }
}

pub struct Optimizer {
    config: OptimizerConfig,
    moments: Vec<(Tensor, Tensor)>,
    steps: u64,
}

impl Optimizer {
    pub fn new(config: OptimizerConfig) -> Self {
        Self {
            config,
            moments: Vec::new(),
            steps: 0,
        }
    }

    pub fn config(&self) -> &OptimizerConfig {
        &self.config
    }

    /// Applies one update from the accumulated gradients, then zeroes them.
    pub fn step(&mut self, store: &mut ParamStore) {
        self.steps += 1;
        match self.config {
            OptimizerConfig::Sgd { lr } => {
                for p in store.params_mut() {
                    for (v, g) in p.value.data_mut().iter_mut().zip(p.grad.data()) {
                        *v -= lr * g;
                    }
                }
            }
            OptimizerConfig::Adam {
                lr,
                beta1,
                beta2,
                eps,
            } => {
                if self.moments.len() != store.len() {
                    self.moments = store
                        .iter()
                        .map(|(_, p)| (Tensor::zeros(p.value.shape()), Tensor::zeros(p.value.shape())))
                        .collect();
                }
                let t = self.steps as i32;
                let c1 = 1.0 - beta1.powi(t);
                let c2 = 1.0 - beta2.powi(t);
                for (p, (m, v)) in store.params_mut().iter_mut().zip(&mut self.moments) {
                    let values = p.value.data_mut();
                    for (i, g) in p.grad.data().iter().enumerate() {
                        let mi = &mut m.data_mut()[i];
                        *mi = beta1 * *mi + (1.0 - beta1) * g;
                        let mhat = *mi / c1;
                        let vi = &mut v.data_mut()[i];
                        *vi = beta2 * *vi + (1.0 - beta2) * g * g;
                        let vhat = *vi / c2;
                        values[i] -= lr * mhat / (vhat.sqrt() + eps);
                    }
                }
            }
        }
        store.zero_grad();
    }
}
