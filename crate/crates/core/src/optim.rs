//! SGD with momentum and Adam, configured separately for network
//! parameters (weights and biases) and mask parameters.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::param::{Param, Role};
use crate::tensor::Precision;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum OptimKind {
    Sgd {
        #[serde(default)]
        momentum: f64,
    },
    Adam {
        #[serde(default = "default_beta1")]
        beta1: f64,
        #[serde(default = "default_beta2")]
        beta2: f64,
        #[serde(default = "default_eps")]
        eps: f64,
    },
}

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}

impl OptimKind {
    pub fn sgd(momentum: f64) -> Self {
        OptimKind::Sgd { momentum }
    }

    pub fn adam() -> Self {
        OptimKind::Adam {
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
        }
    }
}

/// Defaults to Adam at `1e-2` without weight decay.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GroupConfig {
    pub optimizer: OptimKind,
    pub lr: f64,
    pub weight_decay: f64,
}

impl Default for GroupConfig {
    fn default() -> Self {
        GroupConfig::adam(1e-2)
    }
}

impl GroupConfig {
    pub fn sgd(lr: f64, momentum: f64, weight_decay: f64) -> Self {
        GroupConfig {
            optimizer: OptimKind::sgd(momentum),
            lr,
            weight_decay,
        }
    }

    pub fn adam(lr: f64) -> Self {
        GroupConfig {
            optimizer: OptimKind::adam(),
            lr,
            weight_decay: 0.0,
        }
    }
}

/// One configuration for weights and biases, one for mask parameters.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    pub weights: GroupConfig,
    pub scores: GroupConfig,
}

impl OptimConfig {
    pub fn uniform(group: GroupConfig) -> Self {
        OptimConfig {
            weights: group,
            scores: group,
        }
    }

    pub fn group(&self, role: Role) -> &GroupConfig {
        match role {
            Role::Weight | Role::Bias => &self.weights,
            Role::Score => &self.scores,
        }
    }

    pub fn group_mut(&mut self, role: Role) -> &mut GroupConfig {
        match role {
            Role::Weight | Role::Bias => &mut self.weights,
            Role::Score => &mut self.scores,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Slot {
    Empty,
    Momentum(Vec<f64>),
    Adam { m: Vec<f64>, v: Vec<f64>, step: u64 },
}

#[derive(Debug, Clone)]
pub struct Optimizer {
    pub config: OptimConfig,
    /// Multiplier applied to every group's learning rate (learning-rate decay).
    pub lr_factor: f64,
    slots: Vec<Slot>,
    precision: Precision,
}

impl Optimizer {
    pub fn new(config: OptimConfig, precision: Precision) -> Self {
        Optimizer {
            config,
            lr_factor: 1.0,
            slots: Vec::new(),
            precision,
        }
    }

    pub fn slots(&self) -> &[Slot] {
        &self.slots
    }

    pub fn set_slots(&mut self, slots: Vec<Slot>) {
        self.slots = slots;
    }

    /// Drops all momentum / moment estimates.
    pub fn reset_state(&mut self) {
        self.slots.clear();
    }

    /// Applies one update to every trainable parameter and clears its gradient.
    pub fn step(&mut self, params: &mut [Param]) -> Result<()> {
        if let Some(p) = params.iter().find(|p| p.trainable && p.grad.is_none()) {
            return Err(Error::Contract(format!(
                "parameter {} has no gradient for this step",
                p.name
            )));
        }
        if self.slots.len() < params.len() {
            self.slots.resize(params.len(), Slot::Empty);
        }
        for (p, slot) in params.iter_mut().zip(self.slots.iter_mut()) {
            let Some(grad) = p.grad.take() else {
                continue;
            };
            if !p.trainable {
                continue;
            }
            let group = *self.config.group(p.role);
            let lr = group.lr * self.lr_factor;
            let wd = group.weight_decay;
            let w = p.value.data_mut();
            if grad.len() != w.len() {
                return Err(Error::Dimension(format!(
                    "gradient of length {} for parameter {} with {} elements",
                    grad.len(),
                    p.name,
                    w.len()
                )));
            }
            match group.optimizer {
                OptimKind::Sgd { momentum } => {
                    if !matches!(slot, Slot::Momentum(_)) {
                        *slot = Slot::Momentum(vec![0.0; w.len()]);
                    }
                    let Slot::Momentum(buf) = slot else { unreachable!() };
                    for ((wi, gi), vi) in w.iter_mut().zip(&grad).zip(buf.iter_mut()) {
                        let g = gi + wd * *wi;
                        *vi = self.precision.round(momentum * *vi + g);
                        *wi = self.precision.round(*wi - lr * *vi);
                    }
                }
                OptimKind::Adam { beta1, beta2, eps } => {
                    if !matches!(slot, Slot::Adam { .. }) {
                        *slot = Slot::Adam {
                            m: vec![0.0; w.len()],
                            v: vec![0.0; w.len()],
                            step: 0,
                        };
                    }
                    let Slot::Adam { m, v, step } = slot else { unreachable!() };
                    *step += 1;
                    let c1 = 1.0 - beta1.powi(*step as i32);
                    let c2 = 1.0 - beta2.powi(*step as i32);
                    for i in 0..w.len() {
                        let g = grad[i] + wd * w[i];
                        m[i] = self.precision.round(beta1 * m[i] + (1.0 - beta1) * g);
                        v[i] = self.precision.round(beta2 * v[i] + (1.0 - beta2) * g * g);
                        let mhat = m[i] / c1;
                        let vhat = v[i] / c2;
                        w[i] = self.precision.round(w[i] - lr * mhat / (vhat.sqrt() + eps));
                    }
                }
            }
        }
        Ok(())
    }
}
