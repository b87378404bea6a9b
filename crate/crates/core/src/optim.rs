//! First-order update rules for the primary task.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::params::{GradientSet, ParamId, Params};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Momentum {
        #[serde(default = "default_momentum")]
        beta: f64,
    },
    Adagrad {
        #[serde(default = "default_adagrad_eps")]
        eps: f64,
    },
    Adam {
        #[serde(default = "default_beta1")]
        beta1: f64,
        #[serde(default = "default_beta2")]
        beta2: f64,
        #[serde(default = "default_adam_eps")]
        eps: f64,
    },
}

fn default_momentum() -> f64 {
    0.9
}

fn default_adagrad_eps() -> f64 {
    1e-10
}

fn default_beta1() -> f64 {
    0.9
}

fn default_beta2() -> f64 {
    0.999
}

fn default_adam_eps() -> f64 {
    1e-8
}

impl OptimizerKind {
    pub fn momentum() -> Self {
        OptimizerKind::Momentum { beta: default_momentum() }
    }

    pub fn adagrad() -> Self {
        OptimizerKind::Adagrad { eps: default_adagrad_eps() }
    }

    pub fn adam() -> Self {
        OptimizerKind::Adam {
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_adam_eps(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct OptimizerState {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub step: u64,
    first: BTreeMap<ParamId, Tensor>,
    second: BTreeMap<ParamId, Tensor>,
}

impl OptimizerState {
    pub fn new(kind: OptimizerKind, lr: f64) -> Self {
        OptimizerState {
            kind,
            lr,
            step: 0,
            first: BTreeMap::new(),
            second: BTreeMap::new(),
        }
    }

    pub fn step(&mut self, params: &mut Params, grads: &GradientSet) -> Result<()> {
        self.step += 1;
        let lr = self.lr;
        let t = self.step as i32;
        for (id, g) in grads.iter() {
            let w = params
                .get_mut(id)
                .ok_or_else(|| Error::InvalidArgument(format!("gradient for unknown parameter {id}")))?;
            if w.shape() != g.shape() {
                return Err(shape_err("optimizer_step", w.shape(), g.shape()));
            }
            let zeros = || Tensor::zeros(g.shape());
            let (w, g) = (w.data_mut(), g.data());
            match self.kind {
                OptimizerKind::Sgd => {
                    for (w, g) in w.iter_mut().zip(g) {
                        *w -= lr * g;
                    }
                }
                OptimizerKind::Momentum { beta } => {
                    let v = self.first.entry(*id).or_insert_with(zeros).data_mut();
                    for ((w, g), v) in w.iter_mut().zip(g).zip(v.iter_mut()) {
                        *v = beta * *v + g;
                        *w -= lr * *v;
                    }
                }
                OptimizerKind::Adagrad { eps } => {
                    let a = self.second.entry(*id).or_insert_with(zeros).data_mut();
                    for ((w, g), a) in w.iter_mut().zip(g).zip(a.iter_mut()) {
                        *a += g * g;
                        *w -= lr * g / (a.sqrt() + eps);
                    }
                }
                OptimizerKind::Adam { beta1, beta2, eps } => {
                    let (c1, c2) = (1.0 - beta1.powi(t), 1.0 - beta2.powi(t));
                    let m = self.first.entry(*id).or_insert_with(zeros).data_mut();
                    let v = self.second.entry(*id).or_insert_with(zeros).data_mut();
                    for (((w, g), m), v) in w.iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                        *m = beta1 * *m + (1.0 - beta1) * g;
                        *v = beta2 * *v + (1.0 - beta2) * g * g;
                        *w -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
                    }
                }
            }
            if w.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite { op: "optimizer_step" });
            }
        }
        Ok(())
    }
}

pub fn optimizer_step(params: &mut Params, grads: &GradientSet, state: &mut OptimizerState) -> Result<()> {
    state.step(params, grads)
}
