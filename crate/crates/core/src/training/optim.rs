//! Parameter updates and step-size schedules.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::model::ParamStore;
use crate::numerics::Tensor;

/// Half-cosine decay from `base` to `floor` over `total` steps.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CosineSchedule {
    pub base: f64,
    pub floor: f64,
    pub total: usize,
}

impl CosineSchedule {
    pub fn lr(&self, step: usize) -> f64 {
        if self.total <= 1 {
            return self.base;
        }
        let t = (step.min(self.total - 1)) as f64 / (self.total - 1) as f64;
        self.floor + 0.5 * (self.base - self.floor) * (1.0 + (std::f64::consts::PI * t).cos())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    #[default]
    Sgd,
    Adam,
}

#[derive(Clone, Debug)]
pub enum Optimizer {
    Sgd,
    Adam {
        beta1: f64,
        beta2: f64,
        eps: f64,
        t: u64,
        m: BTreeMap<String, Vec<f64>>,
        v: BTreeMap<String, Vec<f64>>,
    },
}

impl Optimizer {
    pub fn new(kind: OptimizerKind) -> Self {
        match kind {
            OptimizerKind::Sgd => Optimizer::Sgd,
            OptimizerKind::Adam => Optimizer::Adam {
                beta1: 0.9,
                beta2: 0.999,
                eps: 1e-8,
                t: 0,
                m: BTreeMap::new(),
                v: BTreeMap::new(),
            },
        }
    }

    /// Applies one update; parameters without a gradient entry are left alone.
    pub fn step(&mut self, params: &mut ParamStore, grads: &BTreeMap<String, Tensor>, lr: f64) {
        match self {
            Optimizer::Sgd => {
                for (name, p) in params.iter_mut() {
                    if let Some(g) = grads.get(name) {
                        for (w, d) in p.data_mut().iter_mut().zip(g.data()) {
                            *w -= lr * d;
                        }
                    }
                }
            }
            Optimizer::Adam {
                beta1,
                beta2,
                eps,
                t,
                m,
                v,
            } => {
                *t += 1;
                let c1 = 1.0 - beta1.powi(*t as i32);
                let c2 = 1.0 - beta2.powi(*t as i32);
                for (name, p) in params.iter_mut() {
                    let Some(g) = grads.get(name) else { continue };
                    let mm = m
                        .entry(name.to_string())
                        .or_insert_with(|| vec![0.0; g.len()]);
                    let vv = v
                        .entry(name.to_string())
                        .or_insert_with(|| vec![0.0; g.len()]);
                    for (((w, d), mi), vi) in p
                        .data_mut()
                        .iter_mut()
                        .zip(g.data())
                        .zip(mm.iter_mut())
                        .zip(vv.iter_mut())
                    {
                        *mi = *beta1 * *mi + (1.0 - *beta1) * d;
                        *vi = *beta2 * *vi + (1.0 - *beta2) * d * d;
                        *w -= lr * (*mi / c1) / ((*vi / c2).sqrt() + *eps);
                    }
                }
            }
        }
    }
}
