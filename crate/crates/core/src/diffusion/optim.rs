use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::params::{ParamId, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Adam,
    SgdMomentum,
}

/// First-order optimizer over a [`ParamStore`]. Parameters whose tensor
/// does not require gradients are never written.
#[derive(Clone, Debug)]
pub struct Optimizer {
    pub kind: OptimizerKind,
    pub lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: u64,
    m: BTreeMap<ParamId, Vec<f64>>,
    v: BTreeMap<ParamId, Vec<f64>>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64) -> Self {
        Self {
            kind,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &[(ParamId, Vec<f64>)]) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step.min(i32::MAX as u64) as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step.min(i32::MAX as u64) as i32);
        for (id, grad) in grads {
            if !store.get(*id).requires_grad() {
                continue;
            }
            let m = self.m.entry(*id).or_insert_with(|| vec![0.0; grad.len()]);
            let data = store.get_mut(*id).data_mut();
            match self.kind {
                OptimizerKind::SgdMomentum => {
                    for ((w, g), m) in data.iter_mut().zip(grad).zip(m.iter_mut()) {
                        *m = self.beta1 * *m + g;
                        *w -= self.lr * *m;
                    }
                }
                OptimizerKind::Adam => {
                    let v = self.v.entry(*id).or_insert_with(|| vec![0.0; grad.len()]);
                    for (((w, g), m), v) in data.iter_mut().zip(grad).zip(m.iter_mut()).zip(v.iter_mut()) {
                        *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                        *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                        *w -= self.lr * (*m / bc1) / ((*v / bc2).sqrt() + self.eps);
                    }
                }
            }
        }
    }
}
