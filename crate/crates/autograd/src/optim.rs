use std::collections::BTreeMap;
use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Optimizer families and their hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OptimizerKind {
    /// SGD with momentum and coupled (L2) weight decay.
    Sgd { momentum: f64, weight_decay: f64 },
    /// Adam with decoupled weight decay.
    AdamW { beta1: f64, beta2: f64, eps: f64, weight_decay: f64 },
}

impl OptimizerKind {
    pub fn sgd(momentum: f64, weight_decay: f64) -> Self {
        Self::Sgd { momentum, weight_decay }
    }

    pub fn adamw(weight_decay: f64) -> Self {
        Self::AdamW { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay }
    }

    pub fn weight_decay(&self) -> f64 {
        match self {
            Self::Sgd { weight_decay, .. } | Self::AdamW { weight_decay, .. } => *weight_decay,
        }
    }
}

/// Stateful optimizer over a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Optimizer {
    kind: OptimizerKind,
    first: BTreeMap<ParamId, Tensor>,
    second: BTreeMap<ParamId, Tensor>,
    steps: u64,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind) -> Self {
        Self { kind, first: BTreeMap::new(), second: BTreeMap::new(), steps: 0 }
    }

    pub fn kind(&self) -> &OptimizerKind {
        &self.kind
    }

    /// Number of updates applied so far.
    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &[(ParamId, Tensor)], lr: f64) {
        self.steps += 1;
        let t = self.steps as f64;
        for (id, g) in grads {
            if !store.get(*id).trainable {
                continue;
            }
            match self.kind {
                OptimizerKind::Sgd { momentum, weight_decay } => {
                    let w = store.value(*id).clone();
                    let mut d = g.clone();
                    if weight_decay != 0.0 {
                        for (dv, wv) in d.data_mut().iter_mut().zip(w.data()) {
                            *dv += weight_decay * wv;
                        }
                    }
                    if momentum != 0.0 {
                        match self.first.get_mut(id) {
                            Some(buf) => {
                                for (b, dv) in buf.data_mut().iter_mut().zip(d.data()) {
                                    *b = momentum * *b + dv;
                                }
                                d = buf.clone();
                            }
                            None => {
                                self.first.insert(*id, d.clone());
                            }
                        }
                    }
                    let wm = store.value_mut(*id);
                    for (wv, dv) in wm.data_mut().iter_mut().zip(d.data()) {
                        *wv -= lr * dv;
                    }
                }
                OptimizerKind::AdamW { beta1, beta2, eps, weight_decay } => {
                    let m = self.first.entry(*id).or_insert_with(|| Tensor::zeros(g.shape()));
                    for (mv, gv) in m.data_mut().iter_mut().zip(g.data()) {
                        *mv = beta1 * *mv + (1.0 - beta1) * gv;
                    }
                    let v = self.second.entry(*id).or_insert_with(|| Tensor::zeros(g.shape()));
                    for (vv, gv) in v.data_mut().iter_mut().zip(g.data()) {
                        *vv = beta2 * *vv + (1.0 - beta2) * gv * gv;
                    }
                    let (bc1, bc2) = (1.0 - beta1.powf(t), 1.0 - beta2.powf(t));
                    let m = &self.first[id];
                    let v = &self.second[id];
                    let wm = store.value_mut(*id);
                    for i in 0..wm.numel() {
                        let w = &mut wm.data_mut()[i];
                        *w -= lr * weight_decay * *w;
                        *w -= lr * (m.data()[i] / bc1) / ((v.data()[i] / bc2).sqrt() + eps);
                    }
                }
            }
        }
    }
}

/// Learning-rate schedules evaluated per epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LrSchedule {
    Constant,
    /// Cosine annealing from the base rate to `min_lr` over `period` epochs.
    Cosine { period: usize, min_lr: f64 },
}

impl LrSchedule {
    pub fn lr(&self, base: f64, epoch: usize) -> f64 {
        match self {
            Self::Constant => base,
            Self::Cosine { period, min_lr } => {
                let t = epoch.min(*period) as f64 / (*period).max(1) as f64;
                min_lr + 0.5 * (base - min_lr) * (1.0 + (PI * t).cos())
            }
        }
    }
}

/// Sums per-micro-batch gradients until an optimizer step is due.
///
/// Callers add the gradient of a *summed* per-sample loss together with the number of samples
/// it covers; [`GradAccumulator::take_mean`] returns the per-sample mean over everything added.
#[derive(Clone, Debug, Default)]
pub struct GradAccumulator {
    sums: BTreeMap<ParamId, Tensor>,
    samples: usize,
    micro_batches: usize,
}

impl GradAccumulator {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, grads: Vec<(ParamId, Tensor)>, samples: usize) {
        for (id, g) in grads {
            match self.sums.get_mut(&id) {
                Some(acc) => acc.add_assign(&g),
                None => {
                    self.sums.insert(id, g);
                }
            }
        }
        self.samples += samples;
        self.micro_batches += 1;
    }

    pub fn micro_batches(&self) -> usize {
        self.micro_batches
    }

    pub fn samples(&self) -> usize {
        self.samples
    }

    pub fn is_empty(&self) -> bool {
        self.micro_batches == 0
    }

    pub fn take_mean(&mut self) -> Vec<(ParamId, Tensor)> {
        let n = self.samples.max(1) as f64;
        let out = std::mem::take(&mut self.sums)
            .into_iter()
            .map(|(id, mut g)| {
                g.scale_assign(1.0 / n);
                (id, g)
            })
            .collect();
        self.samples = 0;
        self.micro_batches = 0;
        out
    }
}
