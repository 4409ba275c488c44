use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::layer::Parameter;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl OptimizerKind {
    pub fn adam() -> Self {
        OptimizerKind::Adam { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Learning rate `α_k` as a function of the (zero-based) step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LrSchedule {
    Constant {
        lr: f64,
    },
    /// Linear warmup to `peak`, then cosine decay to `floor` at step `total`.
    Cosine {
        peak: f64,
        floor: f64,
        warmup: u64,
        total: u64,
    },
}

impl LrSchedule {
    pub fn lr(&self, step: u64) -> f64 {
        match *self {
            LrSchedule::Constant { lr } => lr,
            LrSchedule::Cosine { peak, floor, warmup, total } => {
                if step < warmup {
                    return peak * (step + 1) as f64 / warmup as f64;
                }
                let span = total.saturating_sub(warmup).max(1);
                let progress = ((step - warmup) as f64 / span as f64).min(1.0);
                floor + 0.5 * (peak - floor) * (1.0 + (std::f64::consts::PI * progress).cos())
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Moments {
    pub first: Tensor,
    pub second: Tensor,
}

/// Updates dense master weights from their accumulated gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct Optimizer {
    pub kind: OptimizerKind,
    pub schedule: LrSchedule,
    /// Number of updates applied so far.
    pub step: u64,
    /// Adam moments keyed by parameter id.
    pub moments: BTreeMap<String, Moments>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, schedule: LrSchedule) -> Self {
        Self { kind, schedule, step: 0, moments: BTreeMap::new() }
    }

    pub fn sgd(lr: f64) -> Self {
        Self::new(OptimizerKind::Sgd, LrSchedule::Constant { lr })
    }

    pub fn current_lr(&self) -> f64 {
        self.schedule.lr(self.step)
    }

    pub fn update<'a>(&mut self, params: impl IntoIterator<Item = &'a mut Parameter>) -> Result<()> {
        let lr = self.current_lr();
        self.step += 1;
        for p in params {
            if !p.w.same_shape(&p.grad) {
                return Err(Error::Shape(format!("`{}`: gradient shape differs from weight", p.id)));
            }
            match self.kind {
                OptimizerKind::Sgd => {
                    if lr == 0.0 {
                        continue;
                    }
                    p.w.data_mut().iter_mut().zip(p.grad.data()).for_each(|(w, g)| *w -= lr * g);
                }
                OptimizerKind::Adam { beta1, beta2, eps } => {
                    let m = self.moments.entry(p.id.clone()).or_insert_with(|| Moments {
                        first: Tensor::zeros(p.w.shape().to_vec()),
                        second: Tensor::zeros(p.w.shape().to_vec()),
                    });
                    let t = self.step as i32;
                    let c1 = 1.0 - beta1.powi(t);
                    let c2 = 1.0 - beta2.powi(t);
                    let it =
                        p.w.data_mut()
                            .iter_mut()
                            .zip(p.grad.data())
                            .zip(m.first.data_mut().iter_mut().zip(m.second.data_mut()));
                    for ((w, &g), (m1, m2)) in it {
                        *m1 = beta1 * *m1 + (1.0 - beta1) * g;
                        *m2 = beta2 * *m2 + (1.0 - beta2) * g * g;
                        *w -= lr * (*m1 / c1) / ((*m2 / c2).sqrt() + eps);
                    }
                }
            }
        }
        Ok(())
    }
}
