use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lowprec::{fake_quantize, FloatFormat};
use crate::mvue::{mvue_tensor, tensor_id};
use crate::rescale::{compute_beta, ScaleRegistry};
use crate::sparse::{hard_threshold, mask_of, soft_threshold, soft_threshold_on, Mask, PruneConfig};
use crate::tensor::Tensor;

/// How a linear layer turns its dense master weight into the weight it multiplies with.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerMode {
    Dense,
    HardSte,
    SrSte { lambda_w: f64 },
    SSte,
}

impl LayerMode {
    pub fn is_sparse(&self) -> bool {
        !matches!(self, LayerMode::Dense)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Parameter {
    pub id: String,
    pub w: Tensor,
    pub grad: Tensor,
}

impl Parameter {
    pub fn new(id: impl Into<String>, w: Tensor) -> Self {
        let grad = Tensor::zeros(w.shape().to_vec());
        Self { id: id.into(), w, grad }
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }
}

/// Where MVUE sparsification is applied in the backward pass.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MvuePlacement {
    /// `∇W = MVUE(∇Zᵀ) X`.
    pub grad_z: bool,
    /// `∇X = ∇Z MVUE(S(W)ᵀ)ᵀ`.
    pub weight: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fp8Config {
    pub forward: FloatFormat,
    pub backward: FloatFormat,
}

/// Settings that distinguish a training pass from a pure evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Pass {
    pub seed: u64,
    pub step: u64,
    /// Enables MVUE sampling. Evaluation passes never sample.
    pub stochastic: bool,
}

impl Pass {
    pub fn eval() -> Self {
        Self { seed: 0, step: 0, stochastic: false }
    }

    pub fn train(seed: u64, step: u64) -> Self {
        Self { seed, step, stochastic: true }
    }
}

/// The weight a layer actually multiplies with, and the support it came from.
#[derive(Debug, Clone, PartialEq)]
pub struct EffectiveWeight {
    pub values: Tensor,
    pub mask: Option<Mask>,
    pub beta: f64,
}

/// What the forward pass leaves behind for the backward pass.
#[derive(Debug, Clone)]
pub struct LinearCache {
    x: Tensor,
    w: Tensor,
    mask: Option<Mask>,
}

impl LinearCache {
    pub fn weight(&self) -> &Tensor {
        &self.w
    }

    pub fn mask(&self) -> Option<&Mask> {
        self.mask.as_ref()
    }
}

/// `z = x · w̃ᵀ` with `w: (out, in)`; N:M blocks run along `in`.
#[derive(Debug, Clone)]
pub struct SparseLinearLayer {
    pub weight: Parameter,
    pub mode: LayerMode,
    pub prune: PruneConfig,
    /// Designated layers may carry a sparse mode and have their masks tracked.
    pub designated: bool,
    /// Recompute `beta` on every forward instead of freezing it (ablation only).
    pub dynamic_beta: bool,
    pub mvue: MvuePlacement,
    pub fp8: Option<Fp8Config>,
    registry: Arc<ScaleRegistry>,
}

impl SparseLinearLayer {
    pub fn new(
        weight: Parameter,
        mode: LayerMode,
        prune: PruneConfig,
        designated: bool,
        registry: Arc<ScaleRegistry>,
    ) -> Result<Self> {
        prune.validate()?;
        if mode.is_sparse() && !designated {
            return Err(Error::Config(format!("layer `{}` is not designated for sparsity", weight.id)));
        }
        if designated && !weight.w.last_dim().is_multiple_of(prune.m) {
            return Err(Error::Shape(format!(
                "layer `{}` fan-in {} is not divisible by {}",
                weight.id,
                weight.w.last_dim(),
                prune.m
            )));
        }
        Ok(Self {
            weight,
            mode,
            prune,
            designated,
            dynamic_beta: false,
            mvue: MvuePlacement::default(),
            fp8: None,
            registry,
        })
    }

    pub fn id(&self) -> &str {
        &self.weight.id
    }

    pub fn registry(&self) -> &Arc<ScaleRegistry> {
        &self.registry
    }

    pub fn set_registry(&mut self, registry: Arc<ScaleRegistry>) {
        self.registry = registry;
    }

    fn beta_for(&self, w: &Tensor) -> Result<f64> {
        if self.dynamic_beta {
            Ok(compute_beta(w, &self.prune)?.value)
        } else {
            self.registry.get_or_freeze(&self.weight.id, w, &self.prune)
        }
    }

    /// Projection of an arbitrary master weight `w`, optionally onto a fixed support.
    pub fn effective_from(&self, w: &Tensor, mask: Option<&Mask>) -> Result<EffectiveWeight> {
        match self.mode {
            LayerMode::Dense => Ok(EffectiveWeight { values: w.clone(), mask: None, beta: 1.0 }),
            LayerMode::HardSte | LayerMode::SrSte { .. } => {
                let projected = match mask {
                    Some(m) => crate::sparse::MaskedTensor { values: m.apply(w)?, mask: m.clone() },
                    None => hard_threshold(w, &self.prune)?,
                };
                Ok(EffectiveWeight { values: projected.values, mask: Some(projected.mask), beta: 1.0 })
            }
            LayerMode::SSte => {
                let s = match mask {
                    Some(m) => soft_threshold_on(w, m, &self.prune)?,
                    None => soft_threshold(w, &self.prune)?,
                };
                let beta = self.beta_for(w)?;
                Ok(EffectiveWeight { values: s.values.map(|v| v * beta), mask: Some(s.mask), beta })
            }
        }
    }

    pub fn effective_weight(&self) -> Result<EffectiveWeight> {
        self.effective_from(&self.weight.w, None)
    }

    /// `mask_of(w)` for designated layers, whatever the mode.
    pub fn tracked_mask(&self) -> Result<Option<Mask>> {
        self.tracked_mask_of(&self.weight.w)
    }

    pub fn tracked_mask_of(&self, w: &Tensor) -> Result<Option<Mask>> {
        if !self.designated {
            return Ok(None);
        }
        mask_of(w, &self.prune).map(Some)
    }

    fn check_pattern(&self, eff: &EffectiveWeight) -> Result<()> {
        if !self.mode.is_sparse() {
            return Ok(());
        }
        let n = self.prune.n;
        match eff.values.data().chunks(self.prune.m).position(|b| b.iter().filter(|&&v| v != 0.0).count() > n) {
            Some(b) => Err(Error::Invariant(format!("layer `{}`: block {b} violates {n}:{}", self.id(), self.prune.m))),
            None => Ok(()),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<(Tensor, LinearCache)> {
        let eff = self.effective_weight()?;
        self.forward_with(x, eff)
    }

    /// Forward with an explicit effective weight.
    pub fn forward_with(&self, x: &Tensor, eff: EffectiveWeight) -> Result<(Tensor, LinearCache)> {
        if x.cols() != eff.values.cols() {
            return Err(Error::Shape(format!(
                "layer `{}`: input width {} vs fan-in {}",
                self.id(),
                x.cols(),
                eff.values.cols()
            )));
        }
        self.check_pattern(&eff)?;
        let (x, w) = match &self.fp8 {
            Some(f) => (fake_quantize(x, &f.forward)?, fake_quantize(&eff.values, &f.forward)?),
            None => (x.clone(), eff.values),
        };
        let z = x.matmul_t(&w)?;
        Ok((z, LinearCache { x, w, mask: eff.mask }))
    }

    /// Returns `∇X` and accumulates `∇W` into the master weight's gradient (straight-through).
    pub fn backward(&mut self, cache: &LinearCache, grad_z: &Tensor, pass: &Pass) -> Result<Tensor> {
        if grad_z.rows() != cache.x.rows() || grad_z.cols() != cache.w.rows() {
            return Err(Error::Shape(format!(
                "layer `{}`: grad_z {:?} does not match cache",
                self.id(),
                grad_z.shape()
            )));
        }
        let sample = pass.stochastic && self.designated;
        let cast = |t: Tensor| -> Result<Tensor> {
            match &self.fp8 {
                Some(f) => fake_quantize(&t, &f.backward),
                None => Ok(t),
            }
        };

        // weight gradient: (∇Zᵀ)(out, batch) · X(batch, in)
        let mut gzt = grad_z.transpose();
        if sample && self.mvue.grad_z {
            let id = tensor_id(&format!("{}/grad_z", self.id()));
            gzt = mvue_tensor(&gzt, pass.seed, id, pass.step)?.values.values;
        }
        let gzt = cast(gzt)?;
        let gw = gzt.matmul(&cache.x)?;
        self.weight.grad.add_assign(&gw)?;

        // input gradient: ∇Z(batch, out) · W̃(out, in)
        let mut w = cache.w.clone();
        if sample && self.mvue.weight {
            let id = tensor_id(&format!("{}/weight", self.id()));
            w = mvue_tensor(&w.transpose(), pass.seed, id, pass.step)?.values.values.transpose();
        }
        let gz = cast(grad_z.clone())?;
        gz.matmul(&w)
    }

    /// Adds the SR-STE decay `λ_W · (w ⊙ m̄)` to the accumulated gradient.
    pub fn apply_regularizer(&mut self) -> Result<()> {
        let LayerMode::SrSte { lambda_w } = self.mode else {
            return Ok(());
        };
        let mask = mask_of(&self.weight.w, &self.prune)?;
        for ((g, &w), &kept) in self.weight.grad.data_mut().iter_mut().zip(self.weight.w.data()).zip(mask.bits()) {
            if !kept {
                *g += lambda_w * w;
            }
        }
        Ok(())
    }
}
