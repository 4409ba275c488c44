//! Per-tensor scale factors for soft-thresholded weights.
//!
//! The effective sparse weight is `beta * soft_threshold(w)`. `beta` is
//! computed once per parameter, on the first forward pass, and then frozen.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::sparse::{soft_threshold, MaskedTensor, PruneConfig, RescaleRecipe};
use crate::tensor::Tensor;

/// A scale together with whether it came from a degenerate (all-zero) input.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Beta {
    pub value: f64,
    pub degenerate: bool,
}

impl Beta {
    const DEGENERATE: Beta = Beta { value: 1.0, degenerate: true };

    fn ok(value: f64) -> Self {
        Beta { value, degenerate: false }
    }
}

/// Minimizer of `‖w − β·s‖²`, i.e. `wᵀs / ‖s‖²`.
pub fn beta_min_mse(w: &Tensor, s: &MaskedTensor) -> Beta {
    let norm_sq = s.values.norm_sq();
    if norm_sq == 0.0 {
        return Beta::DEGENERATE;
    }
    Beta::ok(w.dot(&s.values) / norm_sq)
}

/// `‖w‖₁ / ‖s‖₁`.
pub fn beta_keep_l1(w: &Tensor, s: &MaskedTensor) -> Beta {
    let l1 = |t: &Tensor| t.data().iter().map(|v| v.abs()).sum::<f64>();
    let s1 = l1(&s.values);
    if s1 == 0.0 {
        return Beta::DEGENERATE;
    }
    Beta::ok(l1(w) / s1)
}

/// Computes `beta` for `w` under `cfg.rescale` without touching any registry.
pub fn compute_beta(w: &Tensor, cfg: &PruneConfig) -> Result<Beta> {
    if cfg.rescale == RescaleRecipe::None {
        return Ok(Beta::ok(1.0));
    }
    let s = soft_threshold(w, cfg)?;
    Ok(match cfg.rescale {
        RescaleRecipe::None => unreachable!(),
        RescaleRecipe::KeepL1 => beta_keep_l1(w, &s),
        RescaleRecipe::MinMse => beta_min_mse(w, &s),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScaleEntry {
    pub beta: f64,
    pub frozen: bool,
    pub recipe: RescaleRecipe,
    pub degenerate: bool,
}

/// Frozen per-parameter scales, keyed by parameter id.
///
/// The first call to [`ScaleRegistry::get_or_freeze`] for a key wins; every
/// later call (from any thread) observes the same value.
#[derive(Debug, Default)]
pub struct ScaleRegistry {
    entries: Mutex<BTreeMap<String, ScaleEntry>>,
}

impl ScaleRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get_or_freeze(&self, param_id: &str, w: &Tensor, cfg: &PruneConfig) -> Result<f64> {
        let mut entries = self.entries.lock().expect("scale registry poisoned");
        if let Some(e) = entries.get(param_id) {
            return Ok(e.beta);
        }
        let beta = compute_beta(w, cfg)?;
        entries.insert(
            param_id.to_owned(),
            ScaleEntry { beta: beta.value, frozen: true, recipe: cfg.rescale, degenerate: beta.degenerate },
        );
        Ok(beta.value)
    }

    pub fn get(&self, param_id: &str) -> Option<ScaleEntry> {
        self.entries.lock().expect("scale registry poisoned").get(param_id).copied()
    }

    pub fn len(&self) -> usize {
        self.entries.lock().expect("scale registry poisoned").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn snapshot(&self) -> BTreeMap<String, ScaleEntry> {
        self.entries.lock().expect("scale registry poisoned").clone()
    }

    /// `{param_id: beta}`.
    pub fn betas(&self) -> BTreeMap<String, f64> {
        self.snapshot().into_iter().map(|(k, e)| (k, e.beta)).collect()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.betas())?)
    }

    /// Restores a registry from `{param_id: beta}`; every entry is frozen.
    pub fn from_json(json: &str, recipe: RescaleRecipe) -> Result<Self> {
        let betas: BTreeMap<String, f64> = serde_json::from_str(json)?;
        let entries = betas
            .into_iter()
            .map(|(k, beta)| (k, ScaleEntry { beta, frozen: true, recipe, degenerate: false }))
            .collect();
        Ok(Self { entries: Mutex::new(entries) })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path, recipe: RescaleRecipe) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?, recipe)
    }
}
