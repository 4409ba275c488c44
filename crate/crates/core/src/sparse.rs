//! Block-wise N:M projections.
//!
//! A weight tensor is split into contiguous blocks of `m` entries along its
//! last axis. [`hard_threshold`] keeps the `n` largest magnitudes of every
//! block verbatim; [`soft_threshold`] keeps the same entries but shrinks every
//! magnitude by a per-block threshold, which makes the map continuous (it is
//! 2-Lipschitz in the max-norm).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// How the soft-thresholded weight is rescaled before use.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum RescaleRecipe {
    None,
    KeepL1,
    #[default]
    MinMse,
}

impl std::str::FromStr for RescaleRecipe {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Self::None),
            "keep_l1" | "keep-l1" => Ok(Self::KeepL1),
            "min_mse" | "min-mse" => Ok(Self::MinMse),
            other => Err(Error::Config(format!("unknown rescale recipe `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PruneConfig {
    pub n: usize,
    pub m: usize,
    /// Interpolates the soft threshold between the largest pruned magnitude
    /// (`gamma = 0`) and the smallest kept magnitude (`gamma = 1`).
    pub gamma: f64,
    pub rescale: RescaleRecipe,
}

impl Default for PruneConfig {
    fn default() -> Self {
        Self { n: 2, m: 4, gamma: 0.0, rescale: RescaleRecipe::MinMse }
    }
}

impl PruneConfig {
    pub fn new(n: usize, m: usize, gamma: f64, rescale: RescaleRecipe) -> Result<Self> {
        let cfg = Self { n, m, gamma, rescale };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn nm(n: usize, m: usize) -> Result<Self> {
        Self::new(n, m, 0.0, RescaleRecipe::MinMse)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n < 1 || self.n >= self.m {
            return Err(Error::Config(format!("need 1 <= n < m, got {}:{}", self.n, self.m)));
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(Error::Config(format!("gamma must lie in [0, 1], got {}", self.gamma)));
        }
        Ok(())
    }

    fn check_input(&self, w: &Tensor) -> Result<()> {
        self.validate()?;
        if !w.last_dim().is_multiple_of(self.m) {
            return Err(Error::Shape(format!("last axis {} is not divisible by block size {}", w.last_dim(), self.m)));
        }
        w.check_finite()
    }
}

/// A 0/1 support mask with an N:M block layout.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    shape: Vec<usize>,
    bits: Vec<bool>,
    m: usize,
}

impl Mask {
    /// Builds a mask, checking that every `m`-block holds at most `n` ones.
    pub fn new(shape: Vec<usize>, bits: Vec<bool>, n: usize, m: usize) -> Result<Self> {
        let len: usize = shape.iter().product();
        if len != bits.len() {
            return Err(Error::Shape(format!("mask shape {shape:?} vs {} bits", bits.len())));
        }
        if m == 0 || shape.last().is_none_or(|d| d % m != 0) {
            return Err(Error::Shape(format!("mask last axis not divisible by {m}")));
        }
        if let Some(b) = bits.chunks(m).position(|blk| blk.iter().filter(|&&x| x).count() > n) {
            return Err(Error::Invariant(format!("block {b} has more than {n} ones")));
        }
        Ok(Self { shape, bits, m })
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn block_size(&self) -> usize {
        self.m
    }

    pub fn count_ones(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    /// Number of positions where the two masks differ.
    pub fn xor_count(&self, other: &Mask) -> Result<usize> {
        if self.shape != other.shape {
            return Err(Error::Shape(format!("{:?} vs {:?}", self.shape, other.shape)));
        }
        Ok(self.bits.iter().zip(&other.bits).filter(|(a, b)| a != b).count())
    }

    /// 64-bit FNV-1a digest of the packed bits.
    pub fn hash64(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for chunk in self.bits.chunks(8) {
            let byte = chunk.iter().enumerate().fold(0u8, |acc, (i, &b)| acc | ((b as u8) << i));
            h ^= byte as u64;
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
        h
    }

    /// Zeroes every entry of `w` outside the mask.
    pub fn apply(&self, w: &Tensor) -> Result<Tensor> {
        if w.shape() != self.shape.as_slice() {
            return Err(Error::Shape(format!("{:?} vs {:?}", w.shape(), self.shape)));
        }
        let data = w.data().iter().zip(&self.bits).map(|(&v, &b)| if b { v } else { 0.0 }).collect();
        Tensor::new(self.shape.clone(), data)
    }
}

/// Dense values together with the N:M support they were projected onto.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskedTensor {
    pub values: Tensor,
    pub mask: Mask,
}

impl MaskedTensor {
    pub fn is_identically_zero(&self) -> bool {
        self.values.data().iter().all(|&v| v == 0.0)
    }
}

/// Per block: indices ordered by descending magnitude, lowest index first on ties.
fn rank_block(block: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..block.len()).collect();
    idx.sort_by(|&a, &b| block[b].abs().total_cmp(&block[a].abs()).then(a.cmp(&b)));
    idx
}

fn mask_bits(w: &Tensor, cfg: &PruneConfig) -> Vec<bool> {
    let mut bits = vec![false; w.len()];
    for (blk, out) in w.data().chunks(cfg.m).zip(bits.chunks_mut(cfg.m)) {
        for &i in rank_block(blk).iter().take(cfg.n) {
            out[i] = true;
        }
    }
    bits
}

/// Support of the hard-thresholded tensor.
pub fn mask_of(w: &Tensor, cfg: &PruneConfig) -> Result<Mask> {
    cfg.check_input(w)?;
    Mask::new(w.shape().to_vec(), mask_bits(w, cfg), cfg.n, cfg.m)
}

pub fn hard_threshold(w: &Tensor, cfg: &PruneConfig) -> Result<MaskedTensor> {
    let mask = mask_of(w, cfg)?;
    let values = mask.apply(w)?;
    Ok(MaskedTensor { values, mask })
}

fn shrink(v: f64, t: f64) -> f64 {
    let mag = v.abs() - t;
    if mag > 0.0 {
        mag.copysign(v)
    } else {
        0.0
    }
}

pub fn soft_threshold(w: &Tensor, cfg: &PruneConfig) -> Result<MaskedTensor> {
    let mask = mask_of(w, cfg)?;
    soft_threshold_on(w, &mask, cfg)
}

/// Soft-thresholds `w` onto a given support.
///
/// The threshold interpolates between the largest magnitude outside the mask
/// and the smallest magnitude inside it. With `mask == mask_of(w)` this is
/// exactly [`soft_threshold`]; with a stale mask it evaluates the projection
/// under that mask.
pub fn soft_threshold_on(w: &Tensor, mask: &Mask, cfg: &PruneConfig) -> Result<MaskedTensor> {
    cfg.check_input(w)?;
    if mask.shape() != w.shape() || mask.block_size() != cfg.m {
        return Err(Error::Shape(format!("mask {:?} does not fit {:?}", mask.shape(), w.shape())));
    }
    let mut out = vec![0.0; w.len()];
    for ((blk, bits), dst) in w.data().chunks(cfg.m).zip(mask.bits().chunks(cfg.m)).zip(out.chunks_mut(cfg.m)) {
        let pruned_max = blk.iter().zip(bits).filter(|(_, &b)| !b).map(|(v, _)| v.abs()).fold(0.0f64, f64::max);
        let kept_min = blk.iter().zip(bits).filter(|(_, &b)| b).map(|(v, _)| v.abs()).fold(f64::INFINITY, f64::min);
        let t = if kept_min.is_finite() { (1.0 - cfg.gamma) * pruned_max + cfg.gamma * kept_min } else { pruned_max };
        for ((d, &v), &b) in dst.iter_mut().zip(blk).zip(bits) {
            if b {
                *d = shrink(v, t);
            }
        }
    }
    Ok(MaskedTensor { values: Tensor::new(w.shape().to_vec(), out)?, mask: mask.clone() })
}

/// Fraction of mask positions that changed.
pub fn flip_rate(prev: &Mask, curr: &Mask) -> Result<f64> {
    let flips = prev.xor_count(curr)?;
    if prev.is_empty() {
        return Ok(0.0);
    }
    Ok(flips as f64 / prev.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn v(xs: &[f64]) -> Tensor {
        Tensor::vector(xs.to_vec())
    }

    fn one_two() -> PruneConfig {
        PruneConfig::nm(1, 2).unwrap()
    }

    fn bits(mask: &Mask) -> Vec<u8> {
        mask.bits().iter().map(|&b| b as u8).collect()
    }

    #[test]
    fn config_validation() {
        assert!(PruneConfig::nm(0, 4).is_err());
        assert!(PruneConfig::nm(4, 4).is_err());
        assert!(PruneConfig::new(2, 4, 1.5, RescaleRecipe::None).is_err());
        let d = PruneConfig::default();
        assert_eq!((d.n, d.m, d.gamma), (2, 4, 0.0));
    }

    #[test]
    fn hard_threshold_examples() {
        let c = one_two();
        assert_eq!(hard_threshold(&v(&[1.0, 0.999]), &c).unwrap().values.data(), &[1.0, 0.0]);
        assert_eq!(hard_threshold(&v(&[0.999, 1.0]), &c).unwrap().values.data(), &[0.0, 1.0]);
        let c24 = PruneConfig::default();
        let z = hard_threshold(&v(&[0.0; 4]), &c24).unwrap();
        assert_eq!(z.values.data(), &[0.0; 4]);
        assert!(z.mask.count_ones() <= 2);
        let h = hard_threshold(&v(&[1.0, 2.0, 3.0, 4.0]), &c24).unwrap();
        assert_eq!(h.values.data(), &[0.0, 0.0, 3.0, 4.0]);
    }

    #[test]
    fn rejects_bad_input() {
        let c = PruneConfig::default();
        assert!(matches!(hard_threshold(&v(&[1.0, 2.0, 3.0]), &c), Err(Error::Shape(_))));
        assert!(matches!(soft_threshold(&v(&[1.0, f64::NAN, 3.0, 4.0]), &c), Err(Error::NonFinite { index: 1 })));
        // 2x6: 12 elements but rows straddle blocks
        let w = Tensor::matrix(2, 6, vec![1.0; 12]).unwrap();
        assert!(mask_of(&w, &c).is_err());
    }

    #[test]
    fn soft_threshold_examples() {
        let c = PruneConfig::default();
        assert_eq!(soft_threshold(&v(&[1.0, 2.0, 3.0, 4.0]), &c).unwrap().values.data(), &[0.0, 0.0, 1.0, 2.0]);
        assert_eq!(soft_threshold(&v(&[0.2, 0.1]), &one_two()).unwrap().values.data(), &[0.2 - 0.1, 0.0]);
        for gamma in [0.0, 0.3, 1.0] {
            let cg = PruneConfig::new(2, 4, gamma, RescaleRecipe::None).unwrap();
            assert_eq!(soft_threshold(&v(&[0.7; 4]), &cg).unwrap().values.data(), &[0.0; 4]);
        }
        assert_eq!(soft_threshold(&v(&[-4.0, 3.0, -2.0, 1.0]), &c).unwrap().values.data(), &[-2.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn gamma_one_uses_smallest_kept() {
        let c = PruneConfig::new(2, 4, 1.0, RescaleRecipe::None).unwrap();
        assert_eq!(soft_threshold(&v(&[1.0, 2.0, 3.0, 4.0]), &c).unwrap().values.data(), &[0.0, 0.0, 0.0, 1.0]);
        let c = PruneConfig::new(2, 4, 0.5, RescaleRecipe::None).unwrap();
        assert_eq!(soft_threshold(&v(&[1.0, 2.0, 3.0, 4.0]), &c).unwrap().values.data(), &[0.0, 0.0, 0.5, 1.5]);
    }

    #[test]
    fn mask_examples() {
        let c = PruneConfig::default();
        assert_eq!(bits(&mask_of(&v(&[1.0, 2.0, 3.0, 4.0]), &c).unwrap()), [0, 0, 1, 1]);
        assert_eq!(bits(&mask_of(&v(&[5.0; 4]), &c).unwrap()), [1, 1, 0, 0]);
        assert_eq!(bits(&mask_of(&v(&[0.2, 0.1]), &one_two()).unwrap()), [1, 0]);
    }

    #[test]
    fn mask_rejects_overfull_blocks() {
        assert!(Mask::new(vec![4], vec![true, true, true, false], 2, 4).is_err());
        assert!(Mask::new(vec![6], vec![false; 6], 2, 4).is_err());
    }

    #[test]
    fn flip_rate_examples() {
        let m = |b: [bool; 4]| Mask::new(vec![4], b.to_vec(), 2, 4).unwrap();
        let a = m([true, false, true, false]);
        assert_eq!(flip_rate(&a, &a).unwrap(), 0.0);
        assert_eq!(flip_rate(&a, &m([false, true, false, true])).unwrap(), 1.0);
        assert_eq!(flip_rate(&a, &m([true, false, false, true])).unwrap(), 0.5);
        let other = Mask::new(vec![8], vec![false; 8], 2, 4).unwrap();
        assert!(flip_rate(&a, &other).is_err());
    }

    #[test]
    fn hash_distinguishes_masks() {
        let a = Mask::new(vec![4], vec![true, false, true, false], 2, 4).unwrap();
        let b = Mask::new(vec![4], vec![true, false, false, true], 2, 4).unwrap();
        assert_ne!(a.hash64(), b.hash64());
        assert_eq!(a.hash64(), a.clone().hash64());
    }

    #[test]
    fn soft_on_stale_mask_matches_definition() {
        let c = PruneConfig::default();
        let w = v(&[1.0, 2.0, 3.0, 4.0]);
        let stale = Mask::new(vec![4], vec![true, false, false, true], 2, 4).unwrap();
        // pruned max = 3, so entry 0 (|1| < 3) vanishes and 4 shrinks to 1
        let s = soft_threshold_on(&w, &stale, &c).unwrap();
        assert_eq!(s.values.data(), &[0.0, 0.0, 0.0, 1.0]);
        let fresh = mask_of(&w, &c).unwrap();
        assert_eq!(soft_threshold_on(&w, &fresh, &c).unwrap(), soft_threshold(&w, &c).unwrap());
    }

    fn nm_cfg() -> impl Strategy<Value = PruneConfig> {
        (2usize..=8, 0.0f64..=1.0).prop_flat_map(|(m, gamma)| {
            (1..m).prop_map(move |n| PruneConfig::new(n, m, gamma, RescaleRecipe::None).unwrap())
        })
    }

    fn tensor_for(cfg: PruneConfig) -> impl Strategy<Value = (PruneConfig, Tensor)> {
        (1usize..6, 1usize..4).prop_flat_map(move |(blocks, rows)| {
            proptest::collection::vec(-5.0f64..5.0, rows * blocks * cfg.m)
                .prop_map(move |d| (cfg, Tensor::matrix(rows, blocks * cfg.m, d).unwrap()))
        })
    }

    proptest! {
        #[test]
        fn projections_are_nm_valid((cfg, w) in nm_cfg().prop_flat_map(tensor_for)) {
            for out in [hard_threshold(&w, &cfg).unwrap(), soft_threshold(&w, &cfg).unwrap()] {
                for blk in out.values.data().chunks(cfg.m) {
                    prop_assert!(blk.iter().filter(|&&x| x != 0.0).count() <= cfg.n);
                }
                for (&val, &bit) in out.values.data().iter().zip(out.mask.bits()) {
                    prop_assert!(bit || val == 0.0);
                }
            }
        }

        #[test]
        fn soft_preserves_sign_and_shrinks((cfg, w) in nm_cfg().prop_flat_map(tensor_for)) {
            let s = soft_threshold(&w, &cfg).unwrap();
            for (&o, &i) in s.values.data().iter().zip(w.data()) {
                prop_assert!(o == 0.0 || o.signum() == i.signum());
                prop_assert!(o.abs() <= i.abs());
            }
        }

        #[test]
        fn support_is_idempotent((cfg, w) in nm_cfg().prop_flat_map(tensor_for)) {
            let h = hard_threshold(&w, &cfg).unwrap();
            let kept_nonzero = h.values.data().iter().zip(h.mask.bits()).all(|(&v, &b)| !b || v != 0.0);
            prop_assume!(kept_nonzero);
            prop_assert_eq!(mask_of(&h.values, &cfg).unwrap(), h.mask);
        }

        #[test]
        fn permutation_equivariance(block in proptest::array::uniform4(-3.0f64..3.0), seed in any::<u64>()) {
            let cfg = PruneConfig::default();
            let mut sorted: Vec<f64> = block.iter().map(|v| v.abs()).collect();
            sorted.sort_by(f64::total_cmp);
            prop_assume!(sorted[1] != sorted[2]);
            let mut perm = [0usize, 1, 2, 3];
            // Fisher-Yates driven by the seed bits
            let mut s = seed;
            for i in (1..4).rev() {
                let j = (s % (i as u64 + 1)) as usize;
                s /= 7;
                perm.swap(i, j);
            }
            let permuted: Vec<f64> = perm.iter().map(|&p| block[p]).collect();
            for f in [hard_threshold, soft_threshold] {
                let direct = f(&Tensor::vector(permuted.clone()), &cfg).unwrap();
                let base = f(&Tensor::vector(block.to_vec()), &cfg).unwrap();
                let after: Vec<f64> = perm.iter().map(|&p| base.values.data()[p]).collect();
                prop_assert_eq!(direct.values.data(), after.as_slice());
            }
        }
    }
}
