//! Unbiased randomized 2:4 sparsification of gradient tensors.
//!
//! Each 4-block `a` is replaced by a block with at most two nonzeros whose
//! expectation is `a`. Entry `i` is kept with inclusion probability `π_i` and
//! rescaled to `a_i / π_i`. Choosing `π_i ∝ |a_i|` (capped at one, with the
//! leftover budget redistributed over the rest) minimizes the total variance
//! `Σ a_i² (1/π_i − 1)` under the constraint `Σ π_i = 2`.
//!
//! The joint distribution over the six index pairs is built by systematic
//! sampling over the cumulative inclusion probabilities, which realizes the
//! marginals exactly and is enumerated in a fixed pair order.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::sparse::{Mask, MaskedTensor};
use crate::tensor::Tensor;

pub const BLOCK: usize = 4;
pub const KEEP: usize = 2;

/// The six index pairs of a 4-block, in sampling order.
pub const PAIRS: [(usize, usize); 6] = [(0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3)];

/// A deterministic random stream keyed by `(seed, tensor, step, block)`.
///
/// The key is the full 256-bit ChaCha seed, so distinct keys never share a
/// stream and evaluation order cannot change results.
pub struct RngStream {
    rng: ChaCha8Rng,
}

impl RngStream {
    pub fn new(seed: u64, tensor: u64, step: u64, block: u64) -> Self {
        let mut key = [0u8; 32];
        for (chunk, word) in key.chunks_mut(8).zip([seed, tensor, step, block]) {
            chunk.copy_from_slice(&word.to_le_bytes());
        }
        Self { rng: ChaCha8Rng::from_seed(key) }
    }

    /// Uniform draw in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.rng.random::<f64>()
    }
}

/// Stable 64-bit id for a named tensor (FNV-1a).
pub fn tensor_id(name: &str) -> u64 {
    name.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Provenance {
    /// Input already had at most two nonzeros per block; returned unchanged.
    Exact,
    Sampled,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SparsifiedGradient {
    pub values: MaskedTensor,
    pub provenance: Provenance,
}

/// Variance-minimizing inclusion probabilities summing to [`KEEP`].
///
/// Requires more than two nonzero entries.
pub fn inclusion_probabilities(a: &[f64; BLOCK]) -> [f64; BLOCK] {
    let mut pi = [0.0; BLOCK];
    let mut active: Vec<usize> = (0..BLOCK).filter(|&i| a[i] != 0.0).collect();
    let mut budget = KEEP as f64;
    loop {
        let total: f64 = active.iter().map(|&i| a[i].abs()).sum();
        let capped = active
            .iter()
            .copied()
            .filter(|&i| budget * a[i].abs() >= total)
            .max_by(|&x, &y| a[x].abs().total_cmp(&a[y].abs()).then(y.cmp(&x)));
        match capped {
            Some(i) if budget > 1.0 || active.len() == 1 => {
                pi[i] = 1.0;
                budget -= 1.0;
                active.retain(|&j| j != i);
                if budget <= 0.0 || active.is_empty() {
                    return pi;
                }
            }
            _ => {
                for &i in &active {
                    pi[i] = budget * a[i].abs() / total;
                }
                return pi;
            }
        }
    }
}

/// Joint pair probabilities realizing `pi` as marginals, in [`PAIRS`] order.
pub fn pair_probabilities(pi: &[f64; BLOCK]) -> [f64; 6] {
    let mut cum = [0.0; BLOCK + 1];
    for i in 0..BLOCK {
        cum[i + 1] = cum[i] + pi[i];
    }
    let overlap = |lo1: f64, hi1: f64, lo2: f64, hi2: f64| (hi1.min(hi2).min(1.0) - lo1.max(lo2).max(0.0)).max(0.0);
    let mut out = [0.0; 6];
    for (p, &(i, j)) in out.iter_mut().zip(PAIRS.iter()) {
        // i is hit by u in [0, 1), j by u + 1
        *p = overlap(cum[i], cum[i + 1], cum[j] - 1.0, cum[j + 1] - 1.0);
    }
    out
}

/// Sparsifies one 4-block.
pub fn mvue_block(a: &[f64; BLOCK], rng: &mut RngStream) -> ([f64; BLOCK], Provenance) {
    if a.iter().filter(|&&v| v != 0.0).count() <= KEEP {
        return (*a, Provenance::Exact);
    }
    let pi = inclusion_probabilities(a);
    let probs = pair_probabilities(&pi);
    let u = rng.uniform();
    let mut acc = 0.0;
    let mut chosen = None;
    for (k, &p) in probs.iter().enumerate() {
        if p <= 0.0 {
            continue;
        }
        acc += p;
        chosen = Some(k);
        if u < acc {
            break;
        }
    }
    let (i, j) = PAIRS[chosen.expect("pair probabilities sum to one")];
    let mut out = [0.0; BLOCK];
    out[i] = a[i] / pi[i];
    out[j] = a[j] / pi[j];
    (out, Provenance::Sampled)
}

/// Block-wise MVUE over the last axis of `g`.
pub fn mvue_tensor(g: &Tensor, seed: u64, tensor: u64, step: u64) -> Result<SparsifiedGradient> {
    if !g.last_dim().is_multiple_of(BLOCK) {
        return Err(Error::Shape(format!("last axis {} is not divisible by {BLOCK}", g.last_dim())));
    }
    g.check_finite()?;
    let mut out = vec![0.0; g.len()];
    let mut provenance = Provenance::Exact;
    for (b, (src, dst)) in g.data().chunks(BLOCK).zip(out.chunks_mut(BLOCK)).enumerate() {
        let block: [f64; BLOCK] = src.try_into().expect("chunk of BLOCK");
        let mut rng = RngStream::new(seed, tensor, step, b as u64);
        let (vals, prov) = mvue_block(&block, &mut rng);
        dst.copy_from_slice(&vals);
        if prov == Provenance::Sampled {
            provenance = Provenance::Sampled;
        }
    }
    let bits = out.iter().map(|&v| v != 0.0).collect();
    let mask = Mask::new(g.shape().to_vec(), bits, KEEP, BLOCK)?;
    Ok(SparsifiedGradient { values: MaskedTensor { values: Tensor::new(g.shape().to_vec(), out)?, mask }, provenance })
}
