//! Seeded synthetic datasets and the network each task trains.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::config::{ExperimentConfig, Task};
use crate::engine::{Activation, Batch, LossKind, Network, SparseSettings, Targets};
use crate::error::{Error, Result};
use crate::mvue::tensor_id;
use crate::sparse::{hard_threshold, PruneConfig};
use crate::tensor::Tensor;

/// Independent seed for a named purpose.
pub fn derive_seed(seed: u64, tag: &str) -> u64 {
    let mut z = seed ^ tensor_id(tag);
    // splitmix64 finalizer
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub const REGRESSION_IN: usize = 16;
pub const REGRESSION_OUT: usize = 4;
pub const CLASSIFICATION_IN: usize = 32;
pub const CLASSIFICATION_HIDDEN: usize = 64;
pub const VOCAB: usize = 16;
pub const CONTEXT: usize = 4;

/// Train and validation splits of one task.
#[derive(Debug, Clone)]
pub struct TaskData {
    pub task: Task,
    pub train: Batch,
    pub val: Batch,
}

fn gaussian(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let data = (0..rows * cols).map(|_| StandardNormal.sample(rng)).collect();
    Tensor::matrix(rows, cols, data).expect("matching shape")
}

fn sparse_teacher(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Result<Tensor> {
    Ok(hard_threshold(&gaussian(rng, rows, cols), &PruneConfig::default())?.values)
}

fn gather(batch: &Batch, idx: &[usize]) -> Batch {
    let cols = batch.x.cols();
    let mut x = Vec::with_capacity(idx.len() * cols);
    for &i in idx {
        x.extend_from_slice(batch.x.row(i));
    }
    let y = match &batch.y {
        Targets::Values(t) => {
            let c = t.cols();
            let mut out = Vec::with_capacity(idx.len() * c);
            for &i in idx {
                out.extend_from_slice(t.row(i));
            }
            Targets::Values(Tensor::matrix(idx.len(), c, out).expect("matching shape"))
        }
        Targets::Classes(l) => Targets::Classes(idx.iter().map(|&i| l[i]).collect()),
    };
    Batch { x: Tensor::matrix(idx.len(), cols, x).expect("matching shape"), y }
}

fn regression(seed: u64) -> Result<TaskData> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "regression/teacher"));
    let teacher = sparse_teacher(&mut rng, REGRESSION_OUT, REGRESSION_IN)?;
    let split = |tag: &str, n: usize| -> Result<Batch> {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, tag));
        let x = gaussian(&mut rng, n, REGRESSION_IN);
        let y = x.matmul_t(&teacher)?;
        Ok(Batch { x, y: Targets::Values(y) })
    };
    Ok(TaskData {
        task: Task::SyntheticRegression,
        train: split("regression/train", 256)?,
        val: split("regression/val", 256)?,
    })
}

fn classification(seed: u64) -> Result<TaskData> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "classification/teacher"));
    let hidden = sparse_teacher(&mut rng, CLASSIFICATION_HIDDEN, CLASSIFICATION_IN)?;
    let readout = gaussian(&mut rng, 1, CLASSIFICATION_HIDDEN);
    let score = |x: &Tensor| -> Result<Vec<f64>> {
        let h = x.matmul_t(&hidden)?.map(|v| v.max(0.0));
        Ok(h.matmul_t(&readout)?.into_data())
    };
    // threshold at the median score of a large reference sample
    let mut ref_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "classification/reference"));
    let mut reference = score(&gaussian(&mut ref_rng, 4096, CLASSIFICATION_IN))?;
    reference.sort_by(f64::total_cmp);
    let threshold = reference[reference.len() / 2];
    let split = |tag: &str, n: usize| -> Result<Batch> {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, tag));
        let x = gaussian(&mut rng, n, CLASSIFICATION_IN);
        let labels = score(&x)?.into_iter().map(|s| usize::from(s > threshold)).collect();
        Ok(Batch { x, y: Targets::Classes(labels) })
    };
    Ok(TaskData {
        task: Task::SyntheticClassification,
        train: split("classification/train", 1024)?,
        val: split("classification/val", 512)?,
    })
}

/// A seeded second-order Markov source over [`VOCAB`] symbols with a few
/// likely successors per context.
struct MarkovSource {
    table: Vec<Vec<f64>>,
}

impl MarkovSource {
    fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "charlm/source"));
        let table = (0..VOCAB * VOCAB)
            .map(|_| {
                let mut row = vec![0.02; VOCAB];
                for _ in 0..3 {
                    row[rng.random_range(0..VOCAB)] += rng.random::<f64>() + 0.5;
                }
                let sum: f64 = row.iter().sum();
                row.into_iter().map(|p| p / sum).collect()
            })
            .collect();
        Self { table }
    }

    fn generate(&self, rng: &mut ChaCha8Rng, len: usize) -> Vec<usize> {
        let mut out = vec![rng.random_range(0..VOCAB), rng.random_range(0..VOCAB)];
        while out.len() < len {
            let row = &self.table[out[out.len() - 2] * VOCAB + out[out.len() - 1]];
            let u: f64 = rng.random();
            let mut acc = 0.0;
            let next = row.iter().position(|p| {
                acc += p;
                u < acc
            });
            out.push(next.unwrap_or(VOCAB - 1));
        }
        out
    }
}

fn char_windows(text: &[usize]) -> Batch {
    let n = text.len() - CONTEXT;
    let mut x = vec![0.0; n * CONTEXT * VOCAB];
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        for (p, &c) in text[i..i + CONTEXT].iter().enumerate() {
            x[i * CONTEXT * VOCAB + p * VOCAB + c] = 1.0;
        }
        labels.push(text[i + CONTEXT]);
    }
    Batch { x: Tensor::matrix(n, CONTEXT * VOCAB, x).expect("matching shape"), y: Targets::Classes(labels) }
}

fn char_lm(seed: u64) -> TaskData {
    let source = MarkovSource::new(seed);
    let split = |tag: &str, len: usize| {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, tag));
        char_windows(&source.generate(&mut rng, len + CONTEXT))
    };
    TaskData { task: Task::CharLmFfn, train: split("charlm/train", 4096), val: split("charlm/val", 1024) }
}

impl TaskData {
    pub fn build(task: Task, seed: u64) -> Result<Self> {
        match task {
            Task::Toy => Err(Error::Config("the toy problem has no dataset".into())),
            Task::SyntheticRegression => regression(seed),
            Task::SyntheticClassification => classification(seed),
            Task::CharLmFfn => Ok(char_lm(seed)),
        }
    }

    pub fn network(&self, settings: &SparseSettings, seed: u64) -> Result<Network> {
        let init = derive_seed(seed, "init");
        match self.task {
            Task::Toy => Err(Error::Config("the toy problem has no network".into())),
            Task::SyntheticRegression => {
                Network::mlp(&[REGRESSION_IN, REGRESSION_OUT], Activation::Relu, LossKind::Mse, true, settings, init)
            }
            Task::SyntheticClassification => Network::mlp(
                &[CLASSIFICATION_IN, CLASSIFICATION_HIDDEN, CLASSIFICATION_HIDDEN, 2],
                Activation::Relu,
                LossKind::SoftmaxCrossEntropy,
                false,
                settings,
                init,
            ),
            Task::CharLmFfn => Network::ffn_stack(
                CONTEXT * VOCAB,
                32,
                64,
                2,
                VOCAB,
                Activation::Gelu,
                LossKind::SoftmaxCrossEntropy,
                settings,
                init,
            ),
        }
    }

    /// Training batch for `step`; the full training set when `batch_size` is 0 or too large.
    pub fn train_batch(&self, step: u64, batch_size: usize, seed: u64) -> Batch {
        let n = self.train.len();
        if batch_size == 0 || batch_size >= n {
            return self.train.clone();
        }
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed ^ step.rotate_left(17), "batch"));
        let idx = sample(&mut rng, n, batch_size).into_vec();
        gather(&self.train, &idx)
    }
}

/// Checks that a config's task can be built with its pruning pattern.
pub fn check_widths(cfg: &ExperimentConfig) -> Result<()> {
    let m = cfg.prune_m;
    let widths: &[usize] = match cfg.task {
        Task::Toy => return Ok(()),
        Task::SyntheticRegression => &[REGRESSION_IN],
        Task::SyntheticClassification => &[CLASSIFICATION_IN, CLASSIFICATION_HIDDEN],
        Task::CharLmFfn => &[32, 64],
    };
    match widths.iter().find(|&&w| w % m != 0) {
        Some(w) => Err(Error::Shape(format!("layer width {w} is not divisible by m = {m}"))),
        None => Ok(()),
    }
}
