use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::{ExperimentConfig, Mode, Task};
use super::tasks::{check_widths, TaskData};
use crate::diagnostics::{aod, delta_f1_f2, mask_flips, predicted_aod, RunRecord, StepTrace, Summary};
use crate::engine::{checkpoint, Network, Optimizer, Parameter, Pass};
use crate::error::{Error, Result};
use crate::rescale::{compute_beta, ScaleRegistry};
use crate::sparse::{hard_threshold, mask_of, soft_threshold, soft_threshold_on, Mask, MaskedTensor, PruneConfig};
use crate::tensor::Tensor;

/// Trajectory of the two-parameter problem `min (w₁ − w₂)²`.
#[derive(Debug)]
pub struct ToyRun {
    pub record: RunRecord,
    /// Dense weights `w_1, w_2, …` (one more entry than steps).
    pub weights: Vec<[f64; 2]>,
    /// Effective weights `w̃_k` used at each step.
    pub effective: Vec<[f64; 2]>,
    pub registry: ScaleRegistry,
}

/// A completed training run together with its final state.
pub struct TrainedRun {
    pub record: RunRecord,
    pub network: Network,
    pub optimizer: Optimizer,
}

fn toy_objective(w: &[f64]) -> f64 {
    (w[0] - w[1]).powi(2)
}

struct ToyProjector<'a> {
    cfg: &'a ExperimentConfig,
    prune: PruneConfig,
    registry: ScaleRegistry,
}

impl ToyProjector<'_> {
    fn beta(&self, w: &Tensor) -> Result<f64> {
        if self.cfg.rescale_freeze {
            self.registry.get_or_freeze("toy", w, &self.prune)
        } else {
            Ok(compute_beta(w, &self.prune)?.value)
        }
    }

    fn project(&self, w: &Tensor, mask: Option<&Mask>) -> Result<MaskedTensor> {
        match (self.cfg.mode, mask) {
            (Mode::Dense, _) => Ok(MaskedTensor { values: w.clone(), mask: mask_of(w, &self.prune)? }),
            (Mode::HardSte | Mode::SrSte, None) => hard_threshold(w, &self.prune),
            (Mode::HardSte | Mode::SrSte, Some(m)) => Ok(MaskedTensor { values: m.apply(w)?, mask: m.clone() }),
            (Mode::SSte, m) => {
                let s = match m {
                    Some(m) => soft_threshold_on(w, m, &self.prune)?,
                    None => soft_threshold(w, &self.prune)?,
                };
                let beta = self.beta(w)?;
                Ok(MaskedTensor { values: s.values.map(|v| v * beta), mask: s.mask })
            }
        }
    }
}

/// Gradient descent with the straight-through estimator on `(w₁ − w₂)²`.
pub fn run_toy(cfg: &ExperimentConfig) -> Result<ToyRun> {
    if cfg.task != Task::Toy {
        return Err(Error::Config("run_toy needs task = toy".into()));
    }
    cfg.validate()?;
    let proj = ToyProjector { cfg, prune: cfg.prune()?, registry: ScaleRegistry::new() };
    let mut opt = Optimizer::new(cfg.optimizer_kind(), cfg.schedule());
    let mut param = Parameter::new("toy", Tensor::vector(cfg.toy_start.to_vec()));
    let mut weights = vec![cfg.toy_start];
    let mut effective = Vec::new();
    let mut traces = Vec::new();
    let lambda = cfg.srste_lambda_w.unwrap_or(0.0);

    for k in 0..cfg.train_steps {
        let w_k = param.w.clone();
        let cur = proj.project(&w_k, None)?;
        let wt = cur.values.data();
        let f_k = toy_objective(wt);
        let d = 2.0 * (wt[0] - wt[1]);
        let grad = Tensor::vector(vec![d, -d]);
        param.grad = grad.clone();
        if cfg.mode == Mode::SrSte {
            for ((g, &w), &kept) in param.grad.data_mut().iter_mut().zip(w_k.data()).zip(cur.mask.bits()) {
                if !kept {
                    *g += lambda * w;
                }
            }
        }
        opt.update([&mut param])?;
        let w_k1 = param.w.clone();
        let next = proj.project(&w_k1, None)?;
        let f_k1 = toy_objective(next.values.data());

        let mut t = StepTrace::new(k, f_k);
        t.loss = Some(f_k);
        t.aod = Some(aod(f_k, f_k1));
        t.predicted_aod = Some(predicted_aod(&[grad], std::slice::from_ref(&w_k), std::slice::from_ref(&w_k1))?);
        t.flips = cur.mask.xor_count(&next.mask)?;
        t.flip_rate = Some(t.flips as f64 / cur.mask.len() as f64);
        t.mask_hashes = vec![cur.mask.hash64()];
        if cfg.mode != Mode::Dense {
            let stale = proj.project(&w_k1, Some(&cur.mask))?;
            t.delta_f1 = Some(f_k - f_k1);
            t.delta_f2 = Some(f_k - toy_objective(stale.values.data()));
        }
        traces.push(t);
        effective.push([wt[0], wt[1]]);
        weights.push([w_k1.data()[0], w_k1.data()[1]]);
    }
    let summary = Summary::from_traces(&traces, None);
    let record = RunRecord { config: serde_json::to_value(cfg)?, traces, summary };
    Ok(ToyRun { record, weights, effective, registry: proj.registry })
}

/// Options that do not change the run's results.
#[derive(Debug, Clone, Default)]
pub struct TrainOptions<'a> {
    /// Resume from a checkpoint directory.
    pub resume: Option<&'a Path>,
    /// Stop after this many total steps (defaults to the config's `train_steps`).
    pub stop_at: Option<u64>,
}

pub fn run_training(cfg: &ExperimentConfig) -> Result<TrainedRun> {
    run_training_with(cfg, &TrainOptions::default())
}

pub fn run_training_with(cfg: &ExperimentConfig, opts: &TrainOptions<'_>) -> Result<TrainedRun> {
    if cfg.task == Task::Toy {
        return Err(Error::Config("use run_toy for the toy problem".into()));
    }
    cfg.validate()?;
    check_widths(cfg)?;
    let data = TaskData::build(cfg.task, cfg.seed)?;
    let mut net = data.network(&cfg.sparse_settings()?, cfg.seed)?;
    let mut opt = Optimizer::new(cfg.optimizer_kind(), cfg.schedule());
    let start = match opts.resume {
        Some(dir) => checkpoint::load(dir, &mut net, &mut opt)?,
        None => 0,
    };
    let end = opts.stop_at.unwrap_or(cfg.train_steps).min(cfg.train_steps);
    let sparse = cfg.mode != Mode::Dense;
    let mut traces = Vec::new();

    for k in start..end {
        let batch = data.train_batch(k, cfg.train_batch_size, cfg.seed);
        let traced = k % cfg.trace_stride == 0 || k + 1 == cfg.train_steps;
        let before = if traced {
            let w_k = net.param_values();
            let masks_k = net.tracked_masks()?;
            let f_k = net.loss_eval(&batch)?;
            net.forward_backward(&batch, &Pass::eval())?;
            Some((w_k, masks_k, f_k, net.grads()))
        } else {
            None
        };

        let out = net.forward_backward(&batch, &Pass::train(cfg.seed, k))?;
        if !out.loss.is_finite() {
            return Err(Error::Invariant(format!("training loss diverged at step {k}")));
        }
        net.step(&mut opt)?;

        let mut t = StepTrace::new(k, out.loss);
        if let Some((w_k, masks_k, f_k, grad)) = before {
            let w_k1 = net.param_values();
            let masks_k1 = net.tracked_masks()?;
            let f_k1 = net.loss_eval(&batch)?;
            t.loss = Some(f_k);
            t.aod = Some(aod(f_k, f_k1));
            t.predicted_aod = Some(predicted_aod(&grad, &w_k, &w_k1)?);
            let (flips, total) = mask_flips(&masks_k, &masks_k1)?;
            if total > 0 {
                t.flips = flips;
                t.flip_rate = Some(flips as f64 / total as f64);
            }
            t.mask_hashes = masks_k1.iter().flatten().map(Mask::hash64).collect();
            if sparse {
                let (d1, d2) = delta_f1_f2(&net, &w_k, &w_k1, &masks_k, &masks_k1, &batch)?;
                t.delta_f1 = Some(d1);
                t.delta_f2 = Some(d2);
            }
        }
        traces.push(t);
    }
    let val = net.loss_eval(&data.val)?;
    let summary = Summary::from_traces(&traces, Some(val));
    let record = RunRecord { config: serde_json::to_value(cfg)?, traces, summary };
    Ok(TrainedRun { record, network: net, optimizer: opt })
}

/// One line of an ablation summary table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub label: String,
    pub final_train_loss: f64,
    pub val_loss: Option<f64>,
    pub mean_flip_rate: Option<f64>,
    pub final_flip_rate: Option<f64>,
}

pub fn check_matrix(configs: &[ExperimentConfig]) -> Result<()> {
    let Some(first) = configs.first() else {
        return Err(Error::Empty("ablation matrix"));
    };
    if configs.iter().any(|c| c.task != first.task || c.seed != first.seed) {
        return Err(Error::Config("all configs in a matrix must share task and seed".into()));
    }
    configs.iter().try_for_each(ExperimentConfig::validate)
}

fn row_of(cfg: &ExperimentConfig, summary: &Summary) -> AblationRow {
    AblationRow {
        label: cfg.display_label(),
        final_train_loss: summary.final_train_loss,
        val_loss: summary.val_loss,
        mean_flip_rate: summary.mean_flip_rate,
        final_flip_rate: summary.flip_rate_by_phase.map(|p| p.late),
    }
}

/// One finished run of an ablation matrix.
#[derive(Debug)]
pub struct AblationRun {
    pub row: AblationRow,
    pub record: RunRecord,
    pub scales: ScaleRegistry,
}

/// Runs every config (in parallel threads) and returns the results in input order.
pub fn run_ablation_matrix(configs: &[ExperimentConfig]) -> Result<Vec<AblationRun>> {
    check_matrix(configs)?;
    let results: Vec<Result<(RunRecord, ScaleRegistry)>> = std::thread::scope(|s| {
        let handles: Vec<_> = configs
            .iter()
            .map(|c| {
                s.spawn(move || -> Result<(RunRecord, ScaleRegistry)> {
                    if c.task == Task::Toy {
                        let r = run_toy(c)?;
                        Ok((r.record, r.registry))
                    } else {
                        let r = run_training(c)?;
                        let scales = ScaleRegistry::from_json(&r.network.registry().to_json()?, c.rescale_recipe)?;
                        Ok((r.record, scales))
                    }
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("run thread panicked")).collect()
    });
    configs
        .iter()
        .zip(results)
        .map(|(c, r)| {
            let (record, scales) = r?;
            Ok(AblationRun { row: row_of(c, &record.summary), record, scales })
        })
        .collect()
}
