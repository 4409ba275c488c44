//! Training-dynamics instrumentation: amount of descent (AoD), its first-order
//! prediction, the mask-vs-weight decomposition, and flip-rate traces.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::engine::{Batch, Network};
use crate::error::{Error, Result};
use crate::sparse::Mask;
use crate::tensor::Tensor;

/// `F(w_k) − F(w_{k+1})`.
pub fn aod(f_k: f64, f_k1: f64) -> f64 {
    f_k - f_k1
}

/// `gradᵀ (w_k − w_{k+1})` summed over all parameter tensors.
pub fn predicted_aod(grad: &[Tensor], w_k: &[Tensor], w_k1: &[Tensor]) -> Result<f64> {
    if grad.len() != w_k.len() || w_k.len() != w_k1.len() {
        return Err(Error::Shape("gradient and weight lists differ in length".into()));
    }
    let mut total = 0.0;
    for ((g, a), b) in grad.iter().zip(w_k).zip(w_k1) {
        if !g.same_shape(a) || !a.same_shape(b) {
            return Err(Error::Shape(format!("{:?} / {:?} / {:?}", g.shape(), a.shape(), b.shape())));
        }
        total += g.data().iter().zip(a.data().iter().zip(b.data())).map(|(g, (a, b))| g * (a - b)).sum::<f64>();
    }
    Ok(total)
}

/// `(ΔF₁, ΔF₂)`: descent from updating weight and mask, and from updating the weight alone.
///
/// `ΔF₁ = F(w_k ⊙ m_k) − F(w_{k+1} ⊙ m_{k+1})`, `ΔF₂ = F(w_k ⊙ m_k) − F(w_{k+1} ⊙ m_k)`.
/// Soft-thresholded layers project onto the given mask with their frozen scale.
pub fn delta_f1_f2(
    net: &Network,
    w_k: &[Tensor],
    w_k1: &[Tensor],
    masks_k: &[Option<Mask>],
    masks_k1: &[Option<Mask>],
    batch: &Batch,
) -> Result<(f64, f64)> {
    let base = net.loss_at(w_k, Some(masks_k), batch)?;
    let both = net.loss_at(w_k1, Some(masks_k1), batch)?;
    let weight_only = if masks_k == masks_k1 { both } else { net.loss_at(w_k1, Some(masks_k), batch)? };
    Ok((base - both, base - weight_only))
}

/// Flips and positions over a set of per-layer masks (`None` entries are skipped).
pub fn mask_flips(prev: &[Option<Mask>], curr: &[Option<Mask>]) -> Result<(usize, usize)> {
    if prev.len() != curr.len() {
        return Err(Error::Shape("mask lists differ in length".into()));
    }
    let mut flips = 0;
    let mut total = 0;
    for (a, b) in prev.iter().zip(curr) {
        match (a, b) {
            (Some(a), Some(b)) => {
                flips += a.xor_count(b)?;
                total += a.len();
            }
            (None, None) => {}
            _ => return Err(Error::Shape("mask present on one side only".into())),
        }
    }
    Ok((flips, total))
}

/// Right-continuous empirical CDF evaluated at each distinct sample.
pub fn ecdf(samples: &[f64]) -> Result<Vec<(f64, f64)>> {
    if samples.is_empty() {
        return Err(Error::Empty("ecdf samples"));
    }
    if samples.iter().any(|v| v.is_nan()) {
        return Err(Error::NonFinite { index: samples.iter().position(|v| v.is_nan()).unwrap_or(0) });
    }
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len() as f64;
    let mut out: Vec<(f64, f64)> = Vec::new();
    for (i, &v) in sorted.iter().enumerate() {
        let frac = (i + 1) as f64 / n;
        match out.last_mut() {
            Some(last) if last.0 == v => last.1 = frac,
            _ => out.push((v, frac)),
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepTrace {
    pub step: u64,
    /// Objective `F(w_k)` on the step's training batch, before the update.
    pub loss: Option<f64>,
    pub flip_rate: Option<f64>,
    pub aod: Option<f64>,
    pub predicted_aod: Option<f64>,
    pub delta_f1: Option<f64>,
    pub delta_f2: Option<f64>,
    #[serde(skip)]
    pub train_loss: f64,
    #[serde(skip)]
    pub flips: usize,
    #[serde(skip)]
    pub mask_hashes: Vec<u64>,
}

impl StepTrace {
    pub fn new(step: u64, train_loss: f64) -> Self {
        Self {
            step,
            loss: None,
            flip_rate: None,
            aod: None,
            predicted_aod: None,
            delta_f1: None,
            delta_f2: None,
            train_loss,
            flips: 0,
            mask_hashes: Vec::new(),
        }
    }
}

pub const CSV_HEADER: [&str; 7] = ["step", "loss", "flip_rate", "aod", "predicted_aod", "delta_f1", "delta_f2"];

/// Writes traces with the fixed header; untraced quantities are empty fields.
pub fn write_trace_csv<W: Write>(out: W, traces: &[StepTrace]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for t in traces {
        w.serialize(t)?;
    }
    if traces.is_empty() {
        w.write_record(CSV_HEADER)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_trace_csv<R: Read>(input: R) -> Result<Vec<StepTrace>> {
    let mut r = csv::Reader::from_reader(input);
    let header: Vec<String> = r.headers()?.iter().map(str::to_owned).collect();
    if header != CSV_HEADER {
        return Err(Error::Config(format!("unexpected trace header {header:?}")));
    }
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhaseFlipRates {
    /// First 10% of traced steps.
    pub early: f64,
    pub middle: f64,
    /// Final 10% of traced steps.
    pub late: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub steps: u64,
    pub final_train_loss: f64,
    pub val_loss: Option<f64>,
    pub mean_flip_rate: Option<f64>,
    pub flip_rate_by_phase: Option<PhaseFlipRates>,
    pub negative_aod_steps: usize,
    /// Steps whose actual AoD was negative while the predicted AoD was positive.
    pub mispredicted_steps: usize,
    pub aod_ecdf: Vec<(f64, f64)>,
}

fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Mean flip rate over the first and last `fraction` of traced steps and the rest.
pub fn phase_flip_rates(traces: &[StepTrace], fraction: f64) -> Option<PhaseFlipRates> {
    let rates: Vec<f64> = traces.iter().filter_map(|t| t.flip_rate).collect();
    if rates.is_empty() {
        return None;
    }
    let k = ((rates.len() as f64 * fraction).ceil() as usize).clamp(1, rates.len());
    let middle = if rates.len() > 2 * k { &rates[k..rates.len() - k] } else { &rates[..] };
    Some(PhaseFlipRates { early: mean(&rates[..k]), middle: mean(middle), late: mean(&rates[rates.len() - k..]) })
}

impl Summary {
    pub fn from_traces(traces: &[StepTrace], val_loss: Option<f64>) -> Self {
        let rates: Vec<f64> = traces.iter().filter_map(|t| t.flip_rate).collect();
        let aods: Vec<f64> = traces.iter().filter_map(|t| t.aod).collect();
        let mispredicted = traces
            .iter()
            .filter(|t| matches!((t.aod, t.predicted_aod), (Some(a), Some(p)) if a < 0.0 && p > 0.0))
            .count();
        Self {
            steps: traces.len() as u64,
            final_train_loss: traces.last().map(|t| t.train_loss).unwrap_or(f64::NAN),
            val_loss,
            mean_flip_rate: (!rates.is_empty()).then(|| mean(&rates)),
            flip_rate_by_phase: phase_flip_rates(traces, 0.1),
            negative_aod_steps: aods.iter().filter(|&&a| a < 0.0).count(),
            mispredicted_steps: mispredicted,
            aod_ecdf: ecdf(&aods).unwrap_or_default(),
        }
    }
}

/// Config snapshot, per-step traces and summary of one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub config: serde_json::Value,
    #[serde(skip)]
    pub traces: Vec<StepTrace>,
    pub summary: Summary,
}

impl RunRecord {
    pub fn trace_csv(&self) -> Result<String> {
        let mut buf = Vec::new();
        write_trace_csv(&mut buf, &self.traces)?;
        Ok(String::from_utf8(buf).expect("csv output is utf-8"))
    }
}
