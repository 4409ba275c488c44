use serde::{Deserialize, Serialize};

use crate::engine::{Fp8Config, LayerMode, LrSchedule, MvuePlacement, OptimizerKind, SparseSettings};
use crate::error::{Error, Result};
use crate::lowprec::FloatFormat;
use crate::sparse::{PruneConfig, RescaleRecipe};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Toy,
    SyntheticRegression,
    SyntheticClassification,
    CharLmFfn,
}

impl std::str::FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        serde_json::from_value(serde_json::Value::String(s.replace('-', "_")))
            .map_err(|_| Error::Config(format!("unknown task `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Dense,
    HardSte,
    SrSte,
    SSte,
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        serde_json::from_value(serde_json::Value::String(s.replace('-', "_")))
            .map_err(|_| Error::Config(format!("unknown mode `{s}`")))
    }
}

fn serde_name<T: Serialize>(v: &T) -> String {
    serde_json::to_value(v).ok().and_then(|v| v.as_str().map(str::to_owned)).unwrap_or_default()
}

impl std::fmt::Display for Task {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&serde_name(self))
    }
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&serde_name(self))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimName {
    Sgd,
    Adam,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleName {
    Constant,
    Cosine,
}

/// Everything needed to reproduce a run. Serialized as flat JSON; unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub label: Option<String>,
    pub task: Task,
    pub mode: Mode,
    pub prune_n: usize,
    pub prune_m: usize,
    pub prune_gamma: f64,
    pub rescale_recipe: RescaleRecipe,
    /// `false` recomputes the scale every step (ablation only).
    pub rescale_freeze: bool,
    pub srste_lambda_w: Option<f64>,
    pub mvue_grad_z: bool,
    pub mvue_weight: bool,
    pub fp8_forward: String,
    pub fp8_backward: String,
    pub optim_kind: OptimName,
    pub optim_lr: f64,
    pub optim_schedule: ScheduleName,
    pub optim_warmup: u64,
    /// Final learning rate of the cosine schedule, as a fraction of `optim_lr`.
    pub optim_lr_floor: f64,
    pub train_steps: u64,
    /// 0 means full-batch gradient descent.
    pub train_batch_size: usize,
    pub trace_stride: u64,
    pub toy_start: [f64; 2],
    pub seed: u64,
    pub output_dir: Option<String>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self::for_task(Task::SyntheticClassification)
    }
}

impl ExperimentConfig {
    /// Defaults tuned for each desk-scale task.
    pub fn for_task(task: Task) -> Self {
        let base = Self {
            label: None,
            task,
            mode: Mode::Dense,
            prune_n: 2,
            prune_m: 4,
            prune_gamma: 0.0,
            rescale_recipe: RescaleRecipe::MinMse,
            rescale_freeze: true,
            srste_lambda_w: None,
            mvue_grad_z: false,
            mvue_weight: false,
            fp8_forward: "none".into(),
            fp8_backward: "none".into(),
            optim_kind: OptimName::Sgd,
            optim_lr: 0.1,
            optim_schedule: ScheduleName::Cosine,
            optim_warmup: 0,
            optim_lr_floor: 0.1,
            train_steps: 300,
            train_batch_size: 0,
            trace_stride: 1,
            toy_start: [0.2, 0.1],
            seed: 0,
            output_dir: None,
        };
        match task {
            Task::Toy => Self {
                prune_n: 1,
                prune_m: 2,
                rescale_recipe: RescaleRecipe::None,
                optim_lr: 0.25,
                optim_schedule: ScheduleName::Constant,
                train_steps: 100,
                ..base
            },
            Task::SyntheticRegression => Self { optim_lr: 0.5, train_steps: 400, ..base },
            Task::SyntheticClassification => Self { optim_lr: 0.2, train_steps: 400, ..base },
            Task::CharLmFfn => Self {
                optim_kind: OptimName::Adam,
                optim_lr: 3e-3,
                optim_warmup: 20,
                train_steps: 600,
                train_batch_size: 64,
                ..base
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.prune()?;
        self.fp8()?;
        if self.mode == Mode::SrSte && self.srste_lambda_w.is_none() {
            return Err(Error::Config("sr_ste runs require srste_lambda_w".into()));
        }
        if self.srste_lambda_w.is_some_and(|l| !(l >= 0.0 && l.is_finite())) {
            return Err(Error::Config("srste_lambda_w must be a finite non-negative number".into()));
        }
        if !(self.optim_lr >= 0.0 && self.optim_lr.is_finite()) {
            return Err(Error::Config(format!("optim_lr must be non-negative, got {}", self.optim_lr)));
        }
        if !(0.0..=1.0).contains(&self.optim_lr_floor) {
            return Err(Error::Config("optim_lr_floor must lie in [0, 1]".into()));
        }
        if self.train_steps == 0 {
            return Err(Error::Config("train_steps must be positive".into()));
        }
        if self.trace_stride == 0 {
            return Err(Error::Config("trace_stride must be positive".into()));
        }
        if (self.mvue_grad_z || self.mvue_weight) && !self.train_batch_size.is_multiple_of(4) {
            return Err(Error::Config("MVUE needs a batch size divisible by 4 (0 = full batch)".into()));
        }
        if self.task == Task::Toy {
            if self.prune_m != 2 || self.prune_n != 1 {
                return Err(Error::Config("the toy problem is 1:2 sparse".into()));
            }
            if self.mvue_grad_z || self.mvue_weight || self.fp8()?.is_some() {
                return Err(Error::Config("the toy problem has no GEMMs for MVUE or FP8".into()));
            }
        }
        Ok(())
    }

    pub fn prune(&self) -> Result<PruneConfig> {
        PruneConfig::new(self.prune_n, self.prune_m, self.prune_gamma, self.rescale_recipe)
    }

    pub fn fp8(&self) -> Result<Option<Fp8Config>> {
        match (FloatFormat::parse(&self.fp8_forward)?, FloatFormat::parse(&self.fp8_backward)?) {
            (None, None) => Ok(None),
            (Some(forward), Some(backward)) => Ok(Some(Fp8Config { forward, backward })),
            _ => Err(Error::Config("fp8_forward and fp8_backward must both be set or both be none".into())),
        }
    }

    pub fn layer_mode(&self) -> LayerMode {
        match self.mode {
            Mode::Dense => LayerMode::Dense,
            Mode::HardSte => LayerMode::HardSte,
            Mode::SrSte => LayerMode::SrSte { lambda_w: self.srste_lambda_w.unwrap_or(0.0) },
            Mode::SSte => LayerMode::SSte,
        }
    }

    pub fn sparse_settings(&self) -> Result<SparseSettings> {
        Ok(SparseSettings {
            mode: self.layer_mode(),
            prune: self.prune()?,
            dynamic_beta: !self.rescale_freeze,
            mvue: MvuePlacement { grad_z: self.mvue_grad_z, weight: self.mvue_weight },
            fp8: self.fp8()?,
        })
    }

    pub fn optimizer_kind(&self) -> OptimizerKind {
        match self.optim_kind {
            OptimName::Sgd => OptimizerKind::Sgd,
            OptimName::Adam => OptimizerKind::adam(),
        }
    }

    pub fn schedule(&self) -> LrSchedule {
        match self.optim_schedule {
            ScheduleName::Constant => LrSchedule::Constant { lr: self.optim_lr },
            ScheduleName::Cosine => LrSchedule::Cosine {
                peak: self.optim_lr,
                floor: self.optim_lr * self.optim_lr_floor,
                warmup: self.optim_warmup,
                total: self.train_steps,
            },
        }
    }

    /// Name used for the run directory and summary rows.
    pub fn display_label(&self) -> String {
        if let Some(l) = &self.label {
            return l.clone();
        }
        format!("{}-{}-s{}", self.task, self.mode, self.seed)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(json: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(json)?;
        Ok(cfg)
    }
}
