use std::fs;
use std::path::{Path, PathBuf};

use super::config::{ExperimentConfig, Mode};
use super::runner::AblationRow;
use crate::diagnostics::{read_trace_csv, RunRecord, Summary};
use crate::error::{Error, Result};
use crate::rescale::ScaleRegistry;
use crate::sparse::RescaleRecipe;

/// Environment variable naming the root under which run directories are created.
pub const OUTPUT_ROOT_ENV: &str = "SSTE_OUTPUT_ROOT";

/// `output_dir` from the config, else `$SSTE_OUTPUT_ROOT/<label>`, else `runs/<label>`.
pub fn run_dir(cfg: &ExperimentConfig) -> PathBuf {
    if let Some(dir) = &cfg.output_dir {
        return PathBuf::from(dir);
    }
    let root = std::env::var_os(OUTPUT_ROOT_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("runs"));
    root.join(cfg.display_label())
}

/// Writes `config.json`, `scales.json`, `trace.csv` and `run.json`.
pub fn write_run_dir(dir: &Path, cfg: &ExperimentConfig, record: &RunRecord, scales: &ScaleRegistry) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("config.json"), cfg.to_json()?)?;
    scales.save(&dir.join("scales.json"))?;
    fs::write(dir.join("trace.csv"), record.trace_csv()?)?;
    fs::write(dir.join("run.json"), serde_json::to_string_pretty(record)?)?;
    Ok(())
}

/// Reads a run directory back; traces come from `trace.csv`.
pub fn read_run_dir(dir: &Path) -> Result<(ExperimentConfig, RunRecord)> {
    let cfg = ExperimentConfig::from_json(&fs::read_to_string(dir.join("config.json"))?)?;
    let mut record: RunRecord = serde_json::from_str(&fs::read_to_string(dir.join("run.json"))?)?;
    record.traces = read_trace_csv(fs::File::open(dir.join("trace.csv"))?)?;
    Ok((cfg, record))
}

pub fn write_summary(dir: &Path, rows: &[AblationRow]) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut w = csv::Writer::from_path(dir.join("summary.csv"))?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    fs::write(dir.join("summary.json"), serde_json::to_string_pretty(rows)?)?;
    Ok(())
}

/// Named ablation sweeps built around a base config.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    Gamma,
    Beta,
    Mvue,
    Fp8,
    Modes,
}

impl std::str::FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "gamma" => Preset::Gamma,
            "beta" => Preset::Beta,
            "mvue" => Preset::Mvue,
            "fp8" => Preset::Fp8,
            "modes" => Preset::Modes,
            _ => return Err(Error::Config(format!("unknown preset {s:?}"))),
        })
    }
}

fn labelled(base: &ExperimentConfig, label: &str, f: impl FnOnce(&mut ExperimentConfig)) -> ExperimentConfig {
    let mut c = base.clone();
    f(&mut c);
    c.label = Some(label.to_owned());
    c.output_dir = None;
    c
}

impl Preset {
    pub fn expand(self, base: &ExperimentConfig) -> Vec<ExperimentConfig> {
        let sste = |c: &mut ExperimentConfig| c.mode = Mode::SSte;
        match self {
            Preset::Gamma => [0.0, 0.33, 0.67, 1.0]
                .iter()
                .map(|&g| {
                    labelled(base, &format!("gamma-{g}"), |c| {
                        sste(c);
                        c.prune_gamma = g;
                    })
                })
                .collect(),
            Preset::Beta => [
                ("beta-none", RescaleRecipe::None, true),
                ("beta-keep-l1", RescaleRecipe::KeepL1, true),
                ("beta-min-mse", RescaleRecipe::MinMse, true),
                ("beta-dynamic", RescaleRecipe::MinMse, false),
            ]
            .iter()
            .map(|&(l, r, freeze)| {
                labelled(base, l, |c| {
                    sste(c);
                    c.rescale_recipe = r;
                    c.rescale_freeze = freeze;
                })
            })
            .collect(),
            Preset::Mvue => [
                ("mvue-none", false, false),
                ("mvue-grad-z", true, false),
                ("mvue-both", true, true),
                ("mvue-weight", false, true),
            ]
            .iter()
            .map(|&(l, z, w)| {
                labelled(base, l, |c| {
                    sste(c);
                    c.mvue_grad_z = z;
                    c.mvue_weight = w;
                })
            })
            .collect(),
            Preset::Fp8 => [("none", "none"), ("e4m3", "e5m2"), ("e4m3", "e4m3"), ("e3m4", "e5m2")]
                .iter()
                .map(|&(f, b)| {
                    labelled(base, &format!("fp8-{f}-{b}"), |c| {
                        sste(c);
                        c.fp8_forward = f.into();
                        c.fp8_backward = b.into();
                    })
                })
                .collect(),
            Preset::Modes => [Mode::Dense, Mode::HardSte, Mode::SrSte, Mode::SSte]
                .iter()
                .map(|&m| {
                    labelled(base, &format!("mode-{m}"), |c| {
                        c.mode = m;
                        if m == Mode::SrSte && c.srste_lambda_w.is_none() {
                            c.srste_lambda_w = Some(2e-4);
                        }
                    })
                })
                .collect(),
        }
    }
}

/// Human-readable digest of a run summary.
pub fn format_summary(label: &str, s: &Summary) -> String {
    let opt = |v: Option<f64>| v.map_or_else(|| "-".to_owned(), |v| format!("{v:.6e}"));
    let mut out = format!(
        "{label}: steps={} train_loss={:.6e} val_loss={} mean_flip_rate={}",
        s.steps,
        s.final_train_loss,
        opt(s.val_loss),
        opt(s.mean_flip_rate)
    );
    if let Some(p) = s.flip_rate_by_phase {
        out += &format!(" flip_rate[early/mid/late]={:.4e}/{:.4e}/{:.4e}", p.early, p.middle, p.late);
    }
    out += &format!(" negative_aod={} mispredicted={}", s.negative_aod_steps, s.mispredicted_steps);
    out
}
