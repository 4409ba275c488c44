use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use sste_core::engine::checkpoint;
use sste_core::experiment::{
    format_summary, read_run_dir, run_ablation_matrix, run_dir, run_toy, run_training_with, write_run_dir,
    write_summary, ExperimentConfig, Mode, OptimName, Preset, ScheduleName, Task, TrainOptions, OUTPUT_ROOT_ENV,
};
use sste_core::RescaleRecipe;

#[derive(Parser)]
#[command(name = "sste", version, about = "N:M sparse training experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Gradient descent on (w1 - w2)^2 under 1:2 sparsity.
    Toy {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Fail unless the dense/hard-STE trajectories match the closed-form ones.
        #[arg(long)]
        check: bool,
    },
    /// Train one configuration.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Resume from a checkpoint directory.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Write a checkpoint here when the run stops.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Stop after this many total steps.
        #[arg(long)]
        stop_at: Option<u64>,
    },
    /// Run a preset sweep or a list of config files sharing task and seed.
    Ablate {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, conflicts_with = "configs")]
        preset: Option<Preset>,
        /// Config files making up the matrix.
        #[arg(long, num_args = 1..)]
        configs: Vec<PathBuf>,
        /// Directory for summary.csv / summary.json (default: $SSTE_OUTPUT_ROOT/ablate-<preset>).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print summaries of run or ablation directories.
    Report {
        #[arg(required = true)]
        dirs: Vec<PathBuf>,
    },
}

/// Flags mirror the config file keys; they override values loaded from `--config`.
#[derive(Args, Default)]
struct ConfigArgs {
    /// JSON config file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    label: Option<String>,
    #[arg(long)]
    task: Option<Task>,
    #[arg(long)]
    mode: Option<Mode>,
    #[arg(long)]
    prune_n: Option<usize>,
    #[arg(long)]
    prune_m: Option<usize>,
    #[arg(long)]
    prune_gamma: Option<f64>,
    #[arg(long)]
    rescale_recipe: Option<RescaleRecipe>,
    #[arg(long)]
    rescale_freeze: Option<bool>,
    #[arg(long)]
    srste_lambda_w: Option<f64>,
    #[arg(long)]
    mvue_grad_z: Option<bool>,
    #[arg(long)]
    mvue_weight: Option<bool>,
    #[arg(long)]
    fp8_forward: Option<String>,
    #[arg(long)]
    fp8_backward: Option<String>,
    #[arg(long, value_parser = parse_optim)]
    optim_kind: Option<OptimName>,
    #[arg(long)]
    optim_lr: Option<f64>,
    #[arg(long, value_parser = parse_schedule)]
    optim_schedule: Option<ScheduleName>,
    #[arg(long)]
    optim_warmup: Option<u64>,
    #[arg(long)]
    optim_lr_floor: Option<f64>,
    #[arg(long)]
    train_steps: Option<u64>,
    #[arg(long)]
    train_batch_size: Option<usize>,
    #[arg(long)]
    trace_stride: Option<u64>,
    #[arg(long, num_args = 2, value_names = ["W1", "W2"])]
    toy_start: Option<Vec<f64>>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    output_dir: Option<String>,
}

fn parse_optim(s: &str) -> Result<OptimName, String> {
    serde_json::from_value(serde_json::Value::String(s.into())).map_err(|_| format!("unknown optimizer `{s}`"))
}

fn parse_schedule(s: &str) -> Result<ScheduleName, String> {
    serde_json::from_value(serde_json::Value::String(s.into())).map_err(|_| format!("unknown schedule `{s}`"))
}

type AnyResult<T> = Result<T, Box<dyn std::error::Error>>;

macro_rules! set {
    ($cfg:ident, $args:ident, $($field:ident),*) => {
        $(if let Some(v) = $args.$field.clone() { $cfg.$field = v; })*
    };
}

impl ConfigArgs {
    fn resolve(&self, default_task: Task) -> AnyResult<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::from_json(&std::fs::read_to_string(p)?)?,
            None => ExperimentConfig::for_task(self.task.unwrap_or(default_task)),
        };
        set!(
            cfg,
            self,
            task,
            mode,
            prune_n,
            prune_m,
            prune_gamma,
            rescale_recipe,
            rescale_freeze,
            mvue_grad_z,
            mvue_weight,
            fp8_forward,
            fp8_backward,
            optim_kind,
            optim_lr,
            optim_schedule,
            optim_warmup,
            optim_lr_floor,
            train_steps,
            train_batch_size,
            trace_stride,
            seed
        );
        if let Some(l) = &self.label {
            cfg.label = Some(l.clone());
        }
        if let Some(l) = self.srste_lambda_w {
            cfg.srste_lambda_w = Some(l);
        }
        if let Some(d) = &self.output_dir {
            cfg.output_dir = Some(d.clone());
        }
        if let Some(s) = &self.toy_start {
            cfg.toy_start = [s[0], s[1]];
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn toy(args: &ConfigArgs, check: bool) -> AnyResult<()> {
    let cfg = args.resolve(Task::Toy)?;
    let run = run_toy(&cfg)?;
    let dir = run_dir(&cfg);
    write_run_dir(&dir, &cfg, &run.record, &run.registry)?;
    for (k, w) in run.weights.iter().enumerate().take(4) {
        println!("w_{} = ({}, {})", k + 1, w[0], w[1]);
    }
    println!("{}", format_summary(&cfg.display_label(), &run.record.summary));
    println!("wrote {}", dir.display());
    if check {
        check_toy(&cfg, &run.weights)?;
        println!("toy check passed");
    }
    Ok(())
}

/// Dense GD and unscaled S-STE reach the midpoint in one step; hard-STE swaps the coordinates forever.
fn check_toy(cfg: &ExperimentConfig, weights: &[[f64; 2]]) -> AnyResult<()> {
    let [a, b] = cfg.toy_start;
    let ok = match cfg.mode {
        Mode::Dense => weights[1..].iter().all(|w| w[0] == w[1]),
        Mode::HardSte if cfg.srste_lambda_w.unwrap_or(0.0) == 0.0 => {
            weights.iter().enumerate().all(|(k, w)| if k % 2 == 0 { *w == [a, b] } else { *w == [b, a] })
        }
        Mode::SSte if cfg.rescale_recipe == RescaleRecipe::None => weights[1..].iter().all(|w| w[0] == w[1]),
        _ => return Err("--check covers dense, hard_ste and unscaled s_ste".into()),
    };
    if ok {
        Ok(())
    } else {
        Err(format!("toy trajectory for {} does not match the expected one", cfg.mode).into())
    }
}

fn train(args: &ConfigArgs, resume: Option<&Path>, ckpt: Option<&Path>, stop_at: Option<u64>) -> AnyResult<()> {
    let cfg = args.resolve(Task::SyntheticClassification)?;
    let run = run_training_with(&cfg, &TrainOptions { resume, stop_at })?;
    let dir = run_dir(&cfg);
    write_run_dir(&dir, &cfg, &run.record, run.network.registry())?;
    if let Some(c) = ckpt {
        checkpoint::save(c, &run.network, &run.optimizer, stop_at.unwrap_or(cfg.train_steps).min(cfg.train_steps))?;
        println!("checkpoint {}", c.display());
    }
    println!("{}", format_summary(&cfg.display_label(), &run.record.summary));
    println!("wrote {}", dir.display());
    Ok(())
}

fn ablate(args: &ConfigArgs, preset: Option<Preset>, files: &[PathBuf], out: Option<&Path>) -> AnyResult<()> {
    let (configs, name) = match preset {
        Some(p) => (p.expand(&args.resolve(Task::SyntheticClassification)?), format!("{p:?}").to_lowercase()),
        None if !files.is_empty() => {
            let cs = files
                .iter()
                .map(|f| Ok(ExperimentConfig::from_json(&std::fs::read_to_string(f)?)?))
                .collect::<AnyResult<Vec<_>>>()?;
            (cs, "matrix".to_owned())
        }
        None => return Err("ablate needs --preset or --configs".into()),
    };
    let root = std::env::var_os(OUTPUT_ROOT_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("runs"));
    let out = out.map(Path::to_path_buf).unwrap_or_else(|| root.join(format!("ablate-{name}")));
    let results = run_ablation_matrix(&configs)?;
    for (cfg, run) in configs.iter().zip(&results) {
        let mut cfg = cfg.clone();
        cfg.output_dir = Some(out.join(&run.row.label).to_string_lossy().into_owned());
        write_run_dir(&run_dir(&cfg), &cfg, &run.record, &run.scales)?;
        println!("{}", format_summary(&run.row.label, &run.record.summary));
    }
    let rows: Vec<_> = results.into_iter().map(|r| r.row).collect();
    write_summary(&out, &rows)?;
    println!("wrote {}", out.join("summary.csv").display());
    Ok(())
}

fn report(dirs: &[PathBuf]) -> AnyResult<()> {
    for d in dirs {
        if d.join("summary.json").exists() {
            let rows: Vec<serde_json::Value> = serde_json::from_str(&std::fs::read_to_string(d.join("summary.json"))?)?;
            println!("{}", d.display());
            for r in rows {
                println!("  {r}");
            }
        } else {
            let (cfg, record) = read_run_dir(d)?;
            println!("{}", format_summary(&cfg.display_label(), &record.summary));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Toy { cfg, check } => toy(cfg, *check),
        Command::Train { cfg, resume, checkpoint, stop_at } => {
            train(cfg, resume.as_deref(), checkpoint.as_deref(), *stop_at)
        }
        Command::Ablate { cfg, preset, configs, out } => ablate(cfg, *preset, configs, out.as_deref()),
        Command::Report { dirs } => report(dirs),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
