//! Experiment configs, desk-scale tasks and the runners behind the CLI.

mod config;
mod output;
mod runner;
mod tasks;

pub use config::{ExperimentConfig, Mode, OptimName, ScheduleName, Task};
pub use output::{format_summary, read_run_dir, run_dir, write_run_dir, write_summary, Preset, OUTPUT_ROOT_ENV};
pub use runner::{
    check_matrix, run_ablation_matrix, run_toy, run_training, run_training_with, AblationRow, AblationRun, ToyRun,
    TrainOptions, TrainedRun,
};
pub use tasks::{check_widths, derive_seed, TaskData};
