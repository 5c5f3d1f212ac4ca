//! Experiment driver: configs, scenario generation, baseline schedulers and
//! the matrix runner.

mod baselines;
mod config;
mod matrix;
pub mod presets;
mod scenario;

pub use baselines::{baseline_galaxy_two_step, baseline_vanilla_even};
pub use config::{
    token_macs, BaselineSelector, ExperimentConfig, MatrixAxes, SapSetup, ScenarioSet,
    SchedulerKind,
};
pub use matrix::{
    build_schedule, read_records, run_matrix, summarize, write_summary_csv, Cell, Prepared,
    Report, RunRecord, SummaryRow,
};
pub use scenario::{generate_scenarios, ScenarioParams};
