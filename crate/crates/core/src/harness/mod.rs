//! Experiment orchestration: configuration, run plans, persistence and
//! report tables.

mod config;
mod report;
mod runner;

pub use config::ExperimentConfig;
pub use report::{build_tables, mean_std, render_tables, LeakageRow, SplitRow, Tables};
pub use runner::{
    ablation_suite, evaluate, execute, load_records, plan_modes, plan_sweep, prepare_data, run_experiment, run_plan,
    RunMetrics, RunRecord, RunSpec, SeedData, SeedSet, METRICS_CSV_HEADER,
};
