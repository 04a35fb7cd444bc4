//! Experiment driver: configs, workloads, runs and report files.

pub mod config;
pub mod experiment;
pub mod report;
pub mod tensor_io;
pub mod workload;

pub use config::ExperimentConfig;
pub use experiment::{bench, run_experiment, sweep, BenchTable, RunReport, SweepReport};
pub use report::{emit_bench, emit_report, emit_sweep};
