//! Runs, metrics and configuration.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod mab_study;
pub mod metrics;
pub mod runner;

pub use checkpoint::{CheckpointKind, Loaded, Sidecar};
pub use commands::{run_distill, run_eval, run_finetune, run_mab, run_metrics, run_pretrain, DistillReport};
pub use config::{EnvKind, RunConfig};
pub use mab_study::{regret_csv, run_bandit, run_mab_study, study_agents, RegretCurve};
pub use metrics::{
    aggregate_metrics, coverage, iqm, metrics_csv, optimality_gap, Aggregate, CoverageGrid, MetricRecord, CSV_HEADER,
};
pub use runner::{evaluate, Counters, EvalResult, Op, Policy, Runner, StepLog};
