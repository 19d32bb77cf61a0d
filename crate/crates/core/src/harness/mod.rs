//! Selection metrics, multi-seed experiments and plot-ready curve tables.

mod checkpoint;
mod curves;
mod experiment;
mod metrics;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use curves::{emit_curves, read_log, write_curves_csv, write_log, CurvePoint};
pub use experiment::{
    run_experiment, run_seed, write_run_rows, EnvConfig, ExperimentConfig, ExperimentSummary, RunRow, SeedResult,
    SummaryRow,
};
pub use metrics::{score_selection, score_selection_at, SelectionMetrics};

pub use crate::ppo::Method;
