//! Seeded training runs, parameter sweeps and reports on top of the core
//! algorithms. Everything here is plumbing: configs in, JSON-lines metrics and
//! binary checkpoints out.

mod checkpoint;
mod config;
mod metrics;
mod report;
mod run;
mod sweep;

pub use checkpoint::{Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use config::{ExperimentConfig, PolicyConfig};
pub use metrics::{
    read_metrics, JsonlSink, MetricsRecord, MetricsSink, METRICS_SCHEMA, METRICS_VERSION,
};
pub use report::{report, steps_to_threshold, RunSummary, NOT_REACHED, THRESHOLD};
pub use run::{
    eval_task, evaluate_greedy, initial_state, run, run_seed, train_task, RunOutcome, RunPaths,
    SeedRunner,
};
pub use sweep::{sweep, Axis, CellResult, SweepResult};
