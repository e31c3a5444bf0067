//! Experiment configuration, the round loop and metrics output.

mod config;
mod experiment;
mod metrics;

pub use config::{ExperimentConfig, TaskData, WorldConfig};
pub use experiment::{
    build_simulation, compare_strategies, effective_threads, run_experiment, run_simulation,
    Comparison, RunOutcome, Simulation, TaskComparison, THREADS_ENV,
};
pub use metrics::{
    header, read_metrics, write_metrics, write_metrics_to, RoundMetrics, TaskRoundMetrics,
};
