//! Experiment harness behind the `prefix-sampling` binary.

mod compare;
mod config;
mod emit;
mod metrics;
mod run;
pub mod verify;

pub use compare::{run_comparison, RunSummary, SEED_SUMMARY_FILE, SUMMARY_FILE};
pub use config::{
    Arm, ExperimentConfig, OptimizerFlags, PopulationConfig, PopulationPreset, RatioSource, RerolloutTiming,
};
pub use emit::{emit_traces, CONTROLLER_FILE, METRICS_FILE, RECORDS_FILE, TRANSITIONS_FILE};
pub use metrics::{
    compute_step_metrics, compute_transition_matrix, pool_cohorts, AuditMetrics, CohortMetrics, StepMetrics,
    TransitionMatrix, TransitionRow,
};
pub use run::{run_experiment, ControllerTraceRow, RunOutput, RunRecord};
