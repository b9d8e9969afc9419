//! Experiment orchestration: data collection, the policy-search loop,
//! evaluation on shared start states, quantile aggregation and reporting.

mod buffer;
mod config;
mod diagnose;
mod report;
mod train;

pub use buffer::{buffer_append, collect_random, DataBuffer, Transition};
pub use config::{ExperimentConfig, ExtendedHorizon, ModelKind, DEFAULT_BUFFER_CAP};
pub use diagnose::{
    dump_trajectories, histogram_csv, jarque_bera, normality_csv, normality_table, sample_trajectories, trajectories_csv,
    NormalityRow, Trajectories,
};
pub use report::{aggregate, emit_csv, quantile, quantile_sorted, summary_csv, Manifest, QuantileSummary, SummaryRow, CSV_HEADER};
pub use train::{
    eval_starts, evaluate_policy, fit_model, initial_observation_gaussian, optimize_policy, random_policy_baseline,
    reference_policy, run_episode, run_suite, train_loop, train_repeat, EnvModel, IterationRecord, ReferenceOutcome,
    RunRecord, StageEntry, TrainOutcome,
};
