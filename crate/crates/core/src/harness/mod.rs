//! Closed-loop simulation: configuration, GP training, episodes, metrics and export.

pub mod config;
pub mod episode;
pub mod report;
pub mod train;

pub use config::{ConstraintConfig, FilterSettings, GpConfig, Mode, RiskConfig, RunConfig};
pub use episode::{initial_state, metrics, run_episode, run_episode_observed, run_trials, trial_seed, Episode, RunMetrics, StepLog, StepSource};
pub use report::{compare, line_chart, read_compare_csv, write_compare_csv, step_header, write_plots, write_steps_csv, write_timeseries_csv, CompareRow, Series};
pub use train::{calibrate, generate_data, load_gp, train_gp, train_pipeline, CalibrationReport, OutputCalibration, TrainOutcome};

use crate::error::Error;

/// Process exit code for an error: 2 aborted episode, 3 solver failure, 4 configuration, 1 otherwise.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Aborted { .. } => 2,
        Error::SolverFailure { .. } | Error::MaxIterations(_) | Error::Infeasible | Error::Unbounded => 3,
        Error::Config(_) | Error::Json(_) => 4,
        _ => 1,
    }
}
