use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("matrix is not positive definite: {0}")]
    NotPositiveDefinite(String),

    #[error("closed loop is not stabilized (spectral radius {0})")]
    NotStabilizing(f64),

    #[error("flat map singularity: specific force {force} below minimum {min}")]
    Singularity { force: f64, min: f64 },

    #[error("gram matrix is ill-conditioned after jitter escalation")]
    IllConditioned,

    #[error("hyperparameter optimization did not converge: {0}")]
    NotConverged(String),

    #[error("optimization problem is infeasible")]
    Infeasible,

    #[error("optimization problem is unbounded")]
    Unbounded,

    #[error("solver hit the iteration limit ({0})")]
    MaxIterations(usize),

    #[error("episode aborted at step {step} after {consecutive} consecutive infeasible steps")]
    Aborted { step: usize, consecutive: usize },

    #[error("solver failure at step {step}: {message}")]
    SolverFailure { step: usize, message: String },

    #[error("calibration gate failed: {0}")]
    Calibration(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}
