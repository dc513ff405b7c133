use thiserror::Error;

use crate::geometry::Pose2D;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("non-finite value: {0}")]
    NonFinite(&'static str),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("degenerate geometry: {0}")]
    Degenerate(String),

    #[error("calibration failed: {0}")]
    Calibration(String),

    #[error("alignment undefined: {0}")]
    AlignmentUndefined(String),

    #[error("solver diverged after {iterations} iterations (objective became non-finite)")]
    Divergence {
        iterations: usize,
        last_iterate: Vec<Pose2D>,
    },

    #[error("infeasible scenario: {0}")]
    InfeasibleScenario(String),

    #[error("initialization failed: {0}")]
    Initialization(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }
}
