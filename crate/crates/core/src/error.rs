//! Crate-wide error type.

use std::path::PathBuf;

use crate::control::SimTrace;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// An input was outside the mathematical domain of an operation.
    #[error("domain error: {0}")]
    Domain(String),

    #[error("configuration error: {0}")]
    Config(String),

    /// The plant state became non-finite. Carries the trace recorded so far
    /// when the failure happened inside a closed-loop run.
    #[error("simulation diverged at step {step}")]
    Diverged {
        step: usize,
        prefix: Option<Box<SimTrace>>,
    },

    #[error("controller fault: {0}")]
    ControllerFault(String),

    #[error("state error: {0}")]
    State(String),

    #[error("training diverged at epoch {epoch} (loss is not finite)")]
    TrainingDiverged { epoch: usize },

    #[error("no steady intervals found ({0}); try widening the band or lowering min_len")]
    NoSteadyIntervals(String),

    #[error("dataset too small: {0} rows (need at least 10)")]
    TooSmall(usize),

    #[error("all {} hpo trials failed", .log.len())]
    HpoAllFailed { log: Vec<crate::opt::hpo::Trial> },

    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_)
            | Error::Domain(_)
            | Error::NoSteadyIntervals(_)
            | Error::TooSmall(_) => 2,
            Error::Diverged { .. } => 3,
            Error::TrainingDiverged { .. } | Error::HpoAllFailed { .. } => 4,
            Error::Stage { source, .. } => source.exit_code(),
            _ => 1,
        }
    }
}
