use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Every failure the engine can report.
///
/// Variants are grouped by the process exit code the CLI maps them to
/// (see [`Error::exit_code`]).
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("invalid model parameters at row {row}: {detail}")]
    Validity { row: usize, detail: String },

    #[error("value out of numeric domain: {0}")]
    NumericDomain(String),

    #[error("unsupported operation: {0}")]
    Unsupported(String),

    #[error("initialization failed: {0}")]
    Initialization(String),

    #[error("degenerate posterior: datum {datum} has zero likelihood under every particle")]
    ZeroEvidence { datum: String },

    #[error("degenerate geometry: {0}")]
    Degenerate(String),

    #[error("parameters are not identifiable; information matrix is singular along {null_direction:?}")]
    Unidentifiable { null_direction: Vec<f64> },

    #[error("iteration did not converge after {iterations} steps (residual {residual:e})")]
    Convergence { iterations: usize, residual: f64 },

    #[error("ingestion error at row {row}: {detail}")]
    Ingestion { row: usize, detail: String },

    #[error("updater state error: {0}")]
    State(String),

    #[error("heuristic exhausted after {0} experiments")]
    Exhausted(usize),

    #[error("i/o error: {0}")]
    Io(String),
}

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    /// Process exit code: 2 config, 3 ingestion, 4 numerical degeneracy, 5 convergence.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_)
            | Error::Unsupported(_)
            | Error::Initialization(_)
            | Error::Validity { .. }
            | Error::Exhausted(_)
            | Error::State(_) => 2,
            Error::Ingestion { .. } | Error::Io(_) => 3,
            Error::NumericDomain(_)
            | Error::ZeroEvidence { .. }
            | Error::Degenerate(_)
            | Error::Unidentifiable { .. } => 4,
            Error::Convergence { .. } => 5,
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}
