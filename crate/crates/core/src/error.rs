use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Errors surfaced by the core library. Every variant maps to a stable
/// machine-readable category (see [`Error::category`]) used by the CLI.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: String },

    #[error("invalid argument: {0}")]
    InvalidArg(String),

    #[error("infeasible CTC target: {labels} labels need {needed} frames, grid has {frames}")]
    CtcInfeasible {
        labels: usize,
        needed: usize,
        frames: usize,
    },

    #[error("instance too large: {0}")]
    TooLarge(String),

    #[error("unknown token id {id} (valid ids are {valid})")]
    UnknownToken { id: usize, valid: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("format error in {path}: {reason}")]
    Format { path: String, reason: String },

    #[error("missing utterance ids: {0:?}")]
    MissingIds(Vec<String>),

    #[error("duplicate utterance id: {0}")]
    DuplicateId(String),

    #[error("empty CTC greedy output")]
    EmptyGreedy,

    #[error("training diverged: non-finite loss at epoch {epoch}, batch {batch}, utterance {utt}")]
    Diverged {
        epoch: usize,
        batch: usize,
        utt: String,
    },

    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    /// Stable one-word category for machine-readable CLI error lines.
    pub fn category(&self) -> &'static str {
        match self {
            Error::ShapeMismatch { .. } => "shape-mismatch",
            Error::NonFinite { .. } => "non-finite",
            Error::InvalidArg(_) => "invalid-argument",
            Error::CtcInfeasible { .. } => "ctc-infeasible",
            Error::TooLarge(_) => "too-large",
            Error::UnknownToken { .. } => "unknown-token",
            Error::Config(_) => "config",
            Error::Format { .. } => "format",
            Error::MissingIds(_) => "missing-ids",
            Error::DuplicateId(_) => "duplicate-id",
            Error::EmptyGreedy => "empty-greedy",
            Error::Diverged { .. } => "diverged",
            Error::Io { .. } => "io",
        }
    }

    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}
