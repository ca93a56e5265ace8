use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    #[error("degenerate vector: norm {norm:e} is below 1e-12")]
    DegenerateVector { norm: f64 },

    #[error("gradient for parameter `{name}` was never populated")]
    UnpopulatedGradient { name: String },

    #[error("empty input to {0}")]
    EmptyInput(&'static str),

    #[error("adversary needs at least two branches, got {0}")]
    InsufficientBranches(usize),

    #[error("invalid batch: {0}")]
    InvalidBatch(String),

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("split design error: {0}")]
    SplitDesign(String),

    #[error("split contamination: classes {0:?} appear in both seen and unseen sets")]
    SplitContamination(Vec<usize>),

    #[error("training diverged at step {step}: {detail}")]
    Divergence { step: usize, detail: String },

    #[error("format error at byte {offset}: {detail}")]
    Format { offset: usize, detail: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Dimension { op, detail: detail.into() }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
