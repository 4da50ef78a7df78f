use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by the fedcost library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("label {label} has {available} samples in the pool but {needed} are required")]
    InsufficientLabel {
        label: usize,
        needed: usize,
        available: usize,
    },

    #[error("pool holds {available} distinct labels but {requested} per client were requested")]
    NotEnoughLabels { available: usize, requested: usize },

    #[error("{path}: expected IDX magic {expected:#010x}, found {found:#010x}")]
    MagicMismatch {
        path: PathBuf,
        expected: u32,
        found: u32,
    },

    #[error("{path}: truncated IDX file ({expected} bytes expected, {actual} present)")]
    Truncated {
        path: PathBuf,
        expected: usize,
        actual: usize,
    },

    #[error("IDX image count {images} does not match label count {labels}")]
    CountMismatch { images: usize, labels: usize },

    #[error("dimension mismatch: model expects {expected}, data has {actual}")]
    DimensionMismatch { expected: String, actual: String },

    #[error("client {0} is not part of the dataset or profile")]
    UnknownClient(usize),

    #[error("client {0} appears more than once")]
    DuplicateClient(usize),

    #[error("client shard {0} is empty")]
    EmptyShard(usize),

    #[error("nothing to aggregate")]
    EmptyUpdates,

    #[error("round job has no clients")]
    EmptyJob,

    #[error("brute-force enumeration supports at most {max} clients, got {k}")]
    TooManyForEnumeration { k: usize, max: usize },

    #[error("training diverged at round {round}: loss is {loss}")]
    Divergence { round: usize, loss: f64 },

    #[error("stationary point in E lies above the search ceiling E_max = {ceiling}")]
    RootAboveCeiling { ceiling: f64 },

    #[error("search grid is empty")]
    EmptyGrid,

    #[error("every pilot pair was discarded as ill-conditioned; choose pilots with a wider spread of (K, E)")]
    EstimationFailed,

    #[error("pilot (K={k}, E={e}) did not reach loss {threshold} within {cap} rounds")]
    PilotTimeout {
        k: usize,
        e: usize,
        threshold: f64,
        cap: usize,
    },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),

    #[error("profile config: {0}")]
    Config(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn invalid(name: &'static str, reason: impl Into<String>) -> Error {
    Error::InvalidParameter {
        name,
        reason: reason.into(),
    }
}

/// Rejects NaN and infinities.
pub(crate) fn ensure_finite(name: &'static str, value: f64) -> Result<f64> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(invalid(name, format!("must be finite, got {value}")))
    }
}

pub(crate) fn ensure_positive(name: &'static str, value: f64) -> Result<f64> {
    ensure_finite(name, value)?;
    if value > 0.0 {
        Ok(value)
    } else {
        Err(invalid(name, format!("must be > 0, got {value}")))
    }
}
