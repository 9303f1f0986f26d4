use thiserror::Error;

/// Errors raised anywhere in the lab.
#[derive(Debug, Error)]
pub enum LabError {
    /// Input outside the mathematical domain of an operation (non-finite values, bad simplex).
    #[error("domain error: {0}")]
    Domain(String),

    /// Input is well-formed but carries no usable information (zero norm, identical scores).
    #[error("degenerate input: {0}")]
    Degenerate(String),

    /// Caller violated a precondition (shape mismatch, missing domain, bad index).
    #[error("contract violation: {0}")]
    Contract(String),

    /// Invalid or unsatisfiable configuration.
    #[error("configuration error: {0}")]
    Config(String),

    /// A non-finite value appeared mid-computation.
    #[error("numeric failure in {component}: {detail}")]
    Numeric { component: String, detail: String },

    /// Episode aborted; wraps the failing batch.
    #[error("episode aborted at {corruption} batch {batch}: {source}")]
    Episode {
        corruption: String,
        batch: usize,
        #[source]
        source: Box<LabError>,
    },

    #[error("checkpoint format error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Toml(#[from] toml::de::Error),
}

pub type Result<T> = std::result::Result<T, LabError>;

pub(crate) fn contract(msg: impl Into<String>) -> LabError {
    LabError::Contract(msg.into())
}

pub(crate) fn degenerate(msg: impl Into<String>) -> LabError {
    LabError::Degenerate(msg.into())
}

pub(crate) fn domain(msg: impl Into<String>) -> LabError {
    LabError::Domain(msg.into())
}
