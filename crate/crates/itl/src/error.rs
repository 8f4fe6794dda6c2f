use thiserror::Error;

/// Errors surfaced by the library. Variants map onto the process exit
/// categories used by the CLI: config, data, numerical, invariant.
#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration: bad architecture, bad hyperparameters,
    /// unknown variant names, incompatible dimensions declared up front.
    #[error("config error: {0}")]
    Config(String),

    /// Malformed or inconsistent data: bad file magic, truncated streams,
    /// labels out of range, dtype mismatches.
    #[error("data error: {0}")]
    Data(String),

    /// Shape mismatch between tensors fed to an operation.
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    /// A NaN or infinity appeared where finite values are required.
    #[error("non-finite value in {0}")]
    NonFinite(String),

    /// A structural invariant was violated. These are hard failures: the
    /// engine state can no longer be trusted.
    #[error("invariant violated: {0}")]
    Invariant(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape { op, detail: detail.into() }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
