use thiserror::Error;

/// Crate-wide error type. Variants map onto the CLI exit codes: config and
/// shape problems are usage errors (1), failed verification reports are 2,
/// and numerical blowups during training or solving are 3.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("numerical divergence: {0}")]
    Divergence(String),
    #[error("ill-conditioned system (1-norm condition estimate {0:.3e})")]
    IllConditioned(f64),
    #[error("verification failed: {0}")]
    Verification(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("serialization: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Process exit code the CLI uses for this error.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Shape(_) | Error::Io(_) | Error::Json(_) => 1,
            Error::Verification(_) => 2,
            Error::NonFinite(_) | Error::Divergence(_) | Error::IllConditioned(_) => 3,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
