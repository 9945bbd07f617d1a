//! Crate-wide error type.
//!
//! Variants are grouped by what went wrong rather than where: `Config` for
//! invalid settings, `Data` for unusable inputs or files, `Shape` for
//! dimension mismatches, `Numeric` for NaN or divergence during math.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("config: {0}")]
    Config(String),

    #[error("shape: {0}")]
    Shape(String),

    #[error("data: {0}")]
    Data(String),

    #[error("numeric: {0}")]
    Numeric(String),

    #[error("fingerprint mismatch in {context}: expected {expected:#018x}, found {found:#018x}")]
    Fingerprint {
        expected: u64,
        found: u64,
        context: String,
    },

    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Process exit code for the CLI: 2 for configuration problems,
    /// 3 for anything wrong with data or files.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            _ => 3,
        }
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }

    pub fn numeric(msg: impl Into<String>) -> Self {
        Error::Numeric(msg.into())
    }
}
