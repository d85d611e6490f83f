use std::path::PathBuf;

use itowave_nn::NnError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{what} = {value} is outside [{lo}, {hi}]")]
    Domain {
        what: &'static str,
        value: f64,
        lo: f64,
        hi: f64,
    },
    #[error("configuration error: {0}")]
    Config(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("alignment error: waveform has {samples} samples but mel has {frames} frames x hop {hop} = {}", frames * hop)]
    Alignment { samples: usize, frames: usize, hop: usize },
    #[error("audio format error: {0}")]
    Format(String),
    #[error("sample rate {found} Hz does not match the configured {expected} Hz")]
    Rate { expected: u32, found: u32 },
    #[error("feature fingerprint mismatch: expected {expected:016x}, found {found:016x}")]
    Fingerprint { expected: u64, found: u64 },
    #[error("data error: {0}")]
    Data(String),
    #[error("numerical failure at step {step}: {msg}")]
    Numerical { step: usize, msg: String },
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code: 2 configuration, 3 data, 4 numerical failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Domain { .. } | Error::Config(_) | Error::Shape(_) | Error::Fingerprint { .. } => 2,
            Error::Alignment { .. } | Error::Format(_) | Error::Rate { .. } | Error::Data(_) | Error::Io { .. } => 3,
            Error::Numerical { .. } => 4,
            Error::Nn(e) => match e {
                NnError::NonFinite(_) => 4,
                NnError::Format(_) | NnError::Io(_) => 3,
                _ => 2,
            },
        }
    }
}
