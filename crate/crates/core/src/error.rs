use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("bad magic in tensor header: expected `{expected}`, found `{found}`")]
    BadMagic { expected: &'static str, found: String },

    #[error("malformed header: {0}")]
    BadHeader(String),

    #[error("payload mismatch: header declares {expected} bytes, found {found}")]
    PayloadMismatch { expected: usize, found: usize },

    #[error("non-finite value at flat index {index}")]
    NonFinite { index: usize },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid parameter: {0}")]
    InvalidParam(String),

    #[error("{count} depth values at or beyond the unambiguous range {range_mm:.3} mm")]
    WrapViolation { count: usize, range_mm: f64 },

    #[error("both mixing amplitudes are zero")]
    ZeroAmplitude,

    #[error("loss node is not connected to any parameter")]
    Disconnected,

    #[error("parse error: {0}")]
    Parse(String),

    #[error("training diverged at epoch {epoch}, batch {batch}{}", dump.as_ref().map(|p| format!("; state written to {}", p.display())).unwrap_or_default())]
    Diverged {
        epoch: usize,
        batch: usize,
        dump: Option<PathBuf>,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

macro_rules! ensure {
    ($cond:expr, $variant:ident, $($fmt:tt)+) => {
        if !$cond {
            return Err($crate::error::Error::$variant(format!($($fmt)+)));
        }
    };
}
pub(crate) use ensure;
