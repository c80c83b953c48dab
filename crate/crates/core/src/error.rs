use std::path::PathBuf;

/// Errors raised by the `svsr` library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("point ({x:.4}, {y:.4}, {z:.4}) mm lies outside the volume extent ({ex:.4}, {ey:.4}, {ez:.4}) mm")]
    OutOfBounds {
        x: f64,
        y: f64,
        z: f64,
        ex: f64,
        ey: f64,
        ez: f64,
    },

    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },

    #[error("truncated payload: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },

    #[error("trailing data: {0} unexpected bytes after payload")]
    TrailingBytes(usize),

    #[error("zero dimension in header: {0:?}")]
    ZeroDimension([u32; 3]),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("measurement failed: {0}")]
    MeasurementFailed(String),

    #[error("undefined ratio: {0} region has zero mean")]
    UndefinedRatio(&'static str),

    #[error("insufficient data: need at least {needed}, got {got}")]
    InsufficientData { needed: usize, got: usize },

    #[error("undefined ICC: table has zero between- and within-subject variance")]
    UndefinedIcc,

    #[error("invalid state: {0}")]
    State(&'static str),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("training diverged at step {step} (epoch {epoch}): {reason}")]
    Diverged {
        step: usize,
        epoch: usize,
        reason: String,
        last_good: Option<PathBuf>,
    },

    #[error("stage {stage} failed")]
    Stage {
        stage: String,
        #[source]
        source: Box<Error>,
    },

    #[error("{context}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error("parse error: {0}")]
    Parse(String),
}

impl Error {
    pub(crate) fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            context: context.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
