use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("degenerate covariance: {0}")]
    DegenerateCovariance(String),

    #[error("degenerate rotation: quaternion norm {0:e} after offset")]
    DegenerateRotation(f64),

    #[error("near-singular distance {0:e} between camera and gaussian")]
    NearSingular(f64),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("dimension mismatch: {a:?} vs {b:?}")]
    DimensionMismatch { a: (usize, usize), b: (usize, usize) },

    #[error("image {w}x{h} is smaller than the {win}x{win} window")]
    ImageTooSmall { w: usize, h: usize, win: usize },

    #[error("backward called without a retained forward pass")]
    NoForwardPass,

    #[error("non-finite gradient in {0}")]
    NonFinite(String),

    #[error("frame count mismatch: expected {expected}, got {got} ({what})")]
    FrameCountMismatch {
        expected: usize,
        got: usize,
        what: &'static str,
    },

    #[error("missing feature vector on a dynamic gaussian")]
    MissingFeature,

    #[error("pruning at tau={tau} would remove all {n} gaussians")]
    PruneEmptiesScene { tau: f64, n: usize },

    #[error("config: {0}")]
    Config(String),

    #[error("parse error in {what}: {msg}")]
    Parse { what: String, msg: String },

    #[error("numerical abort at step {step}: {msg} (last good checkpoint: {last_good})")]
    NumericalAbort {
        step: usize,
        msg: String,
        last_good: String,
    },

    #[error("io error on {path:?}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn parse(what: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Parse {
            what: what.into(),
            msg: msg.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
