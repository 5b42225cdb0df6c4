use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by the reconstruction library.
#[derive(Debug, Error)]
pub enum NkfError {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("zero extent: every point of the cloud is identical")]
    ZeroExtent,

    #[error("epsilon must be positive and finite, got {0}")]
    InvalidEpsilon(f64),

    #[error("open surface: {0} edges are not shared by exactly two triangles")]
    OpenSurface(usize),

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("singular system: factorization failed after jitter up to {max_jitter:e}")]
    SingularSystem { max_jitter: f64 },

    #[error("weighted path requires regularization (lambda > 0)")]
    WeightedNeedsRegularization,

    #[error("system has not been solved")]
    Unsolved,

    #[error("nothing to sample: mesh has no triangles")]
    NothingToSample,

    #[error("grid resolution {0} is not divisible by 4")]
    ResolutionNotDivisible(usize),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("checkpoint: expected magic {}, found {}", String::from_utf8_lossy(expected), String::from_utf8_lossy(actual))]
    BadMagic { expected: [u8; 4], actual: [u8; 4] },

    #[error("checkpoint truncated: {0}")]
    Truncated(String),

    #[error("parse error in {path}: line {line}: {msg}")]
    Parse { path: PathBuf, line: usize, msg: String },

    #[error("no points parsed from {}", .0.display())]
    NoPoints(PathBuf),

    #[error("config: {0}")]
    Config(String),

    #[error("{stage}: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<NkfError>,
    },

    #[error("{}: {source}", path.display())]
    File {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl NkfError {
    /// Attaches a path to an I/O error.
    pub fn at(path: &std::path::Path) -> impl FnOnce(std::io::Error) -> NkfError + '_ {
        move |source| NkfError::File { path: path.to_path_buf(), source }
    }
}

pub type Result<T, E = NkfError> = std::result::Result<T, E>;
