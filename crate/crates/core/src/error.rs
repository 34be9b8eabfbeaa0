use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("pixel {pixel}: probabilities are out of range or sum to {sum}, not 1")]
    InvalidProbabilities { pixel: usize, sum: f64 },

    #[error("threshold {0} is outside (0, 1)")]
    InvalidThreshold(f64),

    #[error("{what}: expected {expected}, found {found}")]
    ShapeMismatch {
        what: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("{0} contains non-finite values")]
    NonFinite(&'static str),

    #[error("descriptors share no visible region and no unconfident mass")]
    NoComparableRegions,

    #[error("label {label} out of range (limit {limit})")]
    InvalidLabel { label: usize, limit: usize },

    #[error("invalid batch: {0}")]
    InvalidBatch(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("unknown variant `{0}` (expected full, g, w or d)")]
    UnknownVariant(String),

    #[error("probe {probe} has no matching gallery identity")]
    NoGalleryMatch { probe: usize },

    #[error("degenerate evaluation pool: {0}")]
    DegeneratePool(&'static str),

    #[error("training diverged at epoch {epoch}, step {step}: loss is not finite")]
    Diverged { epoch: usize, step: usize },

    #[error("malformed {kind} file {path}: {reason}")]
    Format {
        kind: &'static str,
        path: PathBuf,
        reason: String,
    },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image error on {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
