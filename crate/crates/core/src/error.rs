use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid box ({x_min}, {y_min}, {x_max}, {y_max}): {reason}")]
    InvalidBox {
        x_min: f64,
        y_min: f64,
        x_max: f64,
        y_max: f64,
        reason: &'static str,
    },

    #[error("missing file {0}")]
    MissingFile(PathBuf),

    #[error("{file}:{line}: {message}")]
    Malformed {
        file: PathBuf,
        line: usize,
        message: String,
    },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("undefined cosine: zero vector")]
    UndefinedCosine,

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimMismatch { expected: usize, actual: usize },

    #[error("channel mismatch: expected {expected:?}, got {actual:?}")]
    ChannelMismatch { expected: String, actual: String },

    #[error("missing feature for image {image_id} region {region_id} on channel {channel:?}")]
    MissingFeature {
        image_id: u64,
        region_id: u32,
        channel: String,
    },

    #[error("duplicate key: image {image_id} region {region_id}")]
    DuplicateKey { image_id: u64, region_id: u32 },

    #[error("bad feature store: {0}")]
    BadStore(String),

    #[error("region does not intersect the image")]
    RegionOutsideImage,

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("empty training class: {0}")]
    EmptyClass(&'static str),

    #[error("undefined fraction: no ground truth for {0}")]
    EmptyGroundTruth(String),

    #[error("prior not fitted for variant {0}")]
    UnfittedPrior(&'static str),

    #[error("no proposals for image {0}")]
    NoProposals(u64),

    #[error("brute-force guard exceeded: {count} proposals > {limit}")]
    GuardExceeded { count: usize, limit: usize },

    #[error("key mismatch: {0}")]
    KeyMismatch(String),

    #[error("infeasible synthetic spec: {0}")]
    InfeasibleSpec(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn malformed(file: impl Into<PathBuf>, line: usize, message: impl Into<String>) -> Self {
        Error::Malformed {
            file: file.into(),
            line,
            message: message.into(),
        }
    }
}
