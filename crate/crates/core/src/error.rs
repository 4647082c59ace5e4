use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("file not found: {}", .0.display())]
    MissingFile(PathBuf),

    #[error("malformed manifest {}: line {line}: {reason}", path.display())]
    MalformedManifest {
        path: PathBuf,
        line: usize,
        reason: String,
    },

    #[error("unknown label {label:?} on manifest line {line} (expected MetPos or MetNeg)")]
    UnknownLabel { label: String, line: usize },

    #[error("invalid {field}: {reason}")]
    InvalidSpec { field: &'static str, reason: String },

    #[error("invalid slide {id}: {reason}")]
    InvalidSlide { id: String, reason: String },

    #[error("degenerate histogram: fewer than two populated bins")]
    DegenerateHistogram,

    #[error("insufficient tissue: placed {placed} of {requested} non-overlapping tiles")]
    InsufficientTissue { placed: usize, requested: usize },

    #[error("no stain signal: {stained} of {total} pixels above the optical-density floor")]
    NoStainSignal { stained: usize, total: usize },

    #[error("degenerate stain basis: {0}")]
    DegenerateStainBasis(String),

    #[error("invalid downsample factor {0} (must be >= 1)")]
    InvalidFactor(f64),

    #[error("invalid crop size {0} (must be in 1..=224)")]
    InvalidCrop(u32),

    #[error("training data contains a single class")]
    SingleClassData,

    #[error("external scorer unavailable at {endpoint}: {reason}")]
    ExternalUnavailable { endpoint: String, reason: String },

    #[error("external scorer error {code}: {message}")]
    Protocol { code: String, message: String },

    #[error("unknown model {0}")]
    UnknownModel(String),

    #[error("cannot evaluate accuracy on an empty tile set")]
    EmptyEvaluation,

    #[error("invalid scorer config: {0}")]
    InvalidScorerConfig(String),

    #[error("cohort too small: {pos} MetPos / {neg} MetNeg cases (need at least 6 per class)")]
    CohortTooSmall { pos: usize, neg: usize },

    #[error("sweep incomplete: levels {levels:?} failed")]
    PartialSweep { levels: Vec<usize> },

    #[error("all x values are equal")]
    DegenerateX,

    #[error("need at least 4 points with two on each side of a break, got {0}")]
    InsufficientPoints(usize),

    #[error("ladder/model mismatch: {0}")]
    LadderModelMismatch(String),

    #[error("grid {cols}x{rows} is smaller than region size {k}")]
    GridTooSmall { cols: usize, rows: usize, k: usize },

    #[error("invalid config value for {key}: {reason}")]
    InvalidConfig { key: String, reason: String },

    #[error("malformed {what} at {}: {reason}", path.display())]
    MalformedArtifact {
        what: &'static str,
        path: PathBuf,
        reason: String,
    },

    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image error on {}: {source}", path.display())]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        let path = path.into();
        if source.kind() == std::io::ErrorKind::NotFound {
            Error::MissingFile(path)
        } else {
            Error::Io { path, source }
        }
    }

    /// True for errors caused by bad user input (flags, config, manifests)
    /// rather than failures while running a valid request.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::MissingFile(_)
                | Error::MalformedManifest { .. }
                | Error::UnknownLabel { .. }
                | Error::InvalidSpec { .. }
                | Error::InvalidSlide { .. }
                | Error::InvalidFactor(_)
                | Error::InvalidCrop(_)
                | Error::InvalidScorerConfig(_)
                | Error::CohortTooSmall { .. }
                | Error::InvalidConfig { .. }
                | Error::MalformedArtifact { .. }
        )
    }
}
