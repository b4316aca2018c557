use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed JSON in {context}: {source}")]
    Json {
        context: String,
        #[source]
        source: serde_json::Error,
    },

    #[error("CSV error in {context}: {source}")]
    Csv {
        context: String,
        #[source]
        source: csv::Error,
    },

    #[error("missing plane file {0}")]
    MissingPlane(PathBuf),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("dates are not strictly increasing: {0}")]
    DateOrder(String),

    #[error("unknown band name '{0}'")]
    UnknownBand(String),

    #[error("unknown index name '{0}'")]
    UnknownIndex(String),

    #[error("cube has no bands")]
    EmptyBands,

    #[error("missing band {band} required for {purpose}")]
    MissingBand { band: String, purpose: String },

    #[error("index ({date}, {band}, {row}, {col}) out of range")]
    OutOfRange {
        date: usize,
        band: usize,
        row: usize,
        col: usize,
    },

    #[error("unknown district '{0}'")]
    UnknownDistrict(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("grid mismatch: {0}")]
    GridMismatch(String),

    #[error("every scene was dropped (threshold {threshold})")]
    EmptyCube { threshold: f64 },

    #[error("stage window {stage} contains no cube dates")]
    EmptyWindow { stage: String },

    #[error("invalid stage windows: {0}")]
    InvalidWindows(String),

    #[error("transition into {stage} never crossed by a majority of reference fields")]
    UnresolvedTransition { stage: String },

    #[error("missing composite for {index} in stage {stage}")]
    MissingComposite { index: String, stage: String },

    #[error("invalid calibration: {0}")]
    InvalidCalibration(String),

    #[error("insufficient samples: need {needed}, have {have} ({context})")]
    InsufficientSamples {
        needed: usize,
        have: usize,
        context: String,
    },

    #[error("reference set contains a single class: {0}")]
    SingleClass(String),

    #[error("empty cluster '{0}'")]
    EmptyCluster(String),

    #[error("unmatched district names: {}", .0.join(", "))]
    UnmatchedDistricts(Vec<String>),

    #[error("point {0} is missing a truth or prediction label")]
    UnlabeledPoint(usize),

    #[error("confusion matrix is empty")]
    EmptyMatrix,

    #[error("invalid reference polygons: {0}")]
    InvalidReference(String),

    #[error("{stage}: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<Error>,
    },

    #[error("internal invariant violated: {0}")]
    Invariant(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn json(context: impl Into<String>, source: serde_json::Error) -> Self {
        Error::Json {
            context: context.into(),
            source,
        }
    }

    /// Wraps an error with the pipeline step it came from.
    pub fn in_stage(self, stage: impl Into<String>) -> Self {
        Error::Stage {
            stage: stage.into(),
            source: Box::new(self),
        }
    }

    /// True for errors that indicate a broken internal invariant rather than bad input.
    pub fn is_internal(&self) -> bool {
        match self {
            Error::Invariant(_) => true,
            Error::Stage { source, .. } => source.is_internal(),
            _ => false,
        }
    }
}
