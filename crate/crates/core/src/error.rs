use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("timestamp {t_ns} ns outside trajectory span [{start_ns}, {end_ns}]")]
    OutOfRange { t_ns: i64, start_ns: i64, end_ns: i64 },

    #[error("dimension mismatch for {what}: expected {expected}, got {got}")]
    DimensionMismatch { what: String, expected: usize, got: usize },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("invariant violated: {0}")]
    InvariantViolation(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error("regularized normal matrix is singular (lambda = {lambda})")]
    DegenerateDesign { lambda: f64 },

    #[error("height must be positive, got {0}")]
    NonPositiveHeight(f64),

    #[error("degenerate motion: {0}")]
    DegenerateMotion(String),

    #[error("insufficient overlap: {0}")]
    InsufficientOverlap(String),

    #[error("velocity must be non-negative, got {0}")]
    NegativeVelocity(f64),

    #[error("frame misalignment: {0}")]
    FrameMisalignment(String),

    #[error("no contact frames: sliding percentage is undefined")]
    NoContactFrames,

    #[error("collision primitive set is empty")]
    EmptyPrimitiveSet,

    #[error("ambiguous match: candidates {first} and {second} tie at IoU {iou}")]
    AmbiguousMatch { first: u64, second: u64, iou: f64 },

    #[error("box does not project: no edge sample lies in front of the camera")]
    NotProjectable,

    #[error("frame {frame}: {source}")]
    AtFrame {
        frame: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<Error>,
    },

    #[error("{path}: {source}")]
    File {
        path: PathBuf,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn at_frame(self, frame: usize) -> Self {
        Error::AtFrame {
            frame,
            source: Box::new(self),
        }
    }

    pub fn in_stage(self, stage: &str) -> Self {
        Error::Stage {
            stage: stage.to_string(),
            source: Box::new(self),
        }
    }

    pub fn in_file(self, path: impl Into<PathBuf>) -> Self {
        Error::File {
            path: path.into(),
            source: Box::new(self),
        }
    }

    /// Innermost error, looking through frame/stage/file context wrappers.
    pub fn root_cause(&self) -> &Error {
        match self {
            Error::AtFrame { source, .. } | Error::Stage { source, .. } | Error::File { source, .. } => {
                source.root_cause()
            }
            other => other,
        }
    }
}

pub(crate) fn dim_check(what: &str, expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(Error::DimensionMismatch {
            what: what.to_string(),
            expected,
            got,
        });
    }
    Ok(())
}
