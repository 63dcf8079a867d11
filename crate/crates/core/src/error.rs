//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {context}: expected {expected}, got {got}")]
    ShapeMismatch {
        context: &'static str,
        expected: String,
        got: String,
    },

    /// A pivot fell below the singularity threshold during an SPD solve.
    #[error("singular system in {context}: pivot {pivot:.3e} below threshold {threshold:.3e}")]
    SingularSystem {
        context: String,
        pivot: f64,
        threshold: f64,
    },

    #[error("all token rows are degenerate (norm < 1e-12); cosine undefined")]
    DegenerateRows,

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("{context}: {value} out of range [{min}, {max}]")]
    OutOfRange {
        context: &'static str,
        value: usize,
        min: usize,
        max: usize,
    },

    #[error("token id {id} out of range for vocabulary of {vocab}")]
    TokenOutOfRange { id: u32, vocab: usize },

    #[error("empty calibration set")]
    EmptyCalibration,

    #[error("bad magic: expected \"FGPT\", found {found:?}")]
    BadMagic { found: [u8; 4] },

    #[error("unsupported container version {found} (this build reads version {expected})")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("truncated {what}: need {needed} bytes, have {available}")]
    Truncated {
        what: &'static str,
        needed: u64,
        available: u64,
    },

    #[error("tensor \"{name}\": shape {shape:?} does not match payload of {bytes} bytes")]
    ShapeLengthMismatch {
        name: String,
        shape: Vec<usize>,
        bytes: u64,
    },

    #[error("manifest names no tensor \"{0}\"")]
    MissingTensor(String),

    #[error("manifest error: {0}")]
    Manifest(String),

    #[error("stage {stage} failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(context: &'static str, expected: impl ToString, got: impl ToString) -> Self {
        Error::ShapeMismatch {
            context,
            expected: expected.to_string(),
            got: got.to_string(),
        }
    }

    pub(crate) fn in_stage(stage: &'static str) -> impl FnOnce(Error) -> Error {
        move |source| Error::Stage {
            stage,
            source: Box::new(source),
        }
    }
}
