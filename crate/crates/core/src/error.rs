use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error in {op}: expected {expected}, got {got}")]
    Shape {
        op: &'static str,
        expected: String,
        got: String,
    },

    #[error("degenerate batch in {op}: need at least 2 values per channel, got {count}")]
    DegenerateBatch { op: &'static str, count: usize },

    #[error("invalid parameter: {0}")]
    Param(String),

    #[error("label {label} out of range for {classes} classes")]
    Index { label: usize, classes: usize },

    #[error("empty sequence in {0}")]
    EmptySequence(&'static str),

    #[error("spectral axis too narrow to split into sub-bands: {width} < 2")]
    BandTooNarrow { width: usize },

    #[error("waveform too short: need at least {min_samples} samples, got {got}")]
    WaveformTooShort { min_samples: usize, got: usize },

    #[error("degenerate utterance: CMVN needs at least 2 frames, got {frames}")]
    DegenerateUtterance { frames: usize },

    #[error("degenerate variance: all paired differences are zero")]
    DegenerateVariance,

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: malformed file: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("{path}: {source}")]
    Wav {
        path: PathBuf,
        #[source]
        source: hound::Error,
    },

    #[error("{path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },

    #[error("features missing for utterance {utterance_id} ({path})")]
    MissingFeatures { utterance_id: String, path: PathBuf },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("consistency error: {0}")]
    Consistency(String),
}

impl Error {
    pub(crate) fn shape(op: &'static str, expected: impl ToString, got: impl ToString) -> Self {
        Error::Shape {
            op,
            expected: expected.to_string(),
            got: got.to_string(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, reason: impl ToString) -> Self {
        Error::Format {
            path: path.into(),
            reason: reason.to_string(),
        }
    }
}
