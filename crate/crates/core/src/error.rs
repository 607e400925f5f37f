//! Crate-wide error type.

use std::path::PathBuf;

/// Every failure the engine can report.
///
/// Variant names follow the error contract of each operation, so callers can
/// match on the precise condition rather than on message text.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimensions {height}x{width} are not divisible by {factor}")]
    NonDivisibleDimensions {
        height: usize,
        width: usize,
        factor: usize,
    },
    #[error("non-finite value in {0}")]
    NonFiniteInput(&'static str),
    #[error("empty prompt (request the null prompt explicitly for unconditional embeddings)")]
    EmptyPrompt,
    #[error("timestep {0} is not part of the backend's schedule")]
    UnknownTimestep(u32),
    #[error("{kind} hook index {index} out of range (backend declares {count})")]
    HookIndexOutOfRange {
        kind: &'static str,
        index: usize,
        count: usize,
    },
    #[error("requested {requested} steps but the backend schedule has {scheduled}")]
    StepsMismatch { requested: usize, scheduled: usize },
    #[error("incomplete trajectory: {0}")]
    IncompleteTrajectory(String),
    #[error("text region adapter unavailable: {0}")]
    AdapterUnavailable(String),
    #[error("region {index} lies outside the {width}x{height} image")]
    OutOfBoundsRegion {
        index: usize,
        width: usize,
        height: usize,
    },
    #[error("index {index} out of range for {len} steps")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("channel mismatch: {left} vs {right}")]
    ChannelMismatch { left: usize, right: usize },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("no style attention packet for layer {layer} at timestep {timestep}")]
    MissingStylePacket { layer: usize, timestep: u32 },
    #[error("no content residual packet for layer {0}")]
    MissingContentPacket(usize),
    #[error("skip stage {stage} unknown (backend declares {count})")]
    UnknownStage { stage: usize, count: usize },
    #[error("timestep mismatch: expected {expected:?}, found {found:?}")]
    TimestepMismatch {
        expected: Option<u32>,
        found: Option<u32>,
    },
    #[error("no text region detected and no mask supplied")]
    NoTextRegion,
    #[error("scorer unavailable: {0}")]
    ScorerUnavailable(String),
    #[error("cannot render a report from zero records")]
    EmptyRecords,
    #[error("backend unavailable: {0}")]
    BackendUnavailable(String),
    #[error("unknown backend id `{0}`")]
    UnknownBackend(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("malformed {what}: {message}")]
    Format { what: &'static str, message: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(what: &'static str, message: impl ToString) -> Self {
        Error::Format {
            what,
            message: message.to_string(),
        }
    }
}
