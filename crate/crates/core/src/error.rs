use std::path::PathBuf;

use thiserror::Error;

/// Coarse failure classes, used by the command line to pick an exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Config,
    Data,
    Runtime,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed document {path}: {message}")]
    Parse { path: PathBuf, message: String },

    #[error("missing file: {0}")]
    MissingFile(PathBuf),

    #[error("dangling segment id {segment_id} in image {image_id}: not present in label map")]
    DanglingSegment { image_id: String, segment_id: u64 },

    #[error("segment id {0} out of range for 24-bit label maps")]
    SegmentIdOutOfRange(u64),

    #[error("invalid data: {0}")]
    InvalidData(String),

    #[error("invariant violated: {0}")]
    Invariant(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("{path}:{line}: {message}")]
    VectorFile {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("candidate validation failed ({count} names after cleanup, expected 5-10); raw response: {raw:?}")]
    CandidateValidation { count: usize, raw: String },

    #[error("no recorded response for prompt digest {0}")]
    FixtureMiss(String),

    #[error("language model client failed: {0}")]
    Client(String),

    #[error("text encoder failed: {0}")]
    Encoder(String),

    #[error("degenerate ensemble: template embeddings average to zero")]
    DegenerateEnsemble,

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite values in {0}")]
    NonFinite(String),

    #[error("training diverged at step {step}; last good parameters saved to {checkpoint}")]
    Divergence { step: usize, checkpoint: PathBuf },

    #[error("unknown {what}: {id}")]
    Unknown { what: &'static str, id: String },

    #[error("name {name:?} claimed by several original classes: {classes:?}")]
    NameConflict { name: String, classes: Vec<String> },

    #[error("name {name:?} is not an allowed choice for segment {segment_id}")]
    DisallowedChoice { segment_id: u64, name: String },

    #[error("segment {0} is already decided")]
    AlreadyDecided(u64),

    #[error("missing {what} {path}: run {stage} first")]
    MissingPrerequisite {
        what: &'static str,
        path: PathBuf,
        stage: &'static str,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        let path = path.into();
        if source.kind() == std::io::ErrorKind::NotFound {
            return Error::MissingFile(path);
        }
        Error::Io { path, source }
    }

    pub fn parse(path: impl Into<PathBuf>, message: impl ToString) -> Self {
        Error::Parse {
            path: path.into(),
            message: message.to_string(),
        }
    }

    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Config(_) | Error::NameConflict { .. } => ErrorKind::Config,
            Error::Io { .. }
            | Error::Client(_)
            | Error::Encoder(_)
            | Error::Divergence { .. }
            | Error::NonFinite(_) => ErrorKind::Runtime,
            _ => ErrorKind::Data,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
