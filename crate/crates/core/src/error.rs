use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("empty softmax support")]
    EmptySoftmaxSupport,

    #[error("non-finite objective")]
    NonFiniteObjective,

    #[error("nothing to stretch")]
    NothingToStretch,

    #[error("d_k must be strictly smaller than d")]
    KeyDimTooLarge,

    #[error("empty token sequence")]
    EmptyTokenSequence,

    #[error("ragged batch")]
    RaggedBatch,

    #[error("no negatives available")]
    NoNegatives,

    #[error("caption exceeds context")]
    CaptionTooLong,

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("diverged")]
    Diverged,

    #[error("not a corpus file")]
    NotACorpusFile,

    #[error("not a checkpoint file")]
    NotACheckpoint,

    #[error("unexpected end of file")]
    UnexpectedEof,

    #[error("unsupported version {0}")]
    UnsupportedVersion(u32),

    #[error("malformed file: {0}")]
    Malformed(String),

    #[error("missing parameter `{0}` in checkpoint")]
    MissingParameter(String),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Errors that come from reading or writing files, as opposed to bad
    /// arguments or numerical trouble.
    pub fn is_format(&self) -> bool {
        matches!(
            self,
            Error::NotACorpusFile
                | Error::NotACheckpoint
                | Error::UnexpectedEof
                | Error::UnsupportedVersion(_)
                | Error::Malformed(_)
                | Error::MissingParameter(_)
                | Error::Io(_)
                | Error::Json(_)
        )
    }

    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            Error::Diverged | Error::NonFiniteObjective | Error::NonFinite(_)
        )
    }
}
