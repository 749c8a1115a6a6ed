use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("character {ch:?} is not in the alphabet")]
    CharOutOfAlphabet { ch: char },
    #[error("password has {len} characters, maximum is {max}")]
    TooLong { len: usize, max: usize },
    #[error("corpus contains no usable passwords")]
    EmptyCorpus,
    #[error("invalid mask: {0}")]
    BadMaskSpec(String),
    #[error("non-finite activation in {0}")]
    NonFiniteActivation(&'static str),
    #[error("tape does not match network: {0}")]
    TapeMismatch(String),
    #[error("loss became non-finite at epoch {epoch}")]
    NonFiniteLoss { epoch: usize },
    #[error("checkpoint version {found} is not supported (expected {supported})")]
    VersionMismatch { found: String, supported: u32 },
    #[error("corrupt checkpoint: {0}")]
    CorruptPayload(String),
    #[error("charset digest mismatch: model {model}, runtime {runtime}")]
    CharsetMismatch { model: String, runtime: String },
    #[error("membership oracle unavailable: {0}")]
    OracleUnavailable(String),
    #[error("unsupported digest algorithm {0:?}")]
    UnsupportedDigest(String),
    #[error("split produced an empty {0} set")]
    EmptySplit(&'static str),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Coarse failure category, used by front ends to pick exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Usage,
    Data,
    Numeric,
    Io,
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::InvalidConfig(_) | Error::BadMaskSpec(_) => ErrorKind::Usage,
            Error::CharOutOfAlphabet { .. }
            | Error::TooLong { .. }
            | Error::EmptyCorpus
            | Error::VersionMismatch { .. }
            | Error::CorruptPayload(_)
            | Error::CharsetMismatch { .. }
            | Error::UnsupportedDigest(_)
            | Error::EmptySplit(_)
            | Error::TapeMismatch(_) => ErrorKind::Data,
            Error::NonFiniteActivation(_) | Error::NonFiniteLoss { .. } => ErrorKind::Numeric,
            Error::Io(_) | Error::OracleUnavailable(_) => ErrorKind::Io,
        }
    }

    /// Short stable identifier for machine-readable error lines.
    pub fn code(&self) -> &'static str {
        match self {
            Error::CharOutOfAlphabet { .. } => "char_out_of_alphabet",
            Error::TooLong { .. } => "too_long",
            Error::EmptyCorpus => "empty_corpus",
            Error::BadMaskSpec(_) => "bad_mask_spec",
            Error::NonFiniteActivation(_) => "non_finite_activation",
            Error::TapeMismatch(_) => "tape_mismatch",
            Error::NonFiniteLoss { .. } => "non_finite_loss",
            Error::VersionMismatch { .. } => "version_mismatch",
            Error::CorruptPayload(_) => "corrupt_payload",
            Error::CharsetMismatch { .. } => "charset_mismatch",
            Error::OracleUnavailable(_) => "oracle_unavailable",
            Error::UnsupportedDigest(_) => "unsupported_digest",
            Error::EmptySplit(_) => "empty_split",
            Error::InvalidConfig(_) => "invalid_config",
            Error::Io(_) => "io",
        }
    }
}
