// SPDX-License-Identifier: MIT OR Apache-2.0

//! Crate-wide error types.

use std::path::PathBuf;

/// Errors raised while decoding or encoding the binary containers.
///
/// Every variant carries the byte offset at which the problem was detected.
#[derive(Debug, thiserror::Error)]
pub enum FormatError {
    #[error("bad magic at offset 0: expected {expected:?}, found {found:?}")]
    BadMagic { expected: String, found: String },
    #[error("unsupported version {version} at offset {offset}")]
    UnsupportedVersion { offset: u64, version: u32 },
    #[error("unknown dtype code {code} at offset {offset}")]
    UnknownDtype { offset: u64, code: u8 },
    #[error("invalid shape at offset {offset}: {reason}")]
    InvalidShape { offset: u64, reason: String },
    #[error("truncated input at offset {offset}: expected {expected} bytes, got {actual}")]
    Truncated { offset: u64, expected: u64, actual: u64 },
    #[error("I/O error at byte offset {offset}: {source}")]
    Io {
        offset: u64,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{}: {source}", path.display())]
    Format {
        path: PathBuf,
        #[source]
        source: FormatError,
    },
    #[error(transparent)]
    Blob(#[from] FormatError),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    /// `field` is the path to the offending value, e.g. `steps[2].attn`.
    #[error("{}: invalid JSON at `{field}`: {source}", path.display())]
    Json {
        path: PathBuf,
        field: String,
        #[source]
        source: serde_json::Error,
    },
    /// A loaded object violates a documented invariant.
    #[error("validation error: {0}")]
    Validation(String),
    #[error("empty segmentation: no labeled pixels")]
    EmptySegmentation,
    #[error("length mismatch: expected {expected}, got {actual}")]
    LengthMismatch { expected: usize, actual: usize },
    #[error("value out of range: {0}")]
    OutOfRange(String),
    /// Detection metrics need at least one positive and one negative.
    #[error("detection needs both classes: {n_pos} real and {n_neg} hallucinated occurrences")]
    SingleClass { n_pos: usize, n_neg: usize },
    #[error("baseline unavailable for this trace: {0}")]
    BaselineUnavailable(String),
    #[error("missing ground truth for image {0:?}")]
    MissingGroundTruth(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, source: FormatError) -> Self {
        Error::Format {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        Error::Json {
            path: path.into(),
            field: ".".into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
