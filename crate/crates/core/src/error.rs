use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("empty input: {0}")]
    EmptyInput(String),
    #[error("zero vector: {0}")]
    ZeroVector(String),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("non-finite loss: {0}")]
    NonFiniteLoss(String),
    #[error("gradient check failed: {0}")]
    GradCheckFailed(String),

    #[error("taxonomy parse error: {0}")]
    Parse(String),
    #[error("taxonomy structure error: {0}")]
    Structure(String),
    #[error("unknown node id {0}")]
    UnknownNode(usize),
    #[error("root node has no sibling")]
    RootHasNoSibling,
    #[error("node {0} is not a leaf")]
    NotALeaf(usize),

    #[error("empty bag: {0}")]
    EmptyBag(String),
    #[error("empty path")]
    EmptyPath,
    #[error("bad label: {0}")]
    BadLabel(String),

    #[error("empty evaluation set")]
    EmptyEval,
    #[error("no class has both positive and negative samples")]
    NoContributingClass,
    #[error("incomplete grouping: {0}")]
    IncompleteGrouping(String),

    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: String, found: String },
    #[error("unsupported format version {0}")]
    BadVersion(u16),
    #[error("truncated file: {0}")]
    TruncatedFile(String),
    #[error("non-finite payload: {0}")]
    NonFinitePayload(String),
    #[error("manifest error: {0}")]
    Manifest(String),
    #[error("length mismatch: {0}")]
    LengthMismatch(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("too few samples: {0}")]
    TooFewSamples(String),
    #[error("taxonomy hash mismatch: checkpoint {checkpoint}, taxonomy {taxonomy}")]
    HashMismatch { checkpoint: String, taxonomy: String },

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: io::Error,
    },
}

/// Process-level classification used by the CLI exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Data,
    Numeric,
}

impl Error {
    pub fn io(context: impl Into<String>, source: io::Error) -> Self {
        Error::Io {
            context: context.into(),
            source,
        }
    }

    /// Short machine-parsable identifier.
    pub fn code(&self) -> &'static str {
        match self {
            Error::ShapeMismatch(_) => "ShapeMismatch",
            Error::EmptyInput(_) => "EmptyInput",
            Error::ZeroVector(_) => "ZeroVector",
            Error::NonFinite(_) => "NonFinite",
            Error::NonFiniteLoss(_) => "NonFiniteLoss",
            Error::GradCheckFailed(_) => "GradCheckFailed",
            Error::Parse(_) => "ParseError",
            Error::Structure(_) => "StructureError",
            Error::UnknownNode(_) => "UnknownNode",
            Error::RootHasNoSibling => "RootHasNoSibling",
            Error::NotALeaf(_) => "NotALeaf",
            Error::EmptyBag(_) => "EmptyBag",
            Error::EmptyPath => "EmptyPath",
            Error::BadLabel(_) => "BadLabel",
            Error::EmptyEval => "EmptyEval",
            Error::NoContributingClass => "NoContributingClass",
            Error::IncompleteGrouping(_) => "IncompleteGrouping",
            Error::BadMagic { .. } => "BadMagic",
            Error::BadVersion(_) => "BadVersion",
            Error::TruncatedFile(_) => "TruncatedFile",
            Error::NonFinitePayload(_) => "NonFinitePayload",
            Error::Manifest(_) => "ManifestError",
            Error::LengthMismatch(_) => "LengthMismatch",
            Error::Config(_) => "ConfigError",
            Error::DimensionMismatch(_) => "DimensionMismatch",
            Error::TooFewSamples(_) => "TooFewSamples",
            Error::HashMismatch { .. } => "HashMismatch",
            Error::Io { .. } => "IoError",
        }
    }

    pub fn class(&self) -> ErrorClass {
        match self {
            Error::NonFinite(_) | Error::NonFiniteLoss(_) | Error::GradCheckFailed(_) => {
                ErrorClass::Numeric
            }
            _ => ErrorClass::Data,
        }
    }
}
