use std::path::PathBuf;

use thiserror::Error;

use crate::probmap::{Shape, ValidationReport};

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Coarse error classes; the CLI maps these onto exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    /// Malformed bytes in a file we were asked to parse.
    Parse,
    /// Well-formed file using a layout we do not accept.
    Format,
    /// Data or arguments that violate a documented invariant.
    Validation,
    /// The operating system refused a read or write.
    Io,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("non-finite value at index {index}")]
    NonFinite { index: usize },

    #[error("{0}")]
    Simplex(ValidationReport),

    #[error(
        "shape mismatch: model '{first}' is {first_shape} but model '{second}' is {second_shape}"
    )]
    ShapeMismatch {
        first: String,
        first_shape: Shape,
        second: String,
        second_shape: Shape,
    },

    #[error("{0}")]
    Invalid(String),

    #[error("parse error at byte {offset}: {message}")]
    Parse { offset: usize, message: String },

    #[error("payload size mismatch: expected {expected} bytes, found {actual}")]
    PayloadSize { expected: usize, actual: usize },

    #[error("unsupported format: {0}")]
    Format(String),

    #[error("{context}: label {label} is out of range for {num_classes} classes")]
    LabelOutOfRange {
        context: String,
        label: u8,
        num_classes: usize,
    },

    #[error("missing files: {}", list_paths(.0))]
    MissingFiles(Vec<PathBuf>),

    #[error("duplicate {kind} '{name}'")]
    Duplicate { kind: &'static str, name: String },

    #[error("unknown model '{0}'")]
    UnknownModel(String),

    #[error("unknown fusion rule '{0}'")]
    UnknownRule(String),

    #[error("empty evaluation: no class has a nonzero union")]
    EmptyEvaluation,

    #[error("class set has no palette")]
    MissingPalette,

    #[error("invalid manifest {}: {source}", .path.display())]
    Manifest {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    /// Any other error, tagged with the file it came from.
    #[error("{}: {source}", .path.display())]
    InFile {
        path: PathBuf,
        #[source]
        source: Box<Error>,
    },

    #[error("I/O error on {}: {source}", .path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

fn list_paths(paths: &[PathBuf]) -> String {
    paths
        .iter()
        .map(|p| p.display().to_string())
        .collect::<Vec<_>>()
        .join(", ")
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn invalid(message: impl Into<String>) -> Self {
        Error::Invalid(message.into())
    }

    pub fn parse(offset: usize, message: impl Into<String>) -> Self {
        Error::Parse {
            offset,
            message: message.into(),
        }
    }

    /// The innermost error, with any file tags removed.
    pub fn root(&self) -> &Error {
        match self {
            Error::InFile { source, .. } => source.root(),
            other => other,
        }
    }

    pub fn class(&self) -> ErrorClass {
        match self {
            Error::InFile { source, .. } => source.class(),
            Error::Parse { .. } | Error::PayloadSize { .. } | Error::Manifest { .. } => {
                ErrorClass::Parse
            }
            Error::Format(_) => ErrorClass::Format,
            Error::Io { .. } => ErrorClass::Io,
            _ => ErrorClass::Validation,
        }
    }
}
