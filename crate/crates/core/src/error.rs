use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Failure classes surfaced by the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("input error: {0}")]
    Input(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("degenerate degree at node {node}: degree {degree}")]
    DegenerateDegree { node: usize, degree: f64 },
    #[error("empty group: coarse node {0} has no assigned fine nodes")]
    EmptyGroup(usize),
    #[error("usage error: {0}")]
    Usage(String),
    #[error("io error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("parse error in {}: {message}", path.display())]
    Parse { path: PathBuf, message: String },
}

/// Coarse classification used for process exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Usage,
    Data,
    Numeric,
}

impl Error {
    pub fn class(&self) -> ErrorClass {
        match self {
            Error::Config(_) | Error::Usage(_) => ErrorClass::Usage,
            Error::Numeric(_) | Error::DegenerateDegree { .. } => ErrorClass::Numeric,
            Error::Shape(_)
            | Error::Input(_)
            | Error::Data(_)
            | Error::EmptyGroup(_)
            | Error::Io { .. }
            | Error::Parse { .. } => ErrorClass::Data,
        }
    }

    /// Short machine-readable tag for the failure kind.
    pub fn tag(&self) -> &'static str {
        match self {
            Error::Shape(_) => "shape",
            Error::Config(_) => "config",
            Error::Input(_) => "input",
            Error::Data(_) => "data",
            Error::Numeric(_) => "numeric",
            Error::DegenerateDegree { .. } => "degenerate-degree",
            Error::EmptyGroup(_) => "empty-group",
            Error::Usage(_) => "usage",
            Error::Io { .. } => "io",
            Error::Parse { .. } => "parse",
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Parse {
            path: path.into(),
            message: message.into(),
        }
    }
}
