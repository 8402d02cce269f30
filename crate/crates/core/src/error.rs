use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by the detection engine.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid box: {0}")]
    InvalidBox(String),

    #[error("degenerate geometry: {0}")]
    DegenerateGeometry(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("format error in {source_name} at {location}: {message}")]
    Format {
        source_name: String,
        location: FormatLocation,
        message: String,
    },

    #[error("synthetic scene error: {0}")]
    Synth(String),

    #[error("I/O error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Where inside an input a format error was found.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FormatLocation {
    ByteOffset(u64),
    Line(usize),
}

impl std::fmt::Display for FormatLocation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            FormatLocation::ByteOffset(off) => write!(f, "byte offset {off}"),
            FormatLocation::Line(line) => write!(f, "line {line}"),
        }
    }
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for failures caused by the filesystem rather than by the content.
    pub fn is_io(&self) -> bool {
        matches!(self, Error::Io { .. })
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
