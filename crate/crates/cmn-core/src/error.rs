use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by the core library.
#[derive(Debug, Error)]
pub enum Error {
    /// Two matrices (or a matrix and a vector) have incompatible shapes.
    #[error("{op}: shape mismatch ({lhs_rows}x{lhs_cols} vs {rhs_rows}x{rhs_cols})")]
    Shape {
        op: &'static str,
        lhs_rows: usize,
        lhs_cols: usize,
        rhs_rows: usize,
        rhs_cols: usize,
    },

    /// Two vectors have different lengths.
    #[error("{op}: length mismatch ({lhs} vs {rhs})")]
    Length {
        op: &'static str,
        lhs: usize,
        rhs: usize,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// A vector's norm is below the floor required by a normalizing operation.
    #[error("degenerate vector: norm {norm:e} is below the {floor:e} floor")]
    DegenerateVector { norm: f64, floor: f64 },

    /// Write attempted on a frozen memory.
    #[error("memory is frozen: writes are rejected")]
    FrozenMemory,

    #[error("{what} index {index} out of range (size {size})")]
    IndexOutOfRange {
        what: &'static str,
        index: usize,
        size: usize,
    },

    /// Malformed byte stream or text input. `location` is a byte offset or
    /// `line N`, depending on the format.
    #[error("parse error at {location}: {message}")]
    Parse { location: String, message: String },

    /// A non-finite value surfaced during training.
    #[error("non-finite {what} at epoch {epoch}, batch {batch}")]
    NonFinite {
        what: &'static str,
        epoch: usize,
        batch: usize,
    },

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn parse_at_byte(offset: usize, message: impl Into<String>) -> Self {
        Error::Parse {
            location: format!("byte {offset}"),
            message: message.into(),
        }
    }

    pub(crate) fn parse_at_line(line: usize, message: impl Into<String>) -> Self {
        Error::Parse {
            location: format!("line {line}"),
            message: message.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
