use std::fmt;
use std::io;

/// Crate-wide error type.
#[derive(Debug)]
pub enum Error {
    /// Tensor extents are incompatible with the requested operation.
    ShapeMismatch {
        op: &'static str,
        detail: String,
    },
    /// Convolution kernel has an even side length.
    InvalidKernel {
        k: usize,
    },
    /// A scalar (single-element) tensor was required.
    NotScalar {
        elems: usize,
    },
    /// The tensor carries no node on the tape being queried.
    NodeNotOnTape,
    /// A binary file did not start with the expected magic bytes.
    BadMagic {
        expected: &'static str,
        found: [u8; 4],
    },
    /// A binary file ended before its declared payload.
    TruncatedFile {
        path: String,
    },
    /// A dataset label is outside [0, num_classes).
    LabelOutOfRange {
        label: usize,
        num_classes: usize,
    },
    /// Training loss or parameters became non-finite.
    DivergenceDetected {
        epoch: usize,
    },
    /// A class index is outside [0, num_classes).
    ClassOutOfRange {
        class: usize,
        num_classes: usize,
    },
    /// Underlying I/O failure.
    Io(io::Error),
    /// Malformed JSON config or manifest.
    Json(serde_json::Error),
    /// Catch-all for invalid configuration values.
    InvalidConfig(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::ShapeMismatch { op, detail } => write!(f, "shape mismatch in {op}: {detail}"),
            Self::InvalidKernel { k } => write!(f, "invalid kernel size {k}: must be odd"),
            Self::NotScalar { elems } => {
                write!(f, "expected a single-element tensor, got {elems} elements")
            }
            Self::NodeNotOnTape => write!(f, "tensor is not a node on this tape"),
            Self::BadMagic { expected, found } => {
                write!(f, "bad magic: expected {expected:?}, found {found:?}")
            }
            Self::TruncatedFile { path } => write!(f, "truncated file: {path}"),
            Self::LabelOutOfRange { label, num_classes } => {
                write!(f, "label {label} out of range for {num_classes} classes")
            }
            Self::DivergenceDetected { epoch } => {
                write!(f, "training diverged at epoch {epoch}: non-finite loss or parameters")
            }
            Self::ClassOutOfRange { class, num_classes } => {
                write!(f, "class index {class} out of range for {num_classes} classes")
            }
            Self::Io(e) => write!(f, "io failure: {e}"),
            Self::Json(e) => write!(f, "json error: {e}"),
            Self::InvalidConfig(msg) => write!(f, "invalid config: {msg}"),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Self::Io(e) => Some(e),
            Self::Json(e) => Some(e),
            _ => None,
        }
    }
}

impl From<io::Error> for Error {
    fn from(e: io::Error) -> Self {
        Self::Io(e)
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Self::Json(e)
    }
}
