//! Crate-wide error type. Every fallible operation returns [`Result`] with a
//! variant that names the offending shapes, weights, or file structure.

use std::fmt;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Dimension mismatch; `detail` names both shapes.
    Shape {
        op: &'static str,
        detail: String,
    },
    /// Invalid model / plan / adapter / run configuration.
    Config(String),
    /// NaN or infinity where finite values are required.
    Numeric(String),
    /// API contract violation (non-scalar loss, reused tape, ...).
    Contract(String),
    /// A weight name required by the config is absent from the store.
    MissingWeight(String),
    /// Merge was asked to fold a nonlinear adapter into a linear layer.
    NonMergeable(String),
    Checkpoint(CheckpointError),
    Data(String),
    Io(String),
}

#[derive(Debug, Clone, PartialEq)]
pub enum CheckpointError {
    BadMagic([u8; 4]),
    UnsupportedVersion(u32),
    /// File ends before the declared section does.
    Truncated {
        section: &'static str,
        needed: u64,
        available: u64,
    },
    Manifest(String),
    UnknownDtype(String),
    /// byte_length disagrees with shape x element size.
    LengthMismatch {
        name: String,
        expected: u64,
        declared: u64,
    },
    Overlap {
        a: String,
        b: String,
    },
    OutOfBounds {
        name: String,
    },
    /// Stores are homogeneous; a file mixing f32 and f64 tensors is rejected.
    MixedDtype,
    BadName(String),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Shape { op, detail } => write!(f, "shape error in {op}: {detail}"),
            Error::Config(msg) => write!(f, "config error: {msg}"),
            Error::Numeric(msg) => write!(f, "numeric error: {msg}"),
            Error::Contract(msg) => write!(f, "contract error: {msg}"),
            Error::MissingWeight(name) => write!(f, "checkpoint is missing weight `{name}`"),
            Error::NonMergeable(msg) => write!(f, "non-mergeable adapter: {msg}"),
            Error::Checkpoint(e) => write!(f, "checkpoint error: {e}"),
            Error::Data(msg) => write!(f, "dataset error: {msg}"),
            Error::Io(msg) => write!(f, "io error: {msg}"),
        }
    }
}

impl fmt::Display for CheckpointError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CheckpointError::BadMagic(m) => write!(f, "bad magic {m:?}"),
            CheckpointError::UnsupportedVersion(v) => write!(f, "unsupported format version {v}"),
            CheckpointError::Truncated {
                section,
                needed,
                available,
            } => {
                write!(
                    f,
                    "truncated {section}: need {needed} bytes, have {available}"
                )
            }
            CheckpointError::Manifest(msg) => write!(f, "manifest: {msg}"),
            CheckpointError::UnknownDtype(d) => write!(f, "unknown dtype `{d}`"),
            CheckpointError::LengthMismatch {
                name,
                expected,
                declared,
            } => {
                write!(
                    f,
                    "`{name}`: byte_length {declared} != shape-implied {expected}"
                )
            }
            CheckpointError::Overlap { a, b } => {
                write!(f, "byte ranges of `{a}` and `{b}` overlap")
            }
            CheckpointError::OutOfBounds { name } => {
                write!(f, "byte range of `{name}` exceeds file")
            }
            CheckpointError::MixedDtype => write!(f, "mixed tensor dtypes in one store"),
            CheckpointError::BadName(n) => write!(f, "tensor name `{n}` violates the name grammar"),
        }
    }
}

impl std::error::Error for Error {}
impl std::error::Error for CheckpointError {}

impl From<CheckpointError> for Error {
    fn from(e: CheckpointError) -> Self {
        Error::Checkpoint(e)
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl Error {
    /// Process exit code for the CLI: verification failures are 1,
    /// usage/config/data problems are 2.
    pub fn exit_code(&self) -> i32 {
        2
    }
}
