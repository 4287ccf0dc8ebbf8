use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),
    #[error(transparent)]
    Param(#[from] ParamError),
    #[error(transparent)]
    Decode(#[from] DecodeError),
    #[error("encode error: {0}")]
    Encode(String),
    #[error("communication ledger is empty")]
    EmptyLedger,
    #[error("config error: {0}")]
    Config(String),
    /// Collaborator self-selected too few cells; the cross stage is closed.
    #[error("self-selection mask has {count} cells, below the minimum of {min_cells}")]
    Skip { count: usize, min_cells: usize },
    #[error("stale state for agent {agent}: last update at t={last}, step requested at t={requested}")]
    StaleState { agent: u16, last: i64, requested: i64 },
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ParamError {
    #[error("missing parameter `{0}`")]
    Missing(String),
    #[error("duplicate parameter `{0}`")]
    Duplicate(String),
    #[error("parameter `{name}` has shape {actual:?}, expected {expected:?}")]
    ShapeMismatch { name: String, expected: Vec<usize>, actual: Vec<usize> },
    #[error("parameter `{0}` contains non-finite values")]
    NonFinite(String),
    #[error("parameter `{name}`: rank {rank} exceeds 4")]
    Rank { name: String, rank: usize },
    #[error("malformed parameter file: {0}")]
    Format(String),
}

/// Wire decoding failures. Each corruption class maps to its own variant.
#[derive(Debug, Error, PartialEq, Eq)]
pub enum DecodeError {
    #[error("bad magic bytes")]
    BadMagic,
    #[error("unsupported wire version {0}")]
    UnsupportedVersion(u16),
    #[error("truncated packet: needed {needed} bytes, found {available}")]
    Truncated { needed: usize, available: usize },
    #[error("{0} trailing bytes after the last entry")]
    TrailingBytes(usize),
    #[error("invalid header: {0}")]
    InvalidHeader(&'static str),
    #[error("entry ({row}, {col}) outside {height}x{width} grid")]
    OutOfRange { row: u16, col: u16, height: u16, width: u16 },
    #[error("duplicate cell ({row}, {col})")]
    DuplicateCell { row: u16, col: u16 },
    #[error("entries not in row-major order at ({row}, {col})")]
    Unsorted { row: u16, col: u16 },
    #[error("non-finite payload value at ({row}, {col})")]
    NonFinite { row: u16, col: u16 },
}
