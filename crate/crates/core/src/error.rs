use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("empty batch")]
    EmptyBatch,
    #[error("empty dataset")]
    EmptyDataset,
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("contract violation: {0}")]
    ContractViolation(String),
    #[error(transparent)]
    Decode(#[from] DecodeError),
    #[error(transparent)]
    Idx(#[from] IdxError),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    /// True for failures caused by malformed input data (IDX files, wire
    /// frames, datasets) as opposed to configuration mistakes.
    pub fn is_data_error(&self) -> bool {
        matches!(
            self,
            Error::Decode(_) | Error::Idx(_) | Error::EmptyDataset | Error::EmptyBatch
        )
    }

    pub fn is_config_error(&self) -> bool {
        matches!(self, Error::Config(_))
    }
}

/// Wire-format decode failures. Each corruption class has its own variant.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum DecodeError {
    #[error("bad magic")]
    BadMagic,
    #[error("bad version {0}")]
    BadVersion(u8),
    #[error("bad flags {0:#04x}")]
    BadFlags(u8),
    #[error("truncated")]
    Truncated,
    #[error("trailing bytes: {0}")]
    TrailingBytes(usize),
    #[error("non-increasing indices at position {0}")]
    NonIncreasingIndices(usize),
    #[error("index {index} out of range for model length {model_len}")]
    IndexOutOfRange { index: u64, model_len: u64 },
    #[error("invalid quantization range thr={thr} theta={theta}")]
    InvalidRange { thr: f32, theta: f32 },
    #[error("non-canonical padding")]
    NonCanonicalPadding,
    #[error("invalid trit code at position {0}")]
    InvalidTrit(usize),
    #[error("invalid scale {0}")]
    InvalidScale(f32),
}

/// IDX container parse failures.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum IdxError {
    #[error("bad magic")]
    BadMagic,
    #[error("unsupported element type {0:#04x}")]
    UnsupportedType(u8),
    #[error("truncated header")]
    TruncatedHeader,
    #[error("size mismatch: header declares {expected} bytes, payload has {got}")]
    SizeMismatch { expected: usize, got: usize },
    #[error("{0}")]
    Shape(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ConfigError {
    #[error("line {line}: expected `key = value`")]
    Syntax { line: usize },
    #[error("line {line}: unknown key `{key}`")]
    UnknownKey { line: usize, key: String },
    #[error("line {line}: duplicate key `{key}`")]
    DuplicateKey { line: usize, key: String },
    #[error("invalid value for `{key}`: {message}")]
    InvalidValue { key: String, message: String },
    #[error("missing required key `{0}`")]
    Missing(String),
    #[error("file not found: {0}")]
    FileNotFound(String),
    #[error("{0}")]
    Invalid(String),
}
