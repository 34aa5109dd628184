use std::path::PathBuf;

use thiserror::Error;

/// Errors raised while parsing a trajectory buffer or a distilled-dataset binary.
#[derive(Debug, Error, PartialEq, Eq)]
pub enum FormatError {
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },
    #[error("unsupported format version {0}")]
    UnsupportedVersion(u32),
    #[error("truncated payload: expected {expected} bytes, found {actual}")]
    Truncated { expected: usize, actual: usize },
    #[error("checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    ChecksumMismatch { stored: u32, computed: u32 },
    #[error("unknown dtype tag {0}")]
    BadDtype(u8),
    #[error("invalid UTF-8 in metadata string")]
    BadUtf8,
    #[error("{0} trailing bytes after payload")]
    TrailingBytes(usize),
}

/// Config-file errors carry the 1-based line they were raised on (0 for
/// whole-file checks such as cross-key invariants).
#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("line {line}: unknown key `{key}`")]
    UnknownKey { line: usize, key: String },
    #[error("line {line}: `{key}`: cannot parse `{value}` as {expected}")]
    Type {
        line: usize,
        key: String,
        value: String,
        expected: &'static str,
    },
    #[error("line {line}: `{key}`: {message}")]
    Range { line: usize, key: String, message: String },
    #[error("line {line}: expected `key = value`, found `{text}`")]
    Syntax { line: usize, text: String },
    #[error("line {line}: duplicate key `{key}`")]
    Duplicate { line: usize, key: String },
}

/// Problems with a distilled-dataset export directory.
#[derive(Debug, Error, PartialEq)]
pub enum ExportError {
    #[error("missing file `{0}`")]
    MissingFile(&'static str),
    #[error("row count {found} does not equal classes × ipc = {expected}")]
    RowCount { expected: usize, found: usize },
    #[error("meta.txt: {0}")]
    Meta(String),
    #[error("labels: {0}")]
    Labels(String),
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite value: {0}")]
    Numeric(String),
    #[error("invalid input: {0}")]
    Validation(String),
    #[error("divergence at {stage} {index}: parameters became non-finite")]
    Divergence { stage: &'static str, index: usize },
    #[error("index out of range: {0}")]
    OutOfRange(String),
    #[error("degenerate expert pair: start and target parameters coincide")]
    DegeneratePair,
    #[error("class {class} has only {available} eligible samples, {required} required")]
    Init {
        class: usize,
        available: usize,
        required: usize,
    },
    #[error("{path}: {source}")]
    Format {
        path: PathBuf,
        #[source]
        source: FormatError,
    },
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("distilled export {path}: {source}")]
    Export {
        path: PathBuf,
        #[source]
        source: ExportError,
    },
    #[error("layout error: {0}")]
    Layout(String),
    #[error("label audit: {0}")]
    Audit(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
