use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("I/O error: {0}")]
    Stream(#[from] std::io::Error),

    #[error("{path}:{line}: {message}")]
    Malformed {
        path: String,
        line: usize,
        message: String,
    },

    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: String, found: String },

    #[error("unsupported format version {0}")]
    Version(u32),

    #[error("payload length mismatch: expected {expected} bytes, found {actual}")]
    PayloadLength { expected: u64, actual: u64 },

    #[error("non-finite value {value} at {context}")]
    NonFinite { value: f64, context: String },

    #[error("duplicate entity id {0}")]
    DuplicateEntityId(u64),

    #[error("duplicate title {title:?} (entities {first} and {second})")]
    DuplicateTitle {
        title: String,
        first: u64,
        second: u64,
    },

    #[error("dimension mismatch in {context}: expected {expected}, found {actual}")]
    Dimension {
        context: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error(
        "term id {term} outside layout (word vocab {word_vocab_size}, entities {entity_count})"
    )]
    TermOutOfRange {
        term: u32,
        word_vocab_size: u32,
        entity_count: u32,
    },

    #[error("layout mismatch: {0}")]
    LayoutMismatch(String),

    #[error("invalid weight {weight} for term {term}")]
    InvalidWeight { term: u32, weight: f64 },

    #[error("duplicate term id {0}")]
    DuplicateTerm(u32),

    #[error("entity {0} has no embedding row")]
    MissingEmbedding(u64),

    #[error("entity {0} is not in the entity vocabulary")]
    UnknownEntity(u64),

    #[error("duplicate candidate entity {0}")]
    DuplicateCandidate(u64),

    #[error("entity term {0} is not among the batch candidates")]
    NotInBatch(u32),

    #[error("duplicate document id {0:?}")]
    DuplicateDoc(String),

    #[error("duplicate record id {0:?}")]
    DuplicateRecord(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("HTTP status {status} from {url}: {body}")]
    HttpStatus {
        status: u16,
        url: String,
        body: String,
    },

    #[error("transport failure after {attempts} attempts: {message}")]
    Transport { attempts: u32, message: String },

    #[error("cannot parse completion ({reason}); raw text: {raw:?}")]
    Completion { reason: String, raw: String },

    #[error("non-finite gradient in {0}")]
    NonFiniteGradient(String),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn malformed(
        path: impl std::fmt::Display,
        line: usize,
        message: impl Into<String>,
    ) -> Self {
        Error::Malformed {
            path: path.to_string(),
            line,
            message: message.into(),
        }
    }
}
