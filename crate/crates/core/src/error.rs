use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("malformed section `{section}`: {reason}")]
    MalformedSection { section: String, reason: String },

    #[error("invalid {what}: {reason}")]
    Invalid { what: &'static str, reason: String },

    #[error("file not found: {}", .0.display())]
    MissingFile(PathBuf),

    #[error("I/O error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("JSON error in {context}: {source}")]
    Json {
        context: String,
        #[source]
        source: serde_json::Error,
    },

    #[error("database `{db_id}`: column index {index} out of range ({count} columns)")]
    DanglingColumnIndex {
        db_id: String,
        index: usize,
        count: usize,
    },

    #[error("unknown database `{0}`")]
    UnknownDb(String),

    #[error("SQL execution failed: {0}")]
    Exec(#[from] crate::sqlrun::ExecError),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("version mismatch: expected `{expected}`, found `{found}`")]
    VersionMismatch { expected: String, found: String },

    #[error("corrupted record at line {line}: {reason}")]
    CorruptedRecord { line: usize, reason: String },

    #[error("projection model mismatch: store built with `{expected}`, query uses `{found}`")]
    ModelMismatch { expected: String, found: String },

    #[error("backend authentication failed: {0}")]
    Auth(String),

    #[error("backend rate limit persisted after {attempts} attempts")]
    RateLimited { attempts: u32 },

    #[error("backend transport error: {0}")]
    Transport(String),

    #[error("malformed backend reply: {0}")]
    MalformedReply(String),

    #[error("no error id found in diagnosis: {0:?}")]
    UnparseableDiagnosis(String),

    #[error("prescription has no instruction")]
    UnparseablePrescription,

    #[error("no SQL statement found in completion")]
    NoSql,

    #[error("training requires at least two distinct labels, found {0}")]
    TooFewLabels(usize),

    #[error("non-finite value produced during training at epoch {epoch}")]
    NonFinite { epoch: usize },

    #[error("gradient check inconclusive: hinge value {hinge:e} is too close to the kink")]
    Inconclusive { hinge: f64 },

    #[error("undefined metric: {0}")]
    Undefined(&'static str),

    #[error("model `{0}` missing from pricing table")]
    UnknownModel(String),

    #[error("configuration error: {0}")]
    Config(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        let path = path.into();
        if source.kind() == std::io::ErrorKind::NotFound {
            Error::MissingFile(path)
        } else {
            Error::Io { path, source }
        }
    }

    pub(crate) fn json(context: impl Into<String>, source: serde_json::Error) -> Self {
        Error::Json {
            context: context.into(),
            source,
        }
    }

    pub(crate) fn invalid(what: &'static str, reason: impl Into<String>) -> Self {
        Error::Invalid {
            what,
            reason: reason.into(),
        }
    }

    /// Whether the error came from the LLM or embedding backend.
    pub fn is_backend(&self) -> bool {
        matches!(
            self,
            Error::Auth(_) | Error::RateLimited { .. } | Error::Transport(_) | Error::MalformedReply(_)
        )
    }
}
