use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Errors raised anywhere in the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    /// Input outside the mathematical domain of an operation.
    #[error("domain error: {0}")]
    Domain(String),

    #[error("configuration error: {}", .0.join("; "))]
    Config(Vec<String>),

    /// Row-level data validation failures (row numbers are 1-based, header excluded).
    #[error("validation failed: {}", format_rows(.0))]
    Validation(Vec<RowError>),

    #[error("ingestion error at row {row}: {message}")]
    Ingestion { row: usize, message: String },

    #[error("singular design: column(s) {} are linearly dependent on earlier columns", .columns.join(", "))]
    SingularDesign { columns: Vec<String> },

    #[error("non-finite value at layer {layer} ({name})")]
    NonFinite { layer: usize, name: &'static str },

    #[error("non-finite model output for coalition {coalition}")]
    NonFiniteCoalition { coalition: usize },

    #[error("bandwidth error: {0}")]
    Bandwidth(String),

    #[error("network error after {attempts} attempt(s): {message}")]
    Network { attempts: u32, message: String },

    #[error("corrupt response: {0}")]
    CorruptResponse(String),

    #[error("request denied with HTTP status {status}")]
    Auth { status: u16 },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error("png: {0}")]
    Png(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

/// One failing row in a validated input file.
#[derive(Debug, Clone, PartialEq)]
pub struct RowError {
    pub row: usize,
    pub message: String,
}

fn format_rows(rows: &[RowError]) -> String {
    rows.iter()
        .map(|r| format!("row {}: {}", r.row, r.message))
        .collect::<Vec<_>>()
        .join("; ")
}

impl Error {
    pub fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Whether retrying the same request could succeed.
    pub fn is_retryable(&self) -> bool {
        matches!(self, Error::Network { .. })
    }
}
