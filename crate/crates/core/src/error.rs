use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = GrffError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum GrffError {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid shape: {0}")]
    Shape(String),

    #[error("degenerate batch: {0}")]
    DegenerateBatch(String),

    #[error("label error: {0}")]
    Label(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("schedule exhausted: epoch {epoch} is beyond the {total}-epoch schedule")]
    ScheduleExhausted { epoch: usize, total: usize },

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("format error: {0}")]
    Format(String),

    #[error("consistency error: {0}")]
    Consistency(String),

    #[error("model file version {found} cannot be migrated (expected {expected})")]
    Migration { found: u32, expected: u32 },

    #[error("checksum error: {0}")]
    Checksum(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("missing file {path}: {source}")]
    MissingFile {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl GrffError {
    pub(crate) fn dim(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        GrffError::Dimension {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    /// Process exit code used by the command-line runner.
    pub fn exit_code(&self) -> i32 {
        match self {
            GrffError::Config(_)
            | GrffError::ScheduleExhausted { .. }
            | GrffError::Migration { .. } => 2,
            GrffError::Parse { .. }
            | GrffError::Format(_)
            | GrffError::Consistency(_)
            | GrffError::Checksum(_)
            | GrffError::MissingFile { .. }
            | GrffError::Io(_)
            | GrffError::Label(_) => 3,
            GrffError::Numeric(_) => 4,
            GrffError::Dimension { .. }
            | GrffError::Shape(_)
            | GrffError::DegenerateBatch(_)
            | GrffError::Contract(_) => 2,
        }
    }
}

/// Opens a file, mapping "not found" style failures to [`GrffError::MissingFile`].
pub(crate) fn open_file(path: &std::path::Path) -> Result<std::fs::File> {
    std::fs::File::open(path).map_err(|source| GrffError::MissingFile {
        path: path.to_path_buf(),
        source,
    })
}
