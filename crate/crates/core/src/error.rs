use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Input failed one or more domain invariants.
    #[error("validation failed: {}", .0.join("; "))]
    Validation(Vec<String>),

    #[error("data error: {0}")]
    Data(String),

    /// The fixed-effect design is rank deficient.
    #[error("degenerate design: {0}")]
    DegenerateDesign(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("unknown term `{0}`")]
    UnknownTerm(String),

    /// A correlation of exactly ±1 has no finite Fisher z.
    #[error("correlation {0} has magnitude 1; Fisher z is infinite")]
    PerfectCorrelation(f64),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error in {path}: {message}")]
    Parse { path: PathBuf, message: String },
}

impl Error {
    pub fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(vec![msg.into()])
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for the CLI: 1 validation, 2 numerical, 3 I/O.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Validation(_) | Error::Data(_) | Error::UnknownTerm(_) | Error::Parse { .. } => {
                1
            }
            Error::DegenerateDesign(_) | Error::Numerical(_) | Error::PerfectCorrelation(_) => 2,
            Error::Io { .. } => 3,
        }
    }
}
