use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("line {line}: unknown granular group {id:?}")]
    UnknownGroup { line: usize, id: String },
    #[error("line {line}: duplicate visit ({patient}, {visit})")]
    DuplicateVisit {
        line: usize,
        patient: String,
        visit: String,
    },
    #[error("patient {patient} recorded in groups {first:?} and {second:?}")]
    InconsistentGroup {
        patient: String,
        first: String,
        second: String,
    },
    #[error("schema: {0}")]
    Schema(String),
    #[error("taxonomy: {0}")]
    Taxonomy(String),
    #[error("config: {0}")]
    Config(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("only one class present: {0}")]
    SingleClass(String),
    #[error("feature {0} has no valid training values")]
    NoValidValues(String),
    #[error("optimizer did not converge after {iterations} iterations (gradient max-norm {gradient:.3e}{})", if *.diverging { ", coefficients diverging" } else { "" })]
    NonConvergence {
        iterations: usize,
        gradient: f64,
        diverging: bool,
    },
    #[error("need at least {needed} valid draws, got {got}")]
    InsufficientDraws { needed: usize, got: usize },
    #[error("likelihood-ratio statistic {0:.3e} is negative beyond tolerance")]
    NegativeStatistic(f64),
    #[error("numerical failure: {0}")]
    Numerical(String),
}

/// Coarse classification used for process exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Config,
    Data,
    Numerical,
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Config(_) => ErrorKind::Config,
            Error::NonConvergence { .. } | Error::NegativeStatistic(_) | Error::Numerical(_) => {
                ErrorKind::Numerical
            }
            _ => ErrorKind::Data,
        }
    }
}
