use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("rank deficient design (reciprocal condition {rcond:.3e}); collinear columns: {}", .columns.join(", "))]
    RankDeficient { rcond: f64, columns: Vec<String> },

    #[error("matrix is not positive definite: {0}")]
    NotPositiveDefinite(String),

    #[error("singular matrix: {0}")]
    Singular(String),

    #[error("quantile regression did not converge after {iterations} iterations (duality gap {gap:.3e})")]
    NotConverged {
        iterations: usize,
        gap: f64,
        best: Vec<f64>,
    },

    #[error(
        "refusing to test all {p} instruments jointly: the density weights are only consistent \
         when at least one untested valid instrument remains (over-identification requirement)"
    )]
    OverIdentification { p: usize },

    #[error("more than one endogenous column ({0}); run one first stage per endogenous variable")]
    MultipleEndogenous(usize),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("unknown column `{0}`")]
    UnknownColumn(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error("no observations left after dropping rows with missing values")]
    EmptyData,

    #[error("could not fetch {url}: {reason}")]
    Fetch { url: String, reason: String },

    #[error("corrupt archive {}: {reason}", .path.display())]
    CorruptArchive { path: PathBuf, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Process exit code for the CLI: 1 numerical, 2 usage or input, 3 I/O or network.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Domain(_)
            | Error::RankDeficient { .. }
            | Error::NotPositiveDefinite(_)
            | Error::Singular(_)
            | Error::NotConverged { .. } => 1,
            Error::Dimension(_)
            | Error::OverIdentification { .. }
            | Error::MultipleEndogenous(_)
            | Error::InvalidArgument(_)
            | Error::UnknownColumn(_)
            | Error::Parse(_)
            | Error::EmptyData => 2,
            Error::Fetch { .. } | Error::CorruptArchive { .. } | Error::Io(_) | Error::Json(_) => 3,
            Error::Csv(e) => {
                if e.is_io_error() {
                    3
                } else {
                    2
                }
            }
        }
    }
}
