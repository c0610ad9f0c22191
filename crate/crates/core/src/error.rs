use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Broad failure category, used by front-ends to pick exit codes and message prefixes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Config,
    Data,
    Estimation,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("schema error: {0}")]
    Schema(String),

    #[error("parse error at row {row}, column '{column}': cannot read {value:?} as a number")]
    Parse {
        row: usize,
        column: String,
        value: String,
    },

    #[error("missing or non-finite values at {}", format_cells(.0))]
    MissingValues(Vec<(usize, String)>),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("degenerate design: {0}")]
    DegenerateDesign(String),

    #[error("solver did not converge after {iterations} iterations (last objective {objective})")]
    Solver { iterations: usize, objective: f64 },

    #[error("degenerate score: {0}")]
    DegenerateScore(String),

    #[error("kernel denominator vanishes at evaluation point {0}")]
    SmoothingDegeneracy(usize),

    #[error("propensity estimate is zero for arm members at indices {0:?}")]
    ZeroPropensity(Vec<usize>),

    #[error("unstable inverse weights: {0}")]
    UnstableWeights(String),

    #[error("estimation error: {0}")]
    Estimation(String),

    #[error("inference error: {0}")]
    Inference(String),

    #[error("covariance matrix is not positive definite")]
    NotPositiveDefinite,

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Config(_) => ErrorKind::Config,
            Error::Schema(_)
            | Error::Parse { .. }
            | Error::MissingValues(_)
            | Error::Domain(_)
            | Error::DegenerateDesign(_)
            | Error::Io(_)
            | Error::Csv(_) => ErrorKind::Data,
            _ => ErrorKind::Estimation,
        }
    }
}

fn format_cells(cells: &[(usize, String)]) -> String {
    const SHOWN: usize = 10;
    let mut parts: Vec<String> = cells
        .iter()
        .take(SHOWN)
        .map(|(row, col)| format!("(row {row}, column '{col}')"))
        .collect();
    if cells.len() > SHOWN {
        parts.push(format!("and {} more", cells.len() - SHOWN));
    }
    parts.join(", ")
}
