use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Crate-wide error type. Variants are grouped by where they surface:
/// data ingestion problems map to CLI exit code 2, numerical problems to 3.
#[derive(Debug, Error)]
pub enum Error {
    #[error("point {point} outside domain [{start}, {end}]")]
    OutsideDomain { point: f64, start: f64, end: f64 },
    #[error("invalid knot vector: {0}")]
    InvalidKnots(String),
    #[error("invalid interpolation nodes: {0}")]
    InvalidNodes(String),
    #[error("invalid matrix: {0}")]
    InvalidMatrix(String),
    #[error("invalid variance: {0}")]
    InvalidVariance(String),
    #[error("underdetermined fit: design matrix rank {rank} < {unknowns} unknowns")]
    UnderdeterminedFit { rank: usize, unknowns: usize },
    #[error("degenerate model: {0}")]
    DegenerateModel(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("fold {fold} has {size} curves, too few to calibrate level {level}")]
    InfeasibleFold { fold: usize, size: usize, level: f64 },
    #[error("unreliable estimate: effective sample size {ess:.1} < {min:.0}; increase draws or bandwidth")]
    UnreliableEstimate { ess: f64, min: f64 },
    #[error("schema error: {0}")]
    Schema(String),
    #[error("no usable data")]
    NoData,
    #[error("parse error: {0}")]
    Parse(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Process exit code the CLI reports for this error.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Schema(_) | Error::NoData | Error::Parse(_) | Error::Io(_) | Error::Csv(_) => 2,
            _ => 3,
        }
    }
}
