use thiserror::Error;

/// Errors raised anywhere in the estimation pipeline.
#[derive(Debug, Error)]
pub enum SashError {
    #[error("parse error at row {row}, column `{column}`: {message}")]
    Parse {
        row: usize,
        column: String,
        message: String,
    },

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("degenerate kernel neighborhood at row {row} (denominator {denominator:e})")]
    DegenerateNeighborhood { row: usize, denominator: f64 },

    #[error("matrix is not positive semidefinite (min eigenvalue {min_eigenvalue:e})")]
    NotPositiveSemidefinite { min_eigenvalue: f64 },

    #[error("solver did not converge in {iterations} iterations (KKT residual {residual:e})")]
    NoConvergence { iterations: usize, residual: f64 },

    #[error("labels contain a single class")]
    SingleClass,

    #[error("coefficient diverged past the cap {cap} (quasi-separation)")]
    QuasiSeparation { cap: f64 },

    #[error("index values are degenerate: {0}")]
    DegenerateIndex(String),

    #[error("anchor coefficient {value:e} is below the floor {floor:e}; choose a stronger first covariate or enable anchor screening")]
    WeakAnchor { value: f64, floor: f64 },

    #[error("line search failed after {steps} halvings (objective {objective:e})")]
    LineSearch { steps: usize, objective: f64 },

    #[error("all tuning configurations failed:\n{0}")]
    AllConfigsFailed(String),

    #[error("iteration {iteration}: {source}")]
    AtIteration {
        iteration: usize,
        #[source]
        source: Box<SashError>,
    },

    #[error("site {site}: {source}")]
    AtSite {
        site: usize,
        #[source]
        source: Box<SashError>,
    },

    #[error("empty input: {0}")]
    Empty(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

/// Coarse failure class, used to pick process exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Data,
    Numerical,
}

impl SashError {
    pub fn class(&self) -> ErrorClass {
        match self {
            SashError::Parse { .. }
            | SashError::Dimension(_)
            | SashError::InvalidInput(_)
            | SashError::SingleClass
            | SashError::Empty(_)
            | SashError::Io(_)
            | SashError::Json(_)
            | SashError::Csv(_) => ErrorClass::Data,
            SashError::AtIteration { source, .. } | SashError::AtSite { source, .. } => {
                source.class()
            }
            _ => ErrorClass::Numerical,
        }
    }

    pub fn at_iteration(self, iteration: usize) -> Self {
        SashError::AtIteration {
            iteration,
            source: Box::new(self),
        }
    }

    pub fn at_site(self, site: usize) -> Self {
        SashError::AtSite {
            site,
            source: Box::new(self),
        }
    }

    /// Strips iteration/site context wrappers.
    pub fn root(&self) -> &SashError {
        match self {
            SashError::AtIteration { source, .. } | SashError::AtSite { source, .. } => {
                source.root()
            }
            other => other,
        }
    }
}

pub type Result<T> = std::result::Result<T, SashError>;
