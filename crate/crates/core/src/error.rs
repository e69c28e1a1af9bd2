use thiserror::Error;

/// Errors raised by the statistical routines.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum MetaError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("non-finite input: {0}")]
    NonFiniteInput(String),
    #[error("design matrix is rank deficient (column {column} is collinear)")]
    RankDeficient { column: usize },
    #[error("domain error: {0}")]
    Domain(String),
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("insufficient studies: need at least {needed}, have {got}")]
    InsufficientStudies { needed: usize, got: usize },
    #[error("too few studies for {params} regression parameters: have {got}")]
    TooFewStudies { params: usize, got: usize },
    #[error("too few clusters: need more than {needed}, have {got}")]
    TooFewClusters { needed: usize, got: usize },
    #[error("tau^2 must be nonnegative, got {0}")]
    NegativeTau2(f64),
    #[error("degenerate weights: {0}")]
    DegenerateWeights(String),
    #[error("degenerate design: {0}")]
    DegenerateDesign(String),
    #[error("covariance matrix of the tested coefficients is singular")]
    SingularCovariance,
    #[error("optimizer did not converge within {evaluations} evaluations")]
    NonConvergence { evaluations: usize },
    #[error("invalid model comparison: {0}")]
    InvalidComparison(String),
    #[error("record {0} has no degrees of freedom")]
    MissingDf(usize),
    #[error("all t statistics are zero")]
    ZeroTStatistic,
    #[error("variance components are both zero; intraclass correlations undefined")]
    ZeroHeterogeneity,
    #[error("unknown moderator column '{0}'")]
    UnknownModerator(String),
    #[error("moderator '{column}' is missing on record {record}")]
    MissingModerator { column: String, record: usize },
    #[error("invalid record {record}: {reason}")]
    InvalidRecord { record: usize, reason: String },
    #[error("unsupported method: {0}")]
    UnsupportedMethod(String),
    #[error("parse error at row {row}, column '{column}': {reason}")]
    Parse { row: usize, column: String, reason: String },
    #[error("schema error: {0}")]
    Schema(String),
    #[error("i/o error: {0}")]
    Io(String),
    #[error("{0}")]
    Usage(String),
}

impl MetaError {
    /// True for failures of the numerics rather than of the input.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            MetaError::RankDeficient { .. }
                | MetaError::DegenerateWeights(_)
                | MetaError::DegenerateDesign(_)
                | MetaError::SingularCovariance
                | MetaError::NonConvergence { .. }
                | MetaError::NonFiniteInput(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, MetaError>;
