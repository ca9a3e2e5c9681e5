use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Broad failure class, used by front ends to pick an exit status.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Input,
    Numerical,
    Pattern,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("column '{0}' not found")]
    MissingColumn(String),

    #[error("malformed row {line}: column '{column}' has non-numeric value '{value}'")]
    MalformedRow {
        line: usize,
        column: String,
        value: String,
    },

    #[error("covariate '{column}' is partially missing within the {stratum} stratum (a covariate must be fully present or fully absent per stratum)")]
    PatternViolation { column: String, stratum: String },

    #[error("the {0} stratum has no rows")]
    EmptyStratum(String),

    #[error("{stratum} needs at least 2 rows, found {rows}")]
    InsufficientRows { stratum: String, rows: usize },

    #[error("covariate '{0}' is not observed in the rows used for this block")]
    MissingBlock(String),

    #[error("trial arm {0} is empty")]
    EmptyArm(u8),

    #[error("design matrix is numerically singular")]
    SingularDesign,

    #[error("covariance matrix is numerically singular (pivot {pivot:.3e})")]
    SingularCovariance { pivot: f64 },

    #[error("shift of covariate '{0}' is neither estimable from the data nor supplied")]
    MissingShift(String),

    #[error("variance must be positive, got {0}")]
    NonPositiveVariance(f64),

    #[error("denominator variance is zero")]
    ZeroDenominator,

    #[error("biased subsampling selected no rows")]
    EmptySelection,

    #[error("bootstrap skipped {skipped} of {reps} replicates (more than 5%)")]
    BootstrapFailure { skipped: usize, reps: usize },

    #[error("missing-covariate pattern mismatch: {0}")]
    PatternMismatch(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn class(&self) -> ErrorClass {
        match self {
            Error::MissingColumn(_)
            | Error::MalformedRow { .. }
            | Error::PatternViolation { .. }
            | Error::EmptyStratum(_)
            | Error::InsufficientRows { .. }
            | Error::EmptyArm(_)
            | Error::InvalidInput(_)
            | Error::Io(_)
            | Error::Csv(_)
            | Error::Json(_) => ErrorClass::Input,
            Error::MissingBlock(_) | Error::MissingShift(_) | Error::PatternMismatch(_) => {
                ErrorClass::Pattern
            }
            Error::SingularDesign
            | Error::SingularCovariance { .. }
            | Error::NonPositiveVariance(_)
            | Error::ZeroDenominator
            | Error::EmptySelection
            | Error::BootstrapFailure { .. } => ErrorClass::Numerical,
        }
    }
}
