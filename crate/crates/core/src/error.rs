use std::path::PathBuf;

use thiserror::Error;

/// Largest order accepted by the variance-adjusted prior.
pub const MAX_PRIOR_ORDER: usize = 25;

/// Largest order accepted for raw basis evaluation.
pub const MAX_BASIS_ORDER: usize = 64;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("Bernstein order {order} is outside the supported range 1..={max}")]
    OrderOutOfRange { order: usize, max: usize },

    #[error(
        "prior scale for order {order} has non-positive entries (min {min_entry:e}); \
         the adjusted prior is only valid for orders up to {MAX_PRIOR_ORDER}"
    )]
    NonPositiveScale { order: usize, min_entry: f64 },

    #[error("linear system is singular: pivot {pivot:e} in column {column}")]
    SingularSystem { column: usize, pivot: f64 },

    #[error("invalid domain for dimension {dim}: lower {lower} must be below upper {upper}")]
    InvalidDomain { dim: usize, lower: f64, upper: f64 },

    #[error("coordinate {value} of dimension {dim} lies outside the unit box after scaling")]
    OutOfDomain { dim: usize, value: f64 },

    #[error("non-finite gradient{}", match .iteration { Some(i) => format!(" at iteration {i}"), None => String::new() })]
    NonFiniteGradient { iteration: Option<usize> },

    #[error("dataset is empty")]
    EmptyData,

    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: usize, got: usize },

    #[error("length mismatch: {left} predictions vs {right} targets")]
    LengthMismatch { left: usize, right: usize },

    #[error("cannot parse {value:?} as a number at row {row}, column {column:?}")]
    Parse { row: usize, column: String, value: String },

    #[error("column {0:?} not found in header")]
    MissingColumn(String),

    #[error("input has {got} feature columns but the model expects {expected}")]
    SchemaMismatch { expected: usize, got: usize },

    #[error("{count} control points exceeds the enumeration limit of {limit}")]
    TooLarge { count: usize, limit: usize },

    #[error("kernel matrix is not positive definite")]
    NotPositiveDefinite,

    #[error("invalid model file: {0}")]
    ModelFormat(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for this error family.
    ///
    /// * 3: model configuration (orders, domain, shapes)
    /// * 4: input data and files
    /// * 5: numerical failure
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::OrderOutOfRange { .. }
            | Error::NonPositiveScale { .. }
            | Error::InvalidDomain { .. }
            | Error::ShapeMismatch { .. }
            | Error::TooLarge { .. }
            | Error::InvalidArgument(_) => 3,
            Error::OutOfDomain { .. }
            | Error::EmptyData
            | Error::LengthMismatch { .. }
            | Error::Parse { .. }
            | Error::MissingColumn(_)
            | Error::SchemaMismatch { .. }
            | Error::ModelFormat(_)
            | Error::Io { .. }
            | Error::Csv(_) => 4,
            Error::SingularSystem { .. }
            | Error::NonFiniteGradient { .. }
            | Error::NotPositiveDefinite => 5,
        }
    }
}
