use thiserror::Error;

/// Coarse failure classes, mapped onto process exit codes by the CLI.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorCategory {
    ConfigInvalid,
    DataError,
    NumericalFailure,
}

impl ErrorCategory {
    pub fn exit_code(self) -> i32 {
        match self {
            ErrorCategory::ConfigInvalid => 2,
            ErrorCategory::DataError => 3,
            ErrorCategory::NumericalFailure => 4,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ErrorCategory::ConfigInvalid => "config_invalid",
            ErrorCategory::DataError => "data_error",
            ErrorCategory::NumericalFailure => "numerical_failure",
        }
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("measure carries no labels but a labeled operation was requested")]
    MissingLabels,
    #[error("label {label} out of range for {n_classes} classes")]
    LabelOutOfRange { label: usize, n_classes: usize },
    #[error("support contains a non-finite value at row {row}")]
    NonFiniteSupport { row: usize },
    #[error("empty measure")]
    EmptyMeasure,
    #[error("feature {0} has zero variance over the pooled data")]
    ZeroVarianceFeature(usize),
    #[error("class {0} has no samples")]
    EmptyClass(usize),
    #[error("label penalty is degenerate: all support points coincide")]
    DegenerateBeta,
    #[error("label sequence has length {found}, expected {expected}")]
    LabelLengthMismatch { expected: usize, found: usize },

    #[error("cost matrix contains a non-finite or negative entry")]
    NonFiniteCost,
    #[error("sinkhorn did not converge: marginal error {marginal_error:.3e}")]
    NotConverged { marginal_error: f64 },
    #[error("cost matrix is {rows}x{cols}, expected square")]
    NotSquare { rows: usize, cols: usize },
    #[error("assignment size {n} exceeds cap {cap}")]
    CapExceeded { n: usize, cap: usize },
    #[error("plan row {0} has zero mass")]
    ZeroRowMass(usize),
    #[error("degenerate transport at summary row {0}")]
    DegenerateTransport(usize),

    #[error("weights are not on the simplex (sum {sum}, min {min})")]
    SimplexViolation { sum: f64, min: f64 },
    #[error("labeled and unlabeled measures cannot be mixed in a labeled barycenter")]
    LabelMixing,
    #[error("non-finite gradient; learning rate too large?")]
    NonFiniteGradient,
    #[error("non-finite loss")]
    NonFiniteLoss,
    #[error("training diverged: loss {loss:.4e} exceeds 10x best {best:.4e}")]
    Diverged { loss: f64, best: f64 },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("invalid config: {0}")]
    ConfigInvalid(String),

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("more than one unlabeled domain ({0} and {1})")]
    MultipleUnlabeledDomains(String, String),
    #[error("no unlabeled domain in dataset")]
    NoUnlabeledDomain,
    #[error("inconsistent feature dimension at line {line}")]
    InconsistentDim { line: usize },
    #[error("schema version {found} not supported (expected {expected})")]
    SchemaVersionMismatch { expected: u32, found: u32 },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn category(&self) -> ErrorCategory {
        use Error::*;
        match self {
            InvalidParameter(_) | ConfigInvalid(_) | DegenerateBeta | SimplexViolation { .. } => {
                ErrorCategory::ConfigInvalid
            }
            NonFiniteCost
            | NotConverged { .. }
            | ZeroRowMass(_)
            | DegenerateTransport(_)
            | NonFiniteGradient
            | NonFiniteLoss
            | Diverged { .. } => ErrorCategory::NumericalFailure,
            _ => ErrorCategory::DataError,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
