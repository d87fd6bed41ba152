use thiserror::Error;

pub type Result<T> = std::result::Result<T, FilterError>;

#[derive(Debug, Error)]
pub enum FilterError {
    #[error("numerical overflow in model `{model}` at state {state:?}")]
    NumericalOverflow { model: String, state: Vec<f64> },

    #[error("invalid level {level}: {reason}")]
    InvalidLevel { level: u32, reason: &'static str },

    #[error("unknown model `{0}`")]
    UnknownModel(String),

    #[error("exact simulation unavailable for model `{0}`")]
    ExactUnavailable(String),

    #[error("model mismatch: {0}")]
    ModelMismatch(String),

    #[error("degenerate weights at time {time}: every weight is zero or not finite")]
    DegenerateWeights { time: usize },

    #[error("invalid simplex: {0}")]
    InvalidSimplex(String),

    #[error("unsupported state dimension {0}; only d = 1 is supported here")]
    UnsupportedDimension(usize),

    #[error("invalid rate: {0}")]
    InvalidRate(String),

    #[error("invalid plan: {0}")]
    InvalidPlan(String),

    #[error("draw (l = {l}, p = {p}) needs {cost} Euler steps, above the budget of {budget}")]
    BudgetExceeded {
        l: u32,
        p: u32,
        cost: u64,
        budget: u64,
    },

    #[error("replicate {replicate} (l = {l}, p = {p}) failed: {source}")]
    ReplicateFailed {
        replicate: u64,
        l: u32,
        p: u32,
        #[source]
        source: Box<FilterError>,
    },

    #[error("result sets do not overlap in MSE range")]
    NonOverlappingRange,

    #[error("configuration error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl FilterError {
    /// Process exit code used by the `upf` binary.
    pub fn exit_code(&self) -> i32 {
        match self {
            FilterError::Io(_) | FilterError::Csv(_) | FilterError::Json(_) => 3,
            FilterError::Config(_)
            | FilterError::UnknownModel(_)
            | FilterError::ExactUnavailable(_)
            | FilterError::ModelMismatch(_)
            | FilterError::InvalidRate(_)
            | FilterError::InvalidPlan(_)
            | FilterError::InvalidLevel { .. }
            | FilterError::UnsupportedDimension(_)
            | FilterError::NonOverlappingRange => 1,
            FilterError::NumericalOverflow { .. }
            | FilterError::DegenerateWeights { .. }
            | FilterError::InvalidSimplex(_)
            | FilterError::BudgetExceeded { .. }
            | FilterError::ReplicateFailed { .. } => 2,
        }
    }
}
