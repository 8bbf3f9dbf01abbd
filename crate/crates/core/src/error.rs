use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("matrix is not positive definite (pivot {pivot} at row {row})")]
    NotPositiveDefinite { row: usize, pivot: f64 },
    #[error("matrix is not symmetric (|a[{i}][{j}] - a[{j}][{i}]| = {gap})")]
    NotSymmetric { i: usize, j: usize, gap: f64 },
    #[error("triangular factor has a singular diagonal at row {0}")]
    SingularDiagonal(usize),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),

    #[error("tape is malformed: {0}")]
    MalformedTape(String),

    #[error("HiPPO order must be at least 1")]
    InvalidOrder,
    #[error("channel mismatch: state has {expected} channels, input has {got}")]
    ChannelMismatch { expected: usize, got: usize },
    #[error("empty sequence")]
    EmptySequence,
    #[error("state has not consumed any input")]
    EmptyState,
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("empty input")]
    EmptyInput,
    #[error("HiPPO order {order} must exceed kernel degree {degree}")]
    OrderTooLow { order: usize, degree: u32 },

    #[error("empty dataset")]
    EmptyDataset,
    #[error("loss became non-finite at epoch {epoch}: {value}")]
    NonFiniteLoss { epoch: usize, value: f64 },
    #[error("invalid model: {0}")]
    InvalidModel(String),

    #[error("hyperparameter grid is empty")]
    EmptyGrid,
    #[error("probe set is empty")]
    EmptyProbeSet,

    #[error("acquisition grid has {0} points, limit is 10^7")]
    GridTooLarge(u128),
    #[error("invalid acquisition config: {0}")]
    InvalidAcquisition(String),

    #[error("budget {budget} is smaller than the initial design of {initial} samples")]
    BudgetExhaustedBeforeStart { budget: usize, initial: usize },
    #[error("query {index}: {source}")]
    Query {
        index: usize,
        #[source]
        source: Box<Error>,
    },
    #[error("records come from different experiments: {0}")]
    MixedProblems(String),

    #[error("invalid config: {0}")]
    ConfigInvalid(String),
    #[error("parse error: {0}")]
    Parse(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn at_query(self, index: usize) -> Self {
        Error::Query {
            index,
            source: Box::new(self),
        }
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Parse(e.to_string())
    }
}
