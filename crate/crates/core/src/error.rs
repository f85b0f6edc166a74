use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes are incompatible for the named operation.
    #[error("{op}: dimension mismatch between {lhs:?} and {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid shape: {0}")]
    Shape(String),

    /// A forward cache was reused, or belongs to another segment or parameter version.
    #[error("cache state: {0}")]
    State(String),

    /// The peers disagree about which step or tensor comes next.
    #[error("protocol desync: {0}")]
    Desync(String),

    #[error("wire format: {0}")]
    Wire(String),

    #[error("role violation: {0}")]
    Role(String),

    #[error("loss: {0}")]
    Loss(String),

    #[error("plan: {0}")]
    Plan(String),

    #[error("config: {0}")]
    Config(String),

    #[error("dataset: {0}")]
    Dataset(String),

    #[error("peer reported error: {0}")]
    Remote(String),

    #[error("connection closed")]
    Disconnected,

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn dim(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Dimension {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }
}
