use thiserror::Error;

use crate::money::Money;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("model pool is not sorted ascending by input and output price: {0}")]
    PoolOrdering(String),

    #[error("embedding dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("training labels required: {0}")]
    MissingLabels(String),

    #[error("utility collapse at batch size {batch_size}")]
    UtilityCollapse { batch_size: u32 },

    #[error("probe failed: {0}")]
    Probe(String),

    #[error("budget infeasible: initial assignment needs {required}, budget is {budget}")]
    BudgetInfeasible { required: Money, budget: Money },

    #[error("no feasible assignment within budget {budget}")]
    NoFeasibleAssignment { budget: Money },

    #[error("oracle search space {size} exceeds cap {cap}")]
    OracleCapExceeded { size: u128, cap: u128 },

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("schema error in {path}: {source}")]
    Schema {
        path: String,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }
}
