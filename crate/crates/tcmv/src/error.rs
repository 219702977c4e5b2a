use thiserror::Error;

use crate::tree::NodeId;

/// Library-wide error type.
///
/// The CLI maps these onto its exit-code contract: validation errors exit 1,
/// non-convergence exits 2, invariant breaches exit 3.
#[derive(Debug, Error)]
pub enum TcmvError {
    #[error("validation error: {0}")]
    Validation(String),

    #[error("structure condition violated at {} node(s): {nodes:?}", nodes.len())]
    ScViolation { nodes: Vec<NodeId> },

    #[error("fixed-point iteration did not converge: {0}")]
    NonConvergence(String),

    #[error("degenerate market: {0}")]
    DegenerateMarket(String),

    #[error("internal invariant breached: {0}")]
    InvariantBreach(String),

    #[error("unsupported model spec: {0}")]
    UnsupportedSpec(String),

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, TcmvError>;
