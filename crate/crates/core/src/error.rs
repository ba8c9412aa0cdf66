use thiserror::Error;

/// Errors produced by the solvers, builders and pipelines in this crate.
#[derive(Debug, Error)]
pub enum SvpError {
    #[error("invalid MDP: {0}")]
    InvalidMdp(String),

    #[error("invalid policy: {0}")]
    InvalidPolicy(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("{what} did not converge within {iterations} sweeps (last delta {delta:e})")]
    NotConverged { what: &'static str, iterations: usize, delta: f64 },

    #[error("no stable near-greedy policy: {0}")]
    NoFixedPoint(String),

    #[error("optimal value at state {state} is negative ({value})")]
    NegativeValue { state: usize, value: f64 },

    #[error("reward at state {state}, action {action} is negative ({reward})")]
    NegativeReward { state: usize, action: usize, reward: f64 },

    #[error("MDP is not a DAG: {0}")]
    NotDag(String),

    #[error("transition from state {state} under action {action} is stochastic")]
    Stochastic { state: usize, action: usize },

    #[error("search space of {size} candidates exceeds the guard of {guard}")]
    GuardExceeded { size: f64, guard: f64 },

    #[error("dataset: {0}")]
    Dataset(String),

    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("internal error: {0}")]
    Internal(String),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, SvpError>;
