use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
    #[error("fields live on different grids")]
    GridMismatch,
    #[error("time grids do not match: {0}")]
    TimeGridMismatch(String),
    #[error("coefficient {name} must be positive, found {value:e} at node {node}")]
    NonPositiveCoefficient { name: &'static str, node: usize, value: f64 },
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("invalid data: {0}")]
    InvalidData(String),
    #[error("elliptic solver did not converge: relative residual {residual:e} after {iterations} iterations")]
    NoConvergence { iterations: usize, residual: f64 },
    #[error("Newton divergence at t = {time:e} (residual {residual:e})")]
    NewtonDivergence { time: f64, residual: f64 },
    #[error("bound violation: {0}")]
    BoundViolation(String),
    #[error("monotonicity in k violated by {excess:e} at level {level}, node {node}")]
    MonotonicityViolation { level: usize, node: usize, excess: f64 },
    #[error("ill-conditioned fit: {0}")]
    IllConditioned(String),
    #[error("test function violates support conditions: {0}")]
    Support(String),
    #[error("barrier construction failed: {0}")]
    BarrierCoverage(String),
    #[error("point outside admissible region: {0}")]
    Inadmissible(String),
}

pub type Result<T> = std::result::Result<T, Error>;
