use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("covariance value {value} at offset {offset:?} is negative")]
    NegativeCovariance { offset: Vec<f64>, value: f64 },

    #[error("Q(offset) = {value} exceeds Q(0) = {q0} at offset {offset:?}")]
    CovarianceExceedsVariance { offset: Vec<f64>, value: f64, q0: f64 },

    #[error("offset {0:?} is not a lattice vector")]
    OffLattice(Vec<f64>),

    #[error("clipped spectral mass {mass:.3e} exceeds threshold {threshold:.3e}")]
    SpectrumClipped { mass: f64, threshold: f64 },

    #[error("lattice of {sites} sites exceeds the budget of {budget}")]
    BudgetExceeded { sites: usize, budget: usize },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("time grid too coarse: {jumps} jumps on {steps} steps, reduce dt")]
    GridTooCoarse { jumps: usize, steps: usize },

    #[error("time {0} is not on the grid")]
    OffGrid(f64),

    #[error("instance too large for enumeration: {0}")]
    TooLarge(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}
