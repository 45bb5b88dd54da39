//! Error type shared by all estimation stages.

use thiserror::Error;

/// Errors raised while building panel structures or running estimators.
#[derive(Debug, Clone, Error)]
pub enum Error {
    /// The same (individual, period) pair appears more than once.
    #[error("duplicate observation for individual `{individual}` at period `{period}`")]
    DuplicateObservation { individual: String, period: String },

    /// No observations were supplied.
    #[error("panel has no observations")]
    EmptyPanel,

    /// A stratum rule does not cover some individual.
    #[error("individual `{individual}` is not covered by the stratum rule")]
    UncoveredIndividual { individual: String },

    /// A stratum ended up with no individuals.
    #[error("stratum {stratum} is empty")]
    EmptyStratum { stratum: usize },

    /// The panel structure is too degenerate for the Within transformation.
    #[error("within transformation is singular: {reason}")]
    SingularStructure { reason: String },

    /// A matrix handed to a numeric kernel contains NaN or infinities.
    #[error("non-finite values in input to {context}")]
    NonFinite { context: String },

    /// The (transformed) regressor cross-product matrix is rank deficient.
    #[error("rank-deficient design in {context}: suspect columns {columns:?}")]
    RankDeficient { context: String, columns: Vec<usize> },

    /// A stratum is too small or too unbalanced for a variance-component formula.
    #[error("degenerate stratum {stratum}: {reason}")]
    DegenerateStratum { stratum: usize, reason: String },

    /// A covariance matrix required to be positive definite is not.
    #[error("matrix not positive definite in {context}")]
    NotPositiveDefinite { context: String },

    /// Dimensions of two inputs disagree.
    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    DimensionMismatch {
        context: String,
        expected: usize,
        got: usize,
    },

    /// Inputs that must describe the same panel disagree.
    #[error("inconsistent inputs: {reason}")]
    InconsistentInputs { reason: String },
}

/// Convenient result alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;
