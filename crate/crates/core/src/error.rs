use thiserror::Error;

/// Errors raised by the library.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    /// The statistic has zero variance, so standardization is undefined.
    #[error("statistic has zero variance")]
    DegenerateVariance,
    #[error("stratum {stratum} contributes zero variance (R^2 = 0)")]
    ZeroStratumRatio { stratum: usize },
    #[error("domain error: {0}")]
    Domain(String),
    /// Every stratum has a single unit, so no within-stratum transposition exists.
    #[error("layout has no stratum with two or more units")]
    DegenerateLayout,
    #[error("stratum {stratum} has {size} units, above the table limit of {limit}")]
    StratumTooLarge {
        stratum: usize,
        size: usize,
        limit: usize,
    },
    #[error("enumeration needs {needed} outcomes, budget is {budget}")]
    BudgetExceeded { needed: u128, budget: u128 },
    #[error("stratum {stratum}: expected {expected} selected units, found {found}")]
    CountMismatch {
        stratum: usize,
        expected: usize,
        found: usize,
    },
    #[error("conditioning event not reached after {draws} draws")]
    EventUnreachable { draws: usize },
    #[error("layout mismatch: {0}")]
    LayoutMismatch(String),
    #[error("covariance matrix is singular (eigenvalues in [{min}, {max}])")]
    SingularCovariance { min: f64, max: f64 },
    #[error("components are not standardized: {0}")]
    NotStandardized(String),
    /// A domain-type invariant failed at construction.
    #[error("invariant violated: {0}")]
    InvalidInput(String),
}

pub type Result<T> = std::result::Result<T, Error>;
