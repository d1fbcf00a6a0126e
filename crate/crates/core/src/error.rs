use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Clone, Error)]
pub enum Error {
    /// An argument fell outside its mathematical domain.
    #[error("domain error: {0}")]
    Domain(String),
    /// Pooling requires at least two usable cluster fits.
    #[error("pooling error: {0}")]
    Pooling(String),
    /// The imputation pipeline could not produce completed datasets.
    #[error("imputation error: {0}")]
    Imputation(String),
    /// Malformed or inconsistent tabular data.
    #[error("data error: {0}")]
    Data(String),
    /// Invalid configuration.
    #[error("config error: {0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, Error>;

/// Why a cluster could not contribute a Heckman fit. Callers treat such
/// clusters like systematically missing ones and fall back to marginal draws.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum NonEstimable {
    #[error("observed rows {got} below the minimum {needed}")]
    TooFewObserved { needed: usize, got: usize },
    #[error("selection indicator has no variation")]
    NoSelectionVariation,
    #[error("outcome has no variation among observed rows")]
    DegenerateOutcome,
    #[error("probit separation in starting-value fit")]
    Separation,
    #[error("optimizer produced a non-finite iterate")]
    OptimizerFailed,
    #[error("correlation estimate at the |rho| = 0.99 boundary")]
    RhoAtBoundary,
}
