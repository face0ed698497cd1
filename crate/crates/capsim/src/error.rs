use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    /// Physical parameter out of range (non-positive mass, inertia violating
    /// the triangle inequalities, ratio outside (-1, 1), ...).
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    /// Registration cannot produce a pose: fewer than 3 pairs or a
    /// degenerate (rank-deficient) point configuration.
    #[error("degenerate registration geometry: {0}")]
    DegenerateGeometry(String),

    /// Iterative numeric routine failed to converge within its cap.
    #[error("numeric failure: {0}")]
    Numeric(String),

    /// Planner failed to converge from every start.
    #[error("planner did not converge: {0}")]
    PlannerDiverged(String),

    /// Malformed configuration file or value.
    #[error("config error: {0}")]
    Config(String),

    /// Underlying I/O failure.
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}
