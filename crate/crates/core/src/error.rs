use thiserror::Error;

/// Errors raised by the curve, model, realization and simulation layers.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    /// Argument outside the domain of an operation (maturity beyond the grid,
    /// negative shift, chart coordinates out of range, ...).
    #[error("domain error: {0}")]
    Domain(String),

    /// Two curves (or a curve and a functional) live on different grids.
    #[error("grid mismatch: {0}")]
    GridMismatch(String),

    /// A state left the model's working region, e.g. a square-root argument
    /// became non-positive.
    #[error("region error: {0}")]
    Region(String),

    /// A functional or realization could not be built from its inputs.
    #[error("construction error: {0}")]
    Construction(String),

    /// A model does not have the structure required by an operation, e.g. the
    /// volatility directions are not constant.
    #[error("structure error: {0}")]
    Structure(String),

    /// An ODE solution exploded at finite maturity.
    #[error("solver blow-up at x = {x}: |delta| exceeded {cap}")]
    BlowUp { x: f64, cap: f64 },

    /// Iterative numerics failed (non-finite values, no convergence).
    #[error("numerical failure: {0}")]
    Numerical(String),

    /// A precondition of the caller was violated.
    #[error("precondition violated: {0}")]
    Precondition(String),

    /// Malformed configuration or descriptor text.
    #[error("config error: {0}")]
    Config(String),

    #[error("io error: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
