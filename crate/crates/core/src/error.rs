use thiserror::Error;

/// Errors produced by the localization library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    #[error("invalid array geometry: {0}")]
    InvalidGeometry(String),

    #[error("position ({x}, {y}) coincides with sensor {sensor} of array '{array}'")]
    SensorCoincidence {
        array: String,
        sensor: usize,
        x: f64,
        y: f64,
    },

    #[error("grid point {point} coincides with sensor {sensor} of array '{array}'")]
    SensorOnGrid {
        array: String,
        sensor: usize,
        point: usize,
    },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("invalid spectrum: {0}")]
    InvalidSpectrum(String),

    #[error("invalid covariance: {0}")]
    InvalidCovariance(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error(
        "Gibbs kernel underflow: {0}; increase epsilon or rescale the cost so that max(C)/epsilon stays well below 700"
    )]
    KernelUnderflow(String),

    #[error("marginal totals differ: {0} vs {1}")]
    UnbalancedMarginals(f64, f64),

    #[error("Sinkhorn did not converge in {iterations} iterations (row residual {row_residual:.3e}, column residual {col_residual:.3e})")]
    SinkhornNotConverged {
        iterations: usize,
        row_residual: f64,
        col_residual: f64,
    },

    #[error("Newton line search failed at iteration {iteration} (residual {residual:.3e})")]
    LineSearchFailed { iteration: usize, residual: f64 },

    #[error("Newton did not converge in {iterations} iterations (residual {residual:.3e})")]
    NewtonNotConverged { iterations: usize, residual: f64 },

    #[error("Newton solve failed for array {array}: {source}")]
    ArrayBlock {
        array: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("Jacobian is not positive definite")]
    JacobianNotPositiveDefinite,

    #[error("fusion did not converge in {iterations} outer iterations (last relative change {last_change:.3e})")]
    FusionNotConverged { iterations: usize, last_change: f64 },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("instance too large for enumeration: {0}")]
    TooLarge(String),

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),
}

pub type Result<T> = std::result::Result<T, Error>;
