//! Crate-wide error type.
//!
//! Every fallible operation returns [`Error`]. Variants carry enough context
//! (offending value, line number, tolerance) to diagnose a failure without
//! re-running under a debugger.

use thiserror::Error;

/// Errors reported by the library.
#[derive(Debug, Error)]
pub enum Error {
    /// A model or configuration parameter is outside its admissible range.
    #[error("invalid parameter `{name}`: {reason} (got {value})")]
    InvalidParameter {
        name: &'static str,
        reason: &'static str,
        value: f64,
    },

    /// The mean-reversion hypothesis on the dispersion drift fails at a grid
    /// point: alpha must be positive at zero (after Feller scaling) and pull
    /// back at least linearly in the far tail.
    #[error("dispersion drift violates the mean-reversion hypothesis at y = {y}: alpha(y)/y = {ratio}, bound {bound}")]
    HypothesisViolation { y: f64, ratio: f64, bound: f64 },

    /// Adaptive quadrature failed to reach the requested tolerance.
    #[error("quadrature on [{a}, {b}] did not converge: error estimate {estimate}, tolerance {tolerance}")]
    QuadratureFailure {
        a: f64,
        b: f64,
        estimate: f64,
        tolerance: f64,
    },

    /// A tabulation grid has too few usable nodes for the requested stencil.
    #[error("grid too coarse: {needed} interior nodes required, {available} available")]
    GridTooCoarse { needed: usize, available: usize },

    /// Adaptive ODE integration drove the step size below the minimum.
    #[error("ODE step size underflow at t = {t}: step {h} below minimum {h_min}")]
    OdeStepFailure { t: f64, h: f64, h_min: f64 },

    /// A built-in self check (residual gate) exceeded its tolerance.
    #[error("residual check `{check}` failed: residual {residual} exceeds tolerance {tolerance}")]
    ResidualCheckFailure {
        check: &'static str,
        residual: f64,
        tolerance: f64,
    },

    /// Evaluation of H(y) or related kernels outside the density support.
    #[error("dispersion value y = {y} is outside the density support [{lo}, {hi}]")]
    YOutOfRange { y: f64, lo: f64, hi: f64 },

    /// Division by a vanishing density value during kernel evaluation.
    #[error("density vanishes at y = {y}; H(y) undefined there")]
    DivisionByZeroDensity { y: f64 },

    /// Pricing from a path ensemble simulated under the wrong measure.
    #[error("measure mismatch: {operation} requires a {required} ensemble, got {actual}")]
    MeasureMismatch {
        operation: &'static str,
        required: &'static str,
        actual: &'static str,
    },

    /// Time step too large to resolve the fast dispersion scale.
    #[error("time step {dt} exceeds the fast-scale bound {bound} (eps = {eps})")]
    StepTooLarge { dt: f64, bound: f64, eps: f64 },

    /// Too few samples for a statistical operation.
    #[error("insufficient samples: {needed} required, {available} available")]
    InsufficientSamples { needed: usize, available: usize },

    /// Too few observations for an estimation window or series.
    #[error("insufficient data: {context} ({available} usable observations, {needed} required)")]
    InsufficientData {
        context: &'static str,
        needed: usize,
        available: usize,
    },

    /// Degenerate dispersion distribution: variance too small for skewness.
    #[error("degenerate dispersion distribution: variance {variance} too small to normalize skewness")]
    DegenerateVariance { variance: f64 },

    /// CSV input could not be parsed.
    #[error("CSV parse error at line {line}: {reason}")]
    CsvParse { line: usize, reason: String },

    /// Timestamps in an input series are not strictly increasing.
    #[error("non-monotone timestamp at line {line}: {t} does not exceed {prev}")]
    NonmonotoneTimestamps { line: usize, t: f64, prev: f64 },

    /// A rate observation is negative.
    #[error("negative rate {rate} at line {line}")]
    NegativeRate { line: usize, rate: f64 },

    /// I/O failure while reading input data.
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
}

/// Convenience alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Helper for parameter validation.
    pub(crate) fn param(name: &'static str, reason: &'static str, value: f64) -> Self {
        Error::InvalidParameter {
            name,
            reason,
            value,
        }
    }
}
