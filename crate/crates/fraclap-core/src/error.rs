use thiserror::Error;

/// Errors surfaced by the numerical kernels.
///
/// The split mirrors how callers react: precondition violations are caller
/// bugs, ill-conditioning and truncation are parameter-choice problems that a
/// driver can retry with different settings, and convergence failures are
/// reported as findings rather than panics.
#[derive(Debug, Error)]
pub enum Error {
    /// Geometric or support precondition violated (support outside the
    /// required ball, domain too small for a generator, mismatched grids).
    #[error("precondition violated: {0}")]
    Precondition(String),

    /// Order parameter outside the supported range, or an order relation
    /// like m > s does not hold.
    #[error("invalid order: {0}")]
    InvalidOrder(String),

    /// Exponent p < 1 passed to an L^p norm.
    #[error("invalid exponent p = {0}; need p >= 1")]
    InvalidExponent(f64),

    /// Hardy weight |x|^{-2s} is not integrable against bounded u^2 (2s >= n).
    #[error("divergent weight: 2s = {two_s} >= n = {n}")]
    DivergentWeight { two_s: f64, n: usize },

    /// Fractional exponent too close to an endpoint where the quadrature
    /// moments degenerate.
    #[error("ill-conditioned: {0}")]
    IllConditioned(String),

    /// Sampled data cannot represent the requested modes (support touching
    /// the grid boundary, or basis index beyond Nyquist).
    #[error("aliasing: {0}")]
    Aliasing(String),

    /// A doubling or refinement check moved the value more than its budget.
    #[error("convergence not reached: {0}")]
    ConvergenceNotReached(String),

    /// Spectral or domain truncation dominates the requested quantity.
    #[error("truncation: {0}")]
    Truncation(String),

    /// Quadrature produced a matrix that is not numerically positive
    /// definite where the algorithm requires it.
    #[error("quadrature failure: {0}")]
    QuadratureFailure(String),

    /// Extrapolation to the limit could not be performed consistently.
    #[error("extrapolation failure: {0}")]
    ExtrapolationFailure(String),

    /// An iterative solver exhausted its budget without meeting its
    /// stopping criterion.
    #[error("convergence failure: {0}")]
    ConvergenceFailure(String),

    /// Constant calibration across witness functions disagreed beyond the
    /// accepted spread, so no single constant can be reported.
    #[error("calibration failure: {0}")]
    Calibration(String),

    /// A graded mesh does not resolve the boundary layer that the weight
    /// exponent demands.
    #[error("layer resolution: {0}")]
    LayerResolution(String),
}

pub type Result<T> = std::result::Result<T, Error>;
