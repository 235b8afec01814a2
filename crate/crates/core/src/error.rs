//! Crate-wide error type.

use thiserror::Error;

/// Errors produced by the chain model, integrators, solvers and oracles.
#[derive(Debug, Error)]
pub enum Error {
    /// A sequence length does not match what the chain spec requires.
    #[error("shape mismatch for {what}: expected {expected}, got {got}")]
    Shape {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    /// A (k, n) multiplier index outside the valid domain.
    #[error("multiplier index (k={k}, n={n}) out of domain for N={n_sites}")]
    IndexDomain { k: usize, n: usize, n_sites: usize },

    /// Invalid problem instance parameters.
    #[error("invalid chain spec: {0}")]
    InvalidSpec(String),

    /// A wave state that cannot be brought to the real gauge.
    #[error("state is not gauge-compatible: residual imaginary part {residual:.3e} at site {site}")]
    Gauge { site: usize, residual: f64 },

    /// Adaptive step size underflow.
    #[error("integrator step size underflow at t = {t:.6e} (h = {h:.3e})")]
    Stiffness { t: f64, h: f64 },

    /// Non-finite values appeared during integration.
    #[error("non-finite state during integration at t = {t:.6e}")]
    Divergence { t: f64 },

    /// Iterative solver failed to reach its tolerance.
    #[error("solver did not converge after {iterations} iterations (best residual {residual_norm:.3e})")]
    Convergence {
        iterations: usize,
        residual_norm: f64,
        /// Best iterate found, in the solver's raw parametrization.
        best: Vec<f64>,
    },

    /// The shooting Jacobian lost rank.
    #[error("rank-deficient system: {0}")]
    Rank(String),

    /// The adjoint gradient disagreed with finite differences.
    #[error("adjoint gradient check failed: relative deviation {deviation:.3e} exceeds {tolerance:.3e}")]
    AdjointCheck { deviation: f64, tolerance: f64 },

    /// An out-of-family basis projection that should vanish did not.
    #[error("basis closure violated: projection {value:.3e} on {which}")]
    BasisClosure { which: String, value: f64 },

    /// Input violated an operation precondition.
    #[error("precondition violated: {0}")]
    Precondition(String),

    /// Dense linear algebra failure (eigendecomposition, factorization).
    #[error("numerical failure: {0}")]
    Numerical(String),
}

pub type Result<T> = std::result::Result<T, Error>;
