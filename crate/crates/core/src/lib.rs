//! Transition densities for uniformly elliptic diffusions and their
//! Euler-type Markov chains, computed through parametrix expansions, together
//! with the measurement machinery needed to audit how those densities respond
//! to coefficient perturbations.
//!
//! The crate is organized around five layers:
//!
//! * [`coefficients`] — drift/diffusion fields, regularity metrics
//!   (sup, `L^q`, Hölder), mollification, and perturbation families;
//! * [`gaussian`] — frozen Gaussian proxies, the Gaussian reference density
//!   `p_c`, and polynomial concentration profiles `Q_r`;
//! * [`sde`] — the continuous-time expansion: singular kernel `H`, time-space
//!   convolution, series summation, and kernel/tail bound audits;
//! * [`chain`] — the discrete-time analogue for Markov chains driven by
//!   Gaussian or polynomially-tailed innovations;
//! * [`oracles`] — independent density estimates (Monte Carlo, grid
//!   Chapman–Kolmogorov), comparison norms, rate fitting, and option-price
//!   sensitivities.
//!
//! Everything is deterministic: quadrature rules are fixed by explicit scheme
//! parameters, Monte Carlo draws come from seed-derived substreams, and
//! parallel evaluation never changes reduction order, so repeated runs agree
//! bitwise.

/// Version of the numerical engine, for run manifests.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");

pub mod chain;
pub mod coefficients;
pub mod gaussian;
pub mod oracles;
pub mod quad;
pub mod sde;
pub mod special;

use thiserror::Error;

/// Errors shared by every numerical layer of the crate.
#[derive(Debug, Error)]
pub enum Error {
    /// A caller-supplied argument violates a documented precondition.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// A coefficient or density evaluation produced a non-finite value.
    #[error("non-finite evaluation in {context} at point {point:?}")]
    NonFinite { context: String, point: Vec<f64> },

    /// A covariance matrix failed its symmetric-positive-definite check.
    #[error("ellipticity violation at freeze point {point:?}: {detail}")]
    EllipticityViolation { point: Vec<f64>, detail: String },

    /// A mollification kernel is not a probability density.
    #[error("invalid mollifier kernel: {0}")]
    InvalidKernel(String),

    /// A requested tolerance cannot be met within the supported order range.
    #[error("tolerance {tolerance:e} unreachable within order {max_order}; achieved tail {achieved:e}")]
    ToleranceUnreachable {
        tolerance: f64,
        max_order: usize,
        achieved: f64,
    },

    /// A grid is too coarse for the requested computation.
    #[error("refinement needed: {0}")]
    RefinementNeeded(String),

    /// Two grids that must share axes do not.
    #[error("axis mismatch: {0}")]
    AxisMismatch(String),

    /// The requested combination of parameters is outside the supported range.
    #[error("unsupported: {0}")]
    Unsupported(String),

    /// Too few usable points for a regression or fit.
    #[error("insufficient data: {0}")]
    InsufficientData(String),
}

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;
