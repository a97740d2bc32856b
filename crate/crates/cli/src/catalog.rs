//! Built-in coefficient families, perturbation directions, payoffs, and
//! innovation laws, addressable by stable string ids from config files.

use nalgebra::{DMatrix, DVector};
use parametrix::chain::InnovationLaw;
use parametrix::coefficients::{
    presets, CoefficientSet, DiffusionField, DriftField, MollifierKernel, PerturbationFamily,
};
use parametrix::oracles::Payoff;

use crate::config::{ConfigError, SectionView};

fn err<T>(msg: String) -> Result<T, ConfigError> {
    Err(ConfigError(msg))
}

/// Mathematical sign: `-1`, `0`, or `1` (unlike `f64::signum`, which maps
/// `0` to `1`).
fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// One-dimensional set with `σ(x) = 1.5 + 0.5·sin x` and zero drift:
/// smooth bounded volatility with eigenvalues of `a` in `[1, 4]`.
fn sin_vol() -> CoefficientSet {
    CoefficientSet::new(
        1,
        DriftField::constant(DVector::zeros(1)),
        DiffusionField::scalar_1d(|_, x| 1.5 + 0.5 * x.sin()),
        1.0,
        0.0,
        2.0,
        4.0 + 1e-12,
        0.5,
        true,
    )
    .expect("sin volatility set is valid")
}

/// One-dimensional set with `σ(x) = 1.5 + 0.5·|sin x|` and zero drift:
/// Lipschitz volatility with kinks at multiples of π, eigenvalues of `a`
/// in `[2.25, 4]`.  Unlike the smooth sin family it saturates its Hölder
/// class, so mollification error rates in weaker norms are sharp.
fn abs_sin_vol() -> CoefficientSet {
    CoefficientSet::new(
        1,
        DriftField::constant(DVector::zeros(1)),
        DiffusionField::scalar_1d(|_, x| 1.5 + 0.5 * x.sin().abs()),
        1.0,
        0.0,
        2.0,
        4.0 + 1e-12,
        0.5,
        true,
    )
    .expect("abs-sin volatility set is valid")
}

/// One-dimensional set with `σ(x) = 0.6 + sqrt(|sin x|)` and zero drift:
/// volatility of Hölder exponent one half, eigenvalues of `a` in
/// `[0.36, 2.56]`.
fn sqrt_sin_vol() -> CoefficientSet {
    CoefficientSet::new(
        1,
        DriftField::constant(DVector::zeros(1)),
        DiffusionField::scalar_1d(|_, x| 0.6 + x.sin().abs().sqrt()),
        0.5,
        0.0,
        1.6,
        1.0f64 / 0.36 + 1e-12,
        1.0,
        true,
    )
    .expect("sqrt-sin volatility set is valid")
}

/// One-dimensional set with unit volatility and `b(x) = sin x`.
fn sin_drift() -> CoefficientSet {
    CoefficientSet::new(
        1,
        DriftField::scalar_1d(|_, x| x.sin()),
        DiffusionField::constant(DMatrix::identity(1, 1)),
        1.0,
        1.0,
        1.0,
        1.0 + 1e-12,
        0.0,
        true,
    )
    .expect("sin drift set is valid")
}

/// One-dimensional set with unit volatility and the discontinuous drift
/// `b(x) = sign(x)` (zero at the origin): bounded and measurable but not
/// continuous, so only integral drift distances see it shrink.
fn sign_drift() -> CoefficientSet {
    CoefficientSet::new(
        1,
        DriftField::scalar_1d(|_, x| sign(x)),
        DiffusionField::constant(DMatrix::identity(1, 1)),
        1.0,
        1.0,
        1.0,
        1.0 + 1e-12,
        0.0,
        true,
    )
    .expect("sign drift set is valid")
}

/// Builds the coefficient set named by `id`, reading family parameters
/// from the `[coefficients]` section.
pub fn build_set(id: &str, section: SectionView<'_>) -> Result<CoefficientSet, ConfigError> {
    match id {
        "const" => {
            let sigma = section.f64_or("sigma", 1.0)?;
            let drift = section.f64_or("drift", 0.0)?;
            let dim = section.usize_or("dim", 1)?;
            if !(sigma > 0.0) {
                return err(format!(
                    "field `coefficients.sigma`: must be positive, got {sigma}"
                ));
            }
            if dim == 0 || dim > 2 {
                return err(format!(
                    "field `coefficients.dim`: supported dimensions are 1 and 2, got {dim}"
                ));
            }
            Ok(presets::constant(dim, sigma, drift))
        }
        "holder-benchmark" => Ok(presets::holder_benchmark_1d()),
        "sin-vol" => Ok(sin_vol()),
        "abs-sin-vol" => Ok(abs_sin_vol()),
        "sqrt-sin-vol" => Ok(sqrt_sin_vol()),
        "sin-drift" => Ok(sin_drift()),
        "sign-drift" => Ok(sign_drift()),
        other => err(format!(
            "field `coefficients.id`: unknown coefficient family `{other}` (see `parametrix catalog`)"
        )),
    }
}

/// Builds the perturbation family named by `id` around `base`.
pub fn build_perturbation(
    id: &str,
    base: CoefficientSet,
    section: SectionView<'_>,
) -> Result<PerturbationFamily, ConfigError> {
    match id {
        "sin-bump" => {
            if base.dim != 1 {
                return err(
                    "field `sweep.perturbation`: sin-bump requires a one-dimensional set".into(),
                );
            }
            Ok(PerturbationFamily::volatility_bump(
                base,
                |x: &[f64]| DMatrix::from_element(1, 1, x[0].sin()),
                1.0,
            ))
        }
        "drift-sin-shift" => {
            if base.dim != 1 {
                return err(
                    "field `sweep.perturbation`: drift-sin-shift requires a one-dimensional set"
                        .into(),
                );
            }
            Ok(PerturbationFamily::drift_shift(
                base,
                |x: &[f64]| DVector::from_element(1, x[0].sin()),
                1.0,
            ))
        }
        "mollify" => {
            let kernel = MollifierKernel::one_sided_hat(base.dim)
                .map_err(|e| ConfigError(format!("mollifier construction failed: {e}")))?;
            Ok(PerturbationFamily::mollification(base, kernel))
        }
        other => {
            let _ = section;
            err(format!(
                "field `sweep.perturbation`: unknown perturbation `{other}` (see `parametrix catalog`)"
            ))
        }
    }
}

/// Builds the payoff named by `id`, reading its parameters from the
/// `[payoff]` section.
pub fn build_payoff(id: &str, section: SectionView<'_>) -> Result<Payoff, ConfigError> {
    match id {
        "indicator-call" => {
            let strike = section.f64_or("strike", 1.0)?;
            if strike < 0.0 {
                return err(format!(
                    "field `payoff.strike`: must be nonnegative, got {strike}"
                ));
            }
            Ok(Payoff::IndicatorCall { strike })
        }
        "bounded-lipschitz" => {
            let center = section.f64_or("center", 1.0)?;
            let slope = section.f64_or("slope", 1.0)?;
            if !(slope > 0.0) {
                return err(format!(
                    "field `payoff.slope`: must be positive, got {slope}"
                ));
            }
            Ok(Payoff::BoundedLipschitz { center, slope })
        }
        other => err(format!(
            "field `payoff.id`: unknown payoff `{other}` (see `parametrix catalog`)"
        )),
    }
}

/// Builds the innovation law named by `id`; `poly-tail` reads its decay
/// order from `law_order` (default 12).
pub fn build_law(id: &str, section: SectionView<'_>) -> Result<InnovationLaw, ConfigError> {
    match id {
        "gaussian" => Ok(InnovationLaw::gaussian()),
        "poly-tail" => {
            let order = section.f64_or("law_order", 12.0)?;
            InnovationLaw::polynomial_tail(order)
                .map_err(|e| ConfigError(format!("field `chain.law_order`: {e}")))
        }
        other => err(format!(
            "field `chain.law`: unknown innovation law `{other}` (see `parametrix catalog`)"
        )),
    }
}

/// Stable, human-readable listing of everything the config can name.
pub fn listing() -> String {
    let mut out = String::new();
    out.push_str("coefficient families:\n");
    out.push_str("  const             constant sigma/drift (params: sigma, drift, dim <= 2)\n");
    out.push_str("  holder-benchmark  sigma = sqrt(2 + sin x), b = cos x (d = 1)\n");
    out.push_str("  sin-vol           sigma = 1.5 + 0.5 sin x, b = 0 (d = 1)\n");
    out.push_str("  abs-sin-vol       sigma = 1.5 + 0.5 |sin x|, Lipschitz with kinks (d = 1)\n");
    out.push_str("  sqrt-sin-vol      sigma = 0.6 + sqrt|sin x|, Holder exponent 1/2 (d = 1)\n");
    out.push_str("  sin-drift         sigma = 1, b = sin x (d = 1)\n");
    out.push_str("  sign-drift        sigma = 1, b = sign x, discontinuous at 0 (d = 1 only)\n");
    out.push_str("perturbations:\n");
    out.push_str("  sin-bump          sigma_eps = sigma + eps sin x (d = 1)\n");
    out.push_str("  drift-sin-shift   b_eps = b + eps sin x (d = 1)\n");
    out.push_str("  mollify           one-sided hat smoothing of both fields at width eps\n");
    out.push_str("payoffs (functions of exp(terminal state)):\n");
    out.push_str("  indicator-call    1 when the price is at or above `strike`\n");
    out.push_str("  bounded-lipschitz (1 - slope |price - center|)+\n");
    out.push_str("innovation laws:\n");
    out.push_str("  gaussian          standard normal steps\n");
    out.push_str("  poly-tail M=12    unit-variance polynomial tail of order M (set law_order; d = 1)\n");
    out
}
