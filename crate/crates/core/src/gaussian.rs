//! Frozen Gaussian proxies, the Gaussian reference density, and polynomial
//! concentration profiles.
//!
//! Freezing the diffusion coefficient at a point `y` turns the transition
//! density into an explicit Gaussian whose covariance is the time integral
//! `Σ(s, t, y) = ∫_s^t a(u, y) du`, `a = σσᵀ`.  Everything downstream (the
//! singular kernel, the expansion terms, the bound audits) is built from this
//! Gaussian and its first two spatial derivatives.  The reference density
//! `p_c(u, z) = c^{d/2} (2πu)^{-d/2} exp(−c|z|²/(2u))` and the profiles
//! `Q_r(z) = c_r (1 + |z|)^{-r}` are the weights against which densities are
//! compared in the audits.

use crate::coefficients::CoefficientSet;
use crate::{quad, Error, Result};
use nalgebra::{Cholesky, DMatrix, DVector};

pub(crate) const MAX_DIM: usize = 8;

/// Frozen covariance `Σ(s, t, y)` with its factorizations precomputed.
#[derive(Clone, Debug)]
pub struct FrozenCovariance {
    pub s: f64,
    pub t: f64,
    /// The freeze point `y` at which `a` was evaluated.
    pub freeze: Vec<f64>,
    /// The symmetrized covariance matrix.
    pub matrix: DMatrix<f64>,
    /// Time-quadrature nodes actually used (1 for time-homogeneous fields).
    pub quadrature_nodes: usize,
    inv: DMatrix<f64>,
    norm_const: f64,
}

/// Integrate `a(·, y)` over `[s, t]` and validate the result as an SPD
/// matrix with spectrum inside `[(t−s)/Λ, (t−s)Λ]`.
///
/// Time-homogeneous sets collapse to a single evaluation; otherwise a
/// 33-node composite Simpson rule is doubled until the entrywise result
/// changes by less than `1e-10` relative.
pub fn covariance(set: &CoefficientSet, s: f64, t: f64, y: &[f64]) -> Result<FrozenCovariance> {
    if !(t > s) {
        return Err(Error::InvalidArgument(format!(
            "covariance window needs t > s, got s={s}, t={t}"
        )));
    }
    if y.len() != set.dim || set.dim > MAX_DIM {
        return Err(Error::InvalidArgument(format!(
            "freeze point dimension {} does not match set dimension {} (max {MAX_DIM})",
            y.len(),
            set.dim
        )));
    }
    let (raw, nodes) = if set.time_homogeneous {
        (set.a(s, y) * (t - s), 1)
    } else {
        let integrate = |n: usize| -> Result<DMatrix<f64>> {
            let d = set.dim;
            let mut acc = DMatrix::zeros(d, d);
            let h = (t - s) / (n - 1) as f64;
            for i in 0..n {
                let w = if i == 0 || i == n - 1 {
                    1.0
                } else if i % 2 == 1 {
                    4.0
                } else {
                    2.0
                };
                acc += set.a(s + i as f64 * h, y) * w;
            }
            Ok(acc * (h / 3.0))
        };
        let mut nodes = 33;
        let mut prev = integrate(nodes)?;
        loop {
            let next = nodes * 2 - 1;
            let cur = integrate(next)?;
            let rel = (&cur - &prev).norm() / cur.norm().max(f64::MIN_POSITIVE);
            if rel < 1e-10 {
                break (cur, next);
            }
            if next >= 16_385 {
                return Err(Error::RefinementNeeded(format!(
                    "covariance quadrature did not converge by {next} nodes (relative change {rel:e})"
                )));
            }
            prev = cur;
            nodes = next;
        }
    };
    let sym = (&raw + raw.transpose()) * 0.5;
    FrozenCovariance::from_matrix(set, s, t, y, sym, nodes)
}

impl FrozenCovariance {
    fn from_matrix(
        set: &CoefficientSet,
        s: f64,
        t: f64,
        y: &[f64],
        sym: DMatrix<f64>,
        nodes: usize,
    ) -> Result<Self> {
        let span = t - s;
        let lo = span / set.lambda;
        let hi = span * set.lambda;
        let tol = 1e-9 * hi;
        let eigs = sym.clone().symmetric_eigen().eigenvalues;
        for v in eigs.iter() {
            if *v < lo - tol || *v > hi + tol {
                return Err(Error::EllipticityViolation {
                    point: y.to_vec(),
                    detail: format!(
                        "covariance eigenvalue {v:e} outside [{lo:e}, {hi:e}] over [{s}, {t}]"
                    ),
                });
            }
        }
        let chol = Cholesky::new(sym.clone()).ok_or_else(|| Error::EllipticityViolation {
            point: y.to_vec(),
            detail: "covariance matrix is not positive definite".into(),
        })?;
        let det = chol.determinant();
        let inv = chol.inverse();
        let d = sym.nrows() as f64;
        let norm_const = (2.0 * std::f64::consts::PI).powf(-0.5 * d) / det.sqrt();
        Ok(FrozenCovariance {
            s,
            t,
            freeze: y.to_vec(),
            matrix: sym,
            quadrature_nodes: nodes,
            inv,
            norm_const,
        })
    }

    /// Build directly from a covariance matrix (used by the chain layer,
    /// where the covariance is a finite sum); validates SPD only.
    pub fn from_spd(matrix: DMatrix<f64>, freeze: &[f64]) -> Result<Self> {
        let chol = Cholesky::new(matrix.clone()).ok_or_else(|| Error::EllipticityViolation {
            point: freeze.to_vec(),
            detail: "covariance matrix is not positive definite".into(),
        })?;
        let det = chol.determinant();
        let inv = chol.inverse();
        let d = matrix.nrows() as f64;
        let norm_const = (2.0 * std::f64::consts::PI).powf(-0.5 * d) / det.sqrt();
        Ok(FrozenCovariance {
            s: 0.0,
            t: 0.0,
            freeze: freeze.to_vec(),
            matrix,
            quadrature_nodes: 0,
            inv,
            norm_const,
        })
    }

    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    /// Gaussian density with mean `x` at `y`; depends only on `y − x`.
    pub fn density(&self, x: &[f64], y: &[f64]) -> f64 {
        let mut diff = [0.0; MAX_DIM];
        for k in 0..self.dim() {
            diff[k] = y[k] - x[k];
        }
        self.density_disp(&diff[..self.dim()])
    }

    /// Density as a function of the displacement `z = y − x`.
    pub fn density_disp(&self, z: &[f64]) -> f64 {
        let d = self.dim();
        let mut quad_form = 0.0;
        for i in 0..d {
            let mut hi = 0.0;
            for j in 0..d {
                hi += self.inv[(i, j)] * z[j];
            }
            quad_form += hi * z[i];
        }
        self.norm_const * (-0.5 * quad_form).exp()
    }

    /// Gradient of the density in its first (mean) argument:
    /// `∇_x p = Σ⁻¹(y−x) · p`.
    pub fn gradient(&self, x: &[f64], y: &[f64]) -> DVector<f64> {
        let d = self.dim();
        let diff = DVector::from_iterator(d, (0..d).map(|k| y[k] - x[k]));
        let h = &self.inv * &diff;
        let p = self.density(x, y);
        h * p
    }

    /// Hessian of the density in its first argument:
    /// `D²_x p = (Σ⁻¹(y−x)(y−x)ᵀΣ⁻¹ − Σ⁻¹) · p`.
    pub fn hessian(&self, x: &[f64], y: &[f64]) -> DMatrix<f64> {
        let d = self.dim();
        let diff = DVector::from_iterator(d, (0..d).map(|k| y[k] - x[k]));
        let h = &self.inv * &diff;
        let p = self.density(x, y);
        (&h * h.transpose() - &self.inv) * p
    }

    /// Allocation-free combination used by the singular kernel:
    /// `p · (½ [hᵀ M h − tr(M Σ⁻¹)] + bᵀ h)` with `h = Σ⁻¹ z`, `z = y − x`.
    ///
    /// `M` is the diffusion-matrix difference and `b` the drift vector of the
    /// generator being applied; the expression equals
    /// `½ tr(M · D²_x p) + ⟨b, ∇_x p⟩`.
    pub fn kernel_value(&self, z: &[f64], m: &DMatrix<f64>, b: &DVector<f64>) -> f64 {
        let d = self.dim();
        let mut h = [0.0; MAX_DIM];
        for i in 0..d {
            let mut acc = 0.0;
            for j in 0..d {
                acc += self.inv[(i, j)] * z[j];
            }
            h[i] = acc;
        }
        let mut hmh = 0.0;
        let mut tr = 0.0;
        let mut bh = 0.0;
        for i in 0..d {
            bh += b[i] * h[i];
            for j in 0..d {
                hmh += h[i] * m[(i, j)] * h[j];
                tr += m[(i, j)] * self.inv[(j, i)];
            }
        }
        self.density_disp(z) * (0.5 * (hmh - tr) + bh)
    }
}

/// Evaluate the frozen Gaussian with mean `x` at `y`.
pub fn frozen_density(cov: &FrozenCovariance, x: &[f64], y: &[f64]) -> f64 {
    cov.density(x, y)
}

/// Gradient of the frozen Gaussian in `x`.
pub fn frozen_gradient(cov: &FrozenCovariance, x: &[f64], y: &[f64]) -> DVector<f64> {
    cov.gradient(x, y)
}

/// Hessian of the frozen Gaussian in `x`.
pub fn frozen_hessian(cov: &FrozenCovariance, x: &[f64], y: &[f64]) -> DMatrix<f64> {
    cov.hessian(x, y)
}

/// Gaussian reference weight `p_c(u, z) = c^{d/2} (2πu)^{-d/2} e^{−c|z|²/(2u)}`,
/// a probability density in `z` for every `u > 0`.
#[derive(Clone, Copy, Debug)]
pub struct GaussianRef {
    pub c: f64,
    pub dim: usize,
}

impl GaussianRef {
    pub fn new(c: f64, dim: usize) -> Result<Self> {
        if !(c > 0.0 && c <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "concentration constant must lie in (0, 1], got {c}"
            )));
        }
        if dim == 0 || dim > MAX_DIM {
            return Err(Error::InvalidArgument(format!(
                "dimension {dim} out of range"
            )));
        }
        Ok(GaussianRef { c, dim })
    }

    /// `p_c(u, z)` for elapsed time `u > 0`.
    pub fn eval(&self, u: f64, z: &[f64]) -> Result<f64> {
        if !(u > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "reference density needs positive elapsed time, got {u}"
            )));
        }
        let d = self.dim as f64;
        let zz: f64 = z.iter().map(|v| v * v).sum();
        Ok((self.c / (2.0 * std::f64::consts::PI * u)).powf(0.5 * d)
            * (-self.c * zz / (2.0 * u)).exp())
    }
}

/// Normalizer `c_r` making `Q_r(z) = c_r (1 + |z|)^{-r}` integrate to one.
///
/// Closed form `(r−1)/2` in `d = 1`; radial quadrature in `d = 2`
/// (substituted to remove the endpoint singularity, cross-checked in the
/// tests against the closed form `(r−1)(r−2)/(2π)`).
pub fn q_r_normalizer(r: f64, dim: usize) -> Result<f64> {
    if !(r > dim as f64) {
        return Err(Error::InvalidArgument(format!(
            "profile order must exceed the dimension, got r={r}, d={dim}"
        )));
    }
    match dim {
        1 => Ok(0.5 * (r - 1.0)),
        2 => {
            // ∫_{R²}(1+|z|)^{-r} dz = 2π ∫_0^∞ ρ(1+ρ)^{-r} dρ; substituting
            // ρ = v/(1−v) gives 2π ∫_0^1 v (1−v)^{r−3} dv, integrable for
            // r > 2 and handled by a mesh graded toward v = 1.
            let mesh = quad::graded_midpoint_mesh(0.0, 1.0, 65_536, 4.0)?;
            let integral: f64 = mesh
                .iter()
                .map(|(v, w)| w * v * (1.0 - v).powf(r - 3.0))
                .sum();
            Ok(1.0 / (2.0 * std::f64::consts::PI * integral))
        }
        _ => Err(Error::Unsupported(
            "concentration profiles support d <= 2".into(),
        )),
    }
}

/// Polynomially decaying concentration profile `Q_r`.
#[derive(Clone, Copy, Debug)]
pub struct ConcentrationProfile {
    pub r: f64,
    pub dim: usize,
    pub normalizer: f64,
}

impl ConcentrationProfile {
    pub fn new(r: f64, dim: usize) -> Result<Self> {
        let normalizer = q_r_normalizer(r, dim)?;
        Ok(ConcentrationProfile {
            r,
            dim,
            normalizer,
        })
    }

    /// `Q_r(z) = c_r (1 + |z|)^{-r}`.
    pub fn q(&self, z: &[f64]) -> f64 {
        let n: f64 = z.iter().map(|v| v * v).sum::<f64>().sqrt();
        self.normalizer * (1.0 + n).powf(-self.r)
    }

    /// Time-space scaled profile
    /// `c^d · elapsed^{-d/2} · Q_r(|disp| / (elapsed^{1/2}/c))`, the
    /// polynomial-tail analogue of `p_c`.
    pub fn scaled(&self, c: f64, elapsed: f64, disp: &[f64]) -> Result<f64> {
        if !(elapsed > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "scaled profile needs positive elapsed time, got {elapsed}"
            )));
        }
        if !(c > 0.0 && c <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "concentration constant must lie in (0, 1], got {c}"
            )));
        }
        let d = self.dim as f64;
        let n: f64 = disp.iter().map(|v| v * v).sum::<f64>().sqrt();
        let scaled = n * c / elapsed.sqrt();
        Ok(c.powf(d) * elapsed.powf(-0.5 * d) * self.normalizer * (1.0 + scaled).powf(-self.r))
    }
}

/// Fitted constants for the frozen-Gaussian derivative bounds: the maxima of
/// `|∇p̃| (t−s)^{1/2} / p_c` and `|D²p̃| (t−s) / p_c` over a diagnostic grid,
/// with `c = (2Λ)⁻¹`.
#[derive(Clone, Copy, Debug)]
pub struct DerivativeBoundFit {
    pub c1_grad: f64,
    pub c1_hess: f64,
    pub c: f64,
}

/// Audit the scaled derivative bounds of the frozen Gaussian over windows
/// `(s, t)` and displacement probes; finiteness of the fit is the pass
/// condition, and the maxima are reported as fitted constants.
pub fn derivative_bound_audit(
    set: &CoefficientSet,
    windows: &[(f64, f64)],
    probes: &[(Vec<f64>, Vec<f64>)],
) -> Result<DerivativeBoundFit> {
    if windows.is_empty() || probes.is_empty() {
        return Err(Error::InvalidArgument(
            "derivative bound audit needs windows and probes".into(),
        ));
    }
    let c = 1.0 / (2.0 * set.lambda);
    let pref = GaussianRef::new(c, set.dim)?;
    let mut c1_grad = 0.0f64;
    let mut c1_hess = 0.0f64;
    for &(s, t) in windows {
        for (x, y) in probes {
            let cov = covariance(set, s, t, y)?;
            let span = t - s;
            let disp: Vec<f64> = y.iter().zip(x).map(|(a, b)| a - b).collect();
            let w = pref.eval(span, &disp)?;
            let g = cov.gradient(x, y).norm();
            let h = cov.hessian(x, y).norm();
            if !g.is_finite() || !h.is_finite() {
                return Err(Error::NonFinite {
                    context: "derivative bound audit".into(),
                    point: y.clone(),
                });
            }
            c1_grad = c1_grad.max(g * span.sqrt() / w);
            c1_hess = c1_hess.max(h * span / w);
        }
    }
    Ok(DerivativeBoundFit {
        c1_grad,
        c1_hess,
        c,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coefficients::{presets, DiffusionField, DriftField};
    use approx::{assert_abs_diff_eq, assert_relative_eq};

    #[test]
    fn covariance_of_identity_diffusion_is_elapsed_time() {
        let set = presets::constant(2, 1.0, 0.0);
        let cov = covariance(&set, 0.25, 1.0, &[0.0, 0.0]).unwrap();
        assert_relative_eq!(cov.matrix[(0, 0)], 0.75, max_relative = 1e-14);
        assert_relative_eq!(cov.matrix[(1, 1)], 0.75, max_relative = 1e-14);
        assert_abs_diff_eq!(cov.matrix[(0, 1)], 0.0);
        assert_eq!(cov.quadrature_nodes, 1);
    }

    #[test]
    fn covariance_integrates_time_dependent_diffusion() {
        // σ(u) = sqrt(u), so a(u) = u and Σ(0, 1) = 1/2; Simpson is exact on
        // linear integrands, so the doubling loop stops immediately.
        let set = crate::coefficients::CoefficientSet::new(
            1,
            DriftField::scalar_1d(|_, _| 0.0),
            DiffusionField::scalar_1d(|t, _| t.max(0.0).sqrt()),
            1.0,
            1e-12,
            1.0,
            1e6,
            1e-9,
            false,
        )
        .unwrap();
        let cov = covariance(&set, 0.0, 1.0, &[0.0]).unwrap();
        assert_relative_eq!(cov.matrix[(0, 0)], 0.5, max_relative = 1e-10);
    }

    #[test]
    fn covariance_rejects_degenerate_freeze_points() {
        // σ(x) = x vanishes at the origin, so the covariance degenerates.
        let set = crate::coefficients::CoefficientSet::new(
            1,
            DriftField::scalar_1d(|_, _| 0.0),
            DiffusionField::scalar_1d(|_, x| x),
            1.0,
            1e-12,
            10.0,
            1e6,
            1.0,
            true,
        )
        .unwrap();
        let err = covariance(&set, 0.0, 1.0, &[0.0]).unwrap_err();
        match err {
            Error::EllipticityViolation { point, .. } => assert_eq!(point, vec![0.0]),
            other => panic!("expected ellipticity violation, got {other}"),
        }
    }

    #[test]
    fn frozen_density_matches_standard_normal() {
        let set = presets::constant(1, 1.0, 0.0);
        let cov = covariance(&set, 0.0, 1.0, &[0.0]).unwrap();
        assert_relative_eq!(
            cov.density(&[0.0], &[0.0]),
            (2.0 * std::f64::consts::PI).powf(-0.5),
            max_relative = 1e-14
        );
        assert_relative_eq!(
            cov.density(&[0.0], &[1.0]),
            (2.0 * std::f64::consts::PI).powf(-0.5) * (-0.5f64).exp(),
            max_relative = 1e-14
        );
    }

    #[test]
    fn frozen_density_is_translation_invariant() {
        let set = presets::holder_benchmark_1d();
        let cov = covariance(&set, 0.0, 0.7, &[0.4]).unwrap();
        for i in 0..20 {
            let shift = -2.0 + 4.0 * i as f64 / 19.0;
            assert_relative_eq!(
                cov.density(&[0.1], &[0.9]),
                cov.density(&[0.1 + shift], &[0.9 + shift]),
                max_relative = 1e-13
            );
        }
    }

    #[test]
    fn frozen_gradient_vanishes_at_the_mean() {
        let set = presets::constant(2, 1.3, 0.0);
        let cov = covariance(&set, 0.0, 0.5, &[0.2, -0.1]).unwrap();
        let g = cov.gradient(&[0.3, 0.4], &[0.3, 0.4]);
        assert_abs_diff_eq!(g.norm(), 0.0);
    }

    #[test]
    fn frozen_derivatives_match_finite_differences() {
        let set = presets::holder_benchmark_1d();
        let cov = covariance(&set, 0.1, 0.9, &[0.6]).unwrap();
        let x = [0.2];
        let y = [0.7];
        let h = 1e-5;
        let fd_grad = (cov.density(&[x[0] + h], &y) - cov.density(&[x[0] - h], &y)) / (2.0 * h);
        let fd_hess = (cov.density(&[x[0] + h], &y) - 2.0 * cov.density(&x, &y)
            + cov.density(&[x[0] - h], &y))
            / (h * h);
        assert_relative_eq!(cov.gradient(&x, &y)[0], fd_grad, max_relative = 1e-6);
        assert_relative_eq!(cov.hessian(&x, &y)[(0, 0)], fd_hess, max_relative = 1e-4);
    }

    #[test]
    fn kernel_value_agrees_with_explicit_derivatives() {
        let set = presets::holder_benchmark_1d();
        let cov = covariance(&set, 0.0, 1.0, &[0.8]).unwrap();
        let x = [-0.3];
        let y = [0.8];
        let m = DMatrix::from_element(1, 1, 0.37);
        let b = DVector::from_element(1, -1.2);
        let direct = 0.5 * (m[(0, 0)] * cov.hessian(&x, &y)[(0, 0)])
            + b[0] * cov.gradient(&x, &y)[0];
        let z = [y[0] - x[0]];
        assert_relative_eq!(cov.kernel_value(&z, &m, &b), direct, max_relative = 1e-12);
    }

    #[test]
    fn reference_density_values_and_mass() {
        let p1 = GaussianRef::new(1.0, 1).unwrap();
        assert_relative_eq!(
            p1.eval(1.0, &[0.0]).unwrap(),
            (2.0 * std::f64::consts::PI).powf(-0.5),
            max_relative = 1e-14
        );
        let p05 = GaussianRef::new(0.5, 1).unwrap();
        assert_relative_eq!(
            p05.eval(1.0, &[0.0]).unwrap(),
            (0.5f64).sqrt() * (2.0 * std::f64::consts::PI).powf(-0.5),
            max_relative = 1e-14
        );
        assert!(p1.eval(0.0, &[0.0]).is_err());
        // Unit mass for several (c, u): trapezoid over ±12 std.
        for &(c, u) in &[(1.0, 0.5), (0.25, 2.0)] {
            let pr = GaussianRef::new(c, 1).unwrap();
            let std = (u / c).sqrt();
            let n = 4001;
            let h = 24.0 * std / (n - 1) as f64;
            let vals: Vec<f64> = (0..n)
                .map(|i| pr.eval(u, &[-12.0 * std + i as f64 * h]).unwrap())
                .collect();
            assert_relative_eq!(
                crate::quad::trapezoid_uniform(&vals, h),
                1.0,
                max_relative = 1e-10
            );
        }
    }

    #[test]
    fn q_r_normalizers_match_closed_forms() {
        assert_relative_eq!(q_r_normalizer(2.0, 1).unwrap(), 0.5, max_relative = 1e-14);
        assert_relative_eq!(q_r_normalizer(3.0, 1).unwrap(), 1.0, max_relative = 1e-14);
        // d = 2 closed form: (r−1)(r−2)/(2π).
        for &r in &[3.0, 4.5, 8.0] {
            let expect = (r - 1.0) * (r - 2.0) / (2.0 * std::f64::consts::PI);
            assert_relative_eq!(q_r_normalizer(r, 2).unwrap(), expect, max_relative = 1e-8);
        }
        assert!(q_r_normalizer(1.0, 1).is_err());
    }

    #[test]
    fn q_r_integrates_to_one() {
        // Simpson on each side of the |z| kink; mass beyond ±4000 is
        // ~(1+4000)^{-2} per side.
        let prof = ConcentrationProfile::new(3.0, 1).unwrap();
        let side = crate::quad::composite_simpson(|z| prof.q(&[z]), 0.0, 4000.0, 200_001).unwrap();
        assert_relative_eq!(2.0 * side, 1.0, max_relative = 2e-6);
    }

    #[test]
    fn scaled_profile_at_origin_is_normalizer_scaled() {
        let prof = ConcentrationProfile::new(6.0, 1).unwrap();
        let v = prof.scaled(1.0, 1.0, &[0.0]).unwrap();
        assert_relative_eq!(v, prof.normalizer, max_relative = 1e-14);
        let v2 = prof.scaled(0.5, 1.0, &[0.0]).unwrap();
        assert_relative_eq!(v2, 0.5 * prof.normalizer, max_relative = 1e-14);
        assert!(prof.scaled(0.5, 0.0, &[0.0]).is_err());
    }

    #[test]
    fn derivative_bounds_fit_finitely_on_benchmark() {
        let set = presets::holder_benchmark_1d();
        let windows = [(0.0, 0.25), (0.0, 1.0), (0.5, 1.5)];
        let mut probes = Vec::new();
        for i in 0..41 {
            let z = -5.0 + 10.0 * i as f64 / 40.0;
            probes.push((vec![0.0], vec![z]));
        }
        let fit = derivative_bound_audit(&set, &windows, &probes).unwrap();
        assert!(fit.c1_grad.is_finite() && fit.c1_grad > 0.0);
        assert!(fit.c1_hess.is_finite() && fit.c1_hess > 0.0);
        assert_relative_eq!(fit.c, 1.0 / 6.0, max_relative = 1e-14);
    }
}
