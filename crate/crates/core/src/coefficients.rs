//! Drift/diffusion coefficient fields and their regularity measurements.
//!
//! A [`CoefficientSet`] bundles the model fields `b` and `σ` with the declared
//! constants they are audited against: bounds `K1`, `K2`, an ellipticity
//! constant `Λ` for `a = σσᵀ`, and a spatial Hölder exponent/constant pair
//! `(γ, κ)` for `σ`.  The module provides
//!
//! * sampled Hölder seminorms over deterministic pair plans,
//! * sup/`L^q`/Hölder distances between a base set and a perturbed set,
//! * spatial mollification against compactly supported kernels, and
//! * one-parameter perturbation families (volatility bump, mollification,
//!   drift shift) used by the stability sweeps.
//!
//! All sampling plans are deterministic, so every reported number is a pure
//! function of the fields and the plan; sampled seminorms are certified lower
//! bounds for their sups and grow monotonically under plan refinement.

use crate::{Error, Result};
use nalgebra::{DMatrix, DVector};
use std::sync::Arc;

/// Spatial scalar field.
pub type ScalarFn = dyn Fn(&[f64]) -> f64 + Send + Sync;
/// Spatial vector field.
pub type VectorFn = dyn Fn(&[f64]) -> DVector<f64> + Send + Sync;
/// Spatial matrix field.
pub type MatrixFn = dyn Fn(&[f64]) -> DMatrix<f64> + Send + Sync;
/// Time-space drift field.
pub type DriftFn = dyn Fn(f64, &[f64]) -> DVector<f64> + Send + Sync;
/// Time-space diffusion field.
pub type DiffusionFn = dyn Fn(f64, &[f64]) -> DMatrix<f64> + Send + Sync;

/// Shared handle to a drift field `b(t, x) ∈ R^d`.
#[derive(Clone)]
pub struct DriftField(pub Arc<DriftFn>);

/// Shared handle to a diffusion field `σ(t, x) ∈ R^{d×d}`.
#[derive(Clone)]
pub struct DiffusionField(pub Arc<DiffusionFn>);

impl DriftField {
    pub fn new<F: Fn(f64, &[f64]) -> DVector<f64> + Send + Sync + 'static>(f: F) -> Self {
        DriftField(Arc::new(f))
    }

    /// Constant drift.
    pub fn constant(v: DVector<f64>) -> Self {
        DriftField::new(move |_, _| v.clone())
    }

    /// One-dimensional drift from a scalar map `(t, x) -> b`.
    pub fn scalar_1d<F: Fn(f64, f64) -> f64 + Send + Sync + 'static>(f: F) -> Self {
        DriftField::new(move |t, x| DVector::from_element(1, f(t, x[0])))
    }

    pub fn eval(&self, t: f64, x: &[f64]) -> DVector<f64> {
        (self.0)(t, x)
    }
}

impl DiffusionField {
    pub fn new<F: Fn(f64, &[f64]) -> DMatrix<f64> + Send + Sync + 'static>(f: F) -> Self {
        DiffusionField(Arc::new(f))
    }

    /// Constant diffusion matrix.
    pub fn constant(m: DMatrix<f64>) -> Self {
        DiffusionField::new(move |_, _| m.clone())
    }

    /// One-dimensional diffusion from a scalar map `(t, x) -> σ`.
    pub fn scalar_1d<F: Fn(f64, f64) -> f64 + Send + Sync + 'static>(f: F) -> Self {
        DiffusionField::new(move |t, x| DMatrix::from_element(1, 1, f(t, x[0])))
    }

    pub fn eval(&self, t: f64, x: &[f64]) -> DMatrix<f64> {
        (self.0)(t, x)
    }
}

/// A drift/diffusion pair with its declared regularity constants.
///
/// The constants are declarations to audit against, not guarantees:
/// [`assumption_report`] measures the fields on a grid and flags violations.
#[derive(Clone)]
pub struct CoefficientSet {
    pub dim: usize,
    pub drift: DriftField,
    pub diffusion: DiffusionField,
    /// Spatial Hölder exponent of `σ`, in `(0, 1]`.
    pub gamma: f64,
    /// Declared bound on `|b|`.
    pub k1: f64,
    /// Declared bound on `|σ|`.
    pub k2: f64,
    /// Declared ellipticity constant: eigenvalues of `a = σσᵀ` lie in `[Λ⁻¹, Λ]`.
    pub lambda: f64,
    /// Declared Hölder constant of `σ`.
    pub kappa: f64,
    /// True when neither field depends on its time argument; lets covariance
    /// integrals collapse to a single evaluation.
    pub time_homogeneous: bool,
}

impl CoefficientSet {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        dim: usize,
        drift: DriftField,
        diffusion: DiffusionField,
        gamma: f64,
        k1: f64,
        k2: f64,
        lambda: f64,
        kappa: f64,
        time_homogeneous: bool,
    ) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidArgument("dimension must be positive".into()));
        }
        if !(gamma > 0.0 && gamma <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "Hölder exponent must lie in (0, 1], got {gamma}"
            )));
        }
        if !(lambda >= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "ellipticity constant must satisfy lambda >= 1, got {lambda}"
            )));
        }
        if !(k1 >= 0.0 && k2 > 0.0 && kappa >= 0.0) {
            return Err(Error::InvalidArgument(
                "bounds k1, kappa must be nonnegative and k2 positive".into(),
            ));
        }
        Ok(CoefficientSet {
            dim,
            drift,
            diffusion,
            gamma,
            k1,
            k2,
            lambda,
            kappa,
            time_homogeneous,
        })
    }

    /// Diffusion matrix `a(t, x) = σσᵀ`.
    pub fn a(&self, t: f64, x: &[f64]) -> DMatrix<f64> {
        let s = self.diffusion.eval(t, x);
        &s * s.transpose()
    }
}

/// Axis-aligned sampling box.
#[derive(Clone, Debug)]
pub struct SampleBox {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl SampleBox {
    pub fn new(lo: Vec<f64>, hi: Vec<f64>) -> Result<Self> {
        if lo.len() != hi.len() || lo.is_empty() {
            return Err(Error::InvalidArgument(
                "sample box bounds must be nonempty and of equal dimension".into(),
            ));
        }
        if lo.iter().zip(&hi).any(|(l, h)| !(l < h)) {
            return Err(Error::InvalidArgument(
                "sample box must have lo < hi on every axis".into(),
            ));
        }
        Ok(SampleBox { lo, hi })
    }

    /// Symmetric box `[-r, r]^d`.
    pub fn centered(dim: usize, r: f64) -> Result<Self> {
        SampleBox::new(vec![-r; dim], vec![r; dim])
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    /// Tensor grid with `n` points per axis, endpoints included.
    pub fn tensor_grid(&self, n: usize) -> Vec<Vec<f64>> {
        let d = self.dim();
        let axis: Vec<Vec<f64>> = (0..d)
            .map(|k| {
                (0..n)
                    .map(|i| {
                        self.lo[k] + (self.hi[k] - self.lo[k]) * i as f64 / (n - 1).max(1) as f64
                    })
                    .collect()
            })
            .collect();
        let mut pts = vec![Vec::with_capacity(d)];
        for ax in axis {
            let mut next = Vec::with_capacity(pts.len() * ax.len());
            for p in &pts {
                for &v in &ax {
                    let mut q = p.clone();
                    q.push(v);
                    next.push(q);
                }
            }
            pts = next;
        }
        pts
    }

    pub fn contains(&self, p: &[f64]) -> bool {
        p.iter()
            .zip(self.lo.iter().zip(&self.hi))
            .all(|(v, (l, h))| *v >= *l && *v <= *h)
    }
}

/// Deterministic pair plan for sampled Hölder seminorms: every unordered pair
/// of a tensor grid, plus near-diagonal pairs at dyadically shrinking
/// separations anchored at each grid point.
#[derive(Clone, Debug)]
pub struct PairPlan {
    pub domain: SampleBox,
    pub points_per_axis: usize,
    pub dyadic_levels: usize,
    pub base_separation: f64,
}

impl PairPlan {
    /// Plan with `n` grid points per axis and ten dyadic refinement levels
    /// starting at one grid spacing.
    pub fn tensor(domain: SampleBox, points_per_axis: usize) -> Result<Self> {
        if points_per_axis < 2 {
            return Err(Error::InvalidArgument(
                "pair plan needs at least two points per axis".into(),
            ));
        }
        let span = domain
            .hi
            .iter()
            .zip(&domain.lo)
            .map(|(h, l)| h - l)
            .fold(f64::INFINITY, f64::min);
        let base = span / (points_per_axis - 1) as f64;
        Ok(PairPlan {
            domain,
            points_per_axis,
            dyadic_levels: 10,
            base_separation: base,
        })
    }

    pub fn with_base_separation(mut self, base: f64) -> Self {
        self.base_separation = base;
        self
    }

    /// All sampled pairs `(x, y)` with `x ≠ y`, in a fixed order.
    pub fn pairs(&self) -> Vec<(Vec<f64>, Vec<f64>)> {
        let grid = self.domain.tensor_grid(self.points_per_axis);
        let mut out = Vec::new();
        for i in 0..grid.len() {
            for j in (i + 1)..grid.len() {
                out.push((grid[i].clone(), grid[j].clone()));
            }
        }
        let d = self.domain.dim();
        for p in &grid {
            for axis in 0..d {
                for level in 0..self.dyadic_levels {
                    let delta = self.base_separation * 0.5f64.powi(level as i32);
                    let mut q = p.clone();
                    q[axis] += delta;
                    if self.domain.contains(&q) {
                        out.push((p.clone(), q));
                    }
                }
            }
        }
        out
    }
}

/// Values whose pairwise distances drive the regularity metrics: absolute
/// value for scalars, Euclidean norm for vectors, Frobenius norm for
/// matrices.
pub trait Magnitude {
    fn norm(&self) -> f64;
    fn distance(&self, other: &Self) -> f64;
}

impl Magnitude for f64 {
    fn norm(&self) -> f64 {
        self.abs()
    }
    fn distance(&self, other: &Self) -> f64 {
        (self - other).abs()
    }
}

impl Magnitude for DVector<f64> {
    fn norm(&self) -> f64 {
        DVector::norm(self)
    }
    fn distance(&self, other: &Self) -> f64 {
        (self - other).norm()
    }
}

impl Magnitude for DMatrix<f64> {
    fn norm(&self) -> f64 {
        DMatrix::norm(self)
    }
    fn distance(&self, other: &Self) -> f64 {
        (self - other).norm()
    }
}

fn euclid(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt()
}

/// Sampled Hölder seminorm `sup |f(x) − f(y)| / |x − y|^γ` over the plan's
/// pairs.
///
/// The result is a certified lower bound for the true seminorm and is
/// monotone under plan refinement (a plan whose pair set contains another's
/// reports at least as large a value).  Requires `γ ∈ (0, 1]` and at least
/// 1000 pairs; a non-finite field value aborts with the offending point.
pub fn holder_seminorm<V, F>(f: F, gamma: f64, plan: &PairPlan) -> Result<f64>
where
    V: Magnitude,
    F: Fn(&[f64]) -> V,
{
    if !(gamma > 0.0 && gamma <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "Hölder exponent must lie in (0, 1], got {gamma}"
        )));
    }
    let pairs = plan.pairs();
    if pairs.len() < 1000 {
        return Err(Error::InvalidArgument(format!(
            "pair plan yields {} pairs; at least 1000 required",
            pairs.len()
        )));
    }
    let mut best = 0.0f64;
    for (x, y) in &pairs {
        let fx = f(x);
        let fy = f(y);
        let num = fx.distance(&fy);
        if !num.is_finite() {
            return Err(Error::NonFinite {
                context: "holder_seminorm field evaluation".into(),
                point: x.clone(),
            });
        }
        let den = euclid(x, y).powf(gamma);
        if den > 0.0 {
            best = best.max(num / den);
        }
    }
    Ok(best)
}

/// Norm index for drift distances: a finite `L^q` exponent or the sup norm.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum QIndex {
    Finite(f64),
    Infinity,
}

/// Distances between a base and a perturbed coefficient set.
///
/// `delta_sigma_holder` is the full Hölder norm (sup plus seminorm) of the
/// `σ`-difference; `delta_sigma_sup` keeps the sup part separately so both
/// conventions stay visible.  `delta_total` combines `delta_sigma_holder`
/// with the drift distance selected by `q`, and `alpha_q = (1 − d/q)/2` is
/// the rate exponent attached to a finite `q`.
#[derive(Clone, Debug)]
pub struct DeltaMetrics {
    pub q: QIndex,
    pub delta_b_sup: f64,
    pub delta_b_lq: f64,
    pub delta_sigma_sup: f64,
    pub delta_sigma_holder: f64,
    pub delta_total: f64,
    pub alpha_q: f64,
    /// True when the drift difference was flagged compactly supported inside
    /// the integration box, so the `L^q` value carries no truncation tail.
    pub lq_exact: bool,
}

/// Spatial domain and resolution for [`delta_metrics`].
#[derive(Clone, Debug)]
pub struct MetricDomain {
    pub domain: SampleBox,
    /// Tensor quadrature nodes per axis for the `L^q` integral (also the sup
    /// sampling grid).
    pub nodes_per_axis: usize,
    /// Declares that the drift difference vanishes outside `domain`.
    pub compactly_supported: bool,
}

/// Measure sup, `L^q`, and Hölder distances between two coefficient sets
/// over a time grid and a spatial box.
///
/// A finite `q` must exceed the dimension.  The `L^q` integral is a tensor
/// trapezoid over the box; when the drift difference is not flagged
/// compactly supported the value is a truncation (`lq_exact = false`).
pub fn delta_metrics(
    base: &CoefficientSet,
    perturbed: &CoefficientSet,
    q: QIndex,
    times: &[f64],
    domain: &MetricDomain,
) -> Result<DeltaMetrics> {
    if base.dim != perturbed.dim || base.dim != domain.domain.dim() {
        return Err(Error::InvalidArgument(
            "coefficient sets and domain must share one dimension".into(),
        ));
    }
    if times.is_empty() {
        return Err(Error::InvalidArgument("time grid must be nonempty".into()));
    }
    if domain.nodes_per_axis < 3 {
        return Err(Error::InvalidArgument(
            "metric domain needs at least 3 nodes per axis".into(),
        ));
    }
    let d = base.dim;
    if let QIndex::Finite(qv) = q {
        if !(qv > d as f64) {
            return Err(Error::InvalidArgument(format!(
                "finite norm index must exceed the dimension, got q={qv} with d={d}"
            )));
        }
    }

    let n = domain.nodes_per_axis;
    let grid = domain.domain.tensor_grid(n);
    // Tensor-trapezoid weight: product over axes of the 1-d trapezoid weight.
    let steps: Vec<f64> = (0..d)
        .map(|k| (domain.domain.hi[k] - domain.domain.lo[k]) / (n - 1) as f64)
        .collect();
    let cell: f64 = steps.iter().product();
    let axis_weight = |idx: usize| -> f64 {
        if idx == 0 || idx == n - 1 {
            0.5
        } else {
            1.0
        }
    };

    let mut b_sup = 0.0f64;
    let mut s_sup = 0.0f64;
    let mut lq_max = 0.0f64;
    let mut holder_max = 0.0f64;
    let plan = PairPlan::tensor(domain.domain.clone(), plan_points_for_dim(d))?;

    for &t in times {
        let mut lq_acc = 0.0f64;
        for (flat, x) in grid.iter().enumerate() {
            let db = base
                .drift
                .eval(t, x)
                .distance(&perturbed.drift.eval(t, x));
            let ds = base
                .diffusion
                .eval(t, x)
                .distance(&perturbed.diffusion.eval(t, x));
            if !db.is_finite() || !ds.is_finite() {
                return Err(Error::NonFinite {
                    context: "delta_metrics field evaluation".into(),
                    point: x.clone(),
                });
            }
            b_sup = b_sup.max(db);
            s_sup = s_sup.max(ds);
            if let QIndex::Finite(qv) = q {
                // Recover the per-axis indices to form the tensor weight.
                let mut w = 1.0;
                let mut rem = flat;
                for _ in 0..d {
                    let idx = rem % n;
                    rem /= n;
                    w *= axis_weight(idx);
                }
                lq_acc += w * db.powf(qv);
            }
        }
        if let QIndex::Finite(qv) = q {
            lq_max = lq_max.max((lq_acc * cell).powf(1.0 / qv));
        }
        let sem = holder_seminorm(
            |x: &[f64]| base.diffusion.eval(t, x) - perturbed.diffusion.eval(t, x),
            base.gamma,
            &plan,
        )?;
        holder_max = holder_max.max(s_sup + sem);
    }

    let (lq, alpha) = match q {
        QIndex::Finite(qv) => (lq_max, 0.5 * (1.0 - d as f64 / qv)),
        QIndex::Infinity => (b_sup, 0.5),
    };
    Ok(DeltaMetrics {
        q,
        delta_b_sup: b_sup,
        delta_b_lq: lq,
        delta_sigma_sup: s_sup,
        delta_sigma_holder: holder_max,
        delta_total: holder_max + lq,
        alpha_q: alpha,
        lq_exact: matches!(q, QIndex::Infinity) || domain.compactly_supported,
    })
}

fn plan_points_for_dim(d: usize) -> usize {
    match d {
        1 => 60,
        2 => 14,
        _ => 8,
    }
}

/// Compactly supported mollification kernel with unit mass.
#[derive(Clone)]
pub struct MollifierKernel {
    density: Arc<ScalarFn>,
    pub support_radius: f64,
    pub dim: usize,
    /// Simpson nodes per axis used for every convolution with this kernel.
    pub nodes_per_axis: usize,
}

impl MollifierKernel {
    /// Validates nonnegativity on a grid and unit mass to `1e-8` before
    /// accepting the kernel.
    pub fn new<F: Fn(&[f64]) -> f64 + Send + Sync + 'static>(
        density: F,
        support_radius: f64,
        dim: usize,
    ) -> Result<Self> {
        if !(support_radius > 0.0) || dim == 0 {
            return Err(Error::InvalidKernel(
                "kernel needs a positive support radius and dimension".into(),
            ));
        }
        let kernel = MollifierKernel {
            density: Arc::new(density),
            support_radius,
            dim,
            nodes_per_axis: 65,
        };
        let grid = SampleBox::centered(dim, support_radius)?.tensor_grid(129);
        for p in &grid {
            let v = (kernel.density)(p);
            if !v.is_finite() || v < 0.0 {
                return Err(Error::InvalidKernel(format!(
                    "kernel density is negative or non-finite at {p:?}"
                )));
            }
        }
        let mass = kernel.mass()?;
        if (mass - 1.0).abs() > 1e-8 {
            return Err(Error::InvalidKernel(format!(
                "kernel mass {mass} deviates from 1 by more than 1e-8"
            )));
        }
        Ok(kernel)
    }

    /// Symmetric triangular kernel, tensorized across axes.
    pub fn triangular(dim: usize) -> Result<Self> {
        MollifierKernel::new(
            |z: &[f64]| z.iter().map(|v| (1.0 - v.abs()).max(0.0)).product(),
            1.0,
            dim,
        )
    }

    /// Continuous hat kernel supported on `[0, 1]` per axis, peaking at `1/2`
    /// (`ρ(z) = min(4z, 4(1 − z))` clamped to zero outside).
    ///
    /// Its first moment is `1/2 ≠ 0`, so mollifying a smooth field produces a
    /// first-order (`ε^1`) difference instead of the second-order one a
    /// symmetric kernel yields.
    pub fn one_sided_hat(dim: usize) -> Result<Self> {
        MollifierKernel::new(
            |z: &[f64]| {
                z.iter()
                    .map(|v| (4.0 * v).min(4.0 * (1.0 - v)).max(0.0))
                    .product()
            },
            1.0,
            dim,
        )
    }

    fn mass(&self) -> Result<f64> {
        let r = self.support_radius;
        match self.dim {
            1 => crate::quad::composite_simpson(|z| (self.density)(&[z]), -r, r, 1025),
            2 => {
                let inner = |z0: f64| {
                    crate::quad::composite_simpson(|z1| (self.density)(&[z0, z1]), -r, r, 257)
                        .unwrap_or(f64::NAN)
                };
                crate::quad::composite_simpson(inner, -r, r, 257)
            }
            _ => Err(Error::Unsupported(
                "mollifier kernels support d <= 2".into(),
            )),
        }
    }

    /// Simpson nodes and weights over the scaled support `[-εR, εR]^d` for
    /// the convolution `∫ f(x − z) ε^{-d} ρ(z/ε) dz`.
    fn convolution_rule(&self, eps: f64) -> Vec<(Vec<f64>, f64)> {
        let n = self.nodes_per_axis;
        let r = self.support_radius;
        let h = 2.0 * r / (n - 1) as f64;
        let mut axis = Vec::with_capacity(n);
        for i in 0..n {
            let u = -r + i as f64 * h;
            let w = if i == 0 || i == n - 1 {
                1.0
            } else if i % 2 == 1 {
                4.0
            } else {
                2.0
            };
            axis.push((u, w * h / 3.0));
        }
        let mut rule: Vec<(Vec<f64>, f64)> = vec![(Vec::new(), 1.0)];
        for _ in 0..self.dim {
            let mut next = Vec::with_capacity(rule.len() * n);
            for (pt, w) in &rule {
                for (u, uw) in &axis {
                    let mut q = pt.clone();
                    q.push(*u);
                    next.push((q, w * uw));
                }
            }
            rule = next;
        }
        // Fold in the kernel values; scaling by ε happens at evaluation time
        // (the rule is in kernel coordinates, where mass is ε-independent).
        rule.into_iter()
            .map(|(u, w)| {
                let k = (self.density)(&u);
                (u.iter().map(|v| v * eps).collect(), w * k)
            })
            .collect()
    }
}

/// Mollify a drift field in space: `b_ε(t, x) = ∫ b(t, x − z) ρ_ε(z) dz`.
///
/// `ε = 0` returns the field unchanged.  The mollified field preserves any
/// sup bound of the original because the kernel is a probability density.
pub fn mollify_drift(field: &DriftField, kernel: &MollifierKernel, eps: f64) -> Result<DriftField> {
    if eps < 0.0 {
        return Err(Error::InvalidArgument(format!(
            "mollification scale must be nonnegative, got {eps}"
        )));
    }
    if eps == 0.0 {
        return Ok(field.clone());
    }
    let rule = kernel.convolution_rule(eps);
    let inner = field.clone();
    let dim = kernel.dim;
    Ok(DriftField::new(move |t, x| {
        let mut acc = DVector::zeros(dim);
        let mut shifted = vec![0.0; dim];
        for (z, w) in &rule {
            for k in 0..dim {
                shifted[k] = x[k] - z[k];
            }
            acc += inner.eval(t, &shifted) * *w;
        }
        acc
    }))
}

/// Mollify a diffusion field in space, componentwise.
pub fn mollify_diffusion(
    field: &DiffusionField,
    kernel: &MollifierKernel,
    eps: f64,
) -> Result<DiffusionField> {
    if eps < 0.0 {
        return Err(Error::InvalidArgument(format!(
            "mollification scale must be nonnegative, got {eps}"
        )));
    }
    if eps == 0.0 {
        return Ok(field.clone());
    }
    let rule = kernel.convolution_rule(eps);
    let inner = field.clone();
    let dim = kernel.dim;
    Ok(DiffusionField::new(move |t, x| {
        let mut acc = DMatrix::zeros(dim, dim);
        let mut shifted = vec![0.0; dim];
        for (z, w) in &rule {
            for k in 0..dim {
                shifted[k] = x[k] - z[k];
            }
            acc += inner.eval(t, &shifted) * *w;
        }
        acc
    }))
}

/// Measured field properties against the declared constants.
#[derive(Clone, Debug)]
pub struct AssumptionReport {
    pub sup_drift: f64,
    pub sup_diffusion: f64,
    pub eig_min: f64,
    pub eig_max: f64,
    pub sigma_holder: f64,
    pub drift_holder: f64,
    /// `sup|b| ≤ K1` and `sup|σ| ≤ K2` on the grid.
    pub bounds_ok: bool,
    /// Eigenvalues of `a` inside `[Λ⁻¹, Λ]` on the grid.
    pub ellipticity_ok: bool,
    /// Sampled Hölder quotient of `σ` at most `κ`.
    pub sigma_holder_ok: bool,
    /// Same check applied to the drift (informational; a discontinuous drift
    /// shows up here with a large quotient).
    pub drift_holder_ok: bool,
    pub pass: bool,
}

/// Measure sup bounds, ellipticity range, and Hölder quotients of a set on a
/// deterministic grid, and compare them against the declared constants.
pub fn assumption_report(
    set: &CoefficientSet,
    times: &[f64],
    plan: &PairPlan,
) -> Result<AssumptionReport> {
    if times.is_empty() {
        return Err(Error::InvalidArgument("time grid must be nonempty".into()));
    }
    let grid = plan.domain.tensor_grid(plan.points_per_axis);
    let slack = 1e-9;
    let mut sup_b = 0.0f64;
    let mut sup_s = 0.0f64;
    let mut eig_min = f64::INFINITY;
    let mut eig_max = f64::NEG_INFINITY;
    let mut sig_holder = 0.0f64;
    let mut dr_holder = 0.0f64;
    for &t in times {
        for x in &grid {
            let b = set.drift.eval(t, x);
            let s = set.diffusion.eval(t, x);
            if !b.iter().all(|v| v.is_finite()) || !s.iter().all(|v| v.is_finite()) {
                return Err(Error::NonFinite {
                    context: "assumption_report field evaluation".into(),
                    point: x.clone(),
                });
            }
            sup_b = sup_b.max(b.norm());
            sup_s = sup_s.max(s.norm());
            let a = &s * s.transpose();
            let eig = a.symmetric_eigen().eigenvalues;
            for v in eig.iter() {
                eig_min = eig_min.min(*v);
                eig_max = eig_max.max(*v);
            }
        }
        sig_holder = sig_holder.max(holder_seminorm(
            |x: &[f64]| set.diffusion.eval(t, x),
            set.gamma,
            plan,
        )?);
        dr_holder = dr_holder.max(holder_seminorm(
            |x: &[f64]| set.drift.eval(t, x),
            set.gamma,
            plan,
        )?);
    }
    let bounds_ok = sup_b <= set.k1 + slack && sup_s <= set.k2 + slack;
    let ellipticity_ok = eig_min >= 1.0 / set.lambda - slack && eig_max <= set.lambda + slack;
    let sigma_holder_ok = sig_holder <= set.kappa + slack;
    let drift_holder_ok = dr_holder <= set.kappa + slack;
    Ok(AssumptionReport {
        sup_drift: sup_b,
        sup_diffusion: sup_s,
        eig_min,
        eig_max,
        sigma_holder: sig_holder,
        drift_holder: dr_holder,
        bounds_ok,
        ellipticity_ok,
        sigma_holder_ok,
        drift_holder_ok,
        pass: bounds_ok && ellipticity_ok && sigma_holder_ok,
    })
}

/// One-parameter coefficient perturbations used by the stability sweeps.
///
/// Bump and shift directions carry a declared sup bound, following the
/// declared-constants idiom of [`CoefficientSet`]: the perturbed set's
/// ellipticity and size constants are widened from the declaration rather
/// than re-measured, so they stay valid across the whole ε-range or the
/// construction fails loudly.
#[derive(Clone)]
pub enum Perturbation {
    /// `σ_ε = σ + ε ψ(x)`, `b` unchanged; `psi_sup` bounds `|ψ|`.
    VolatilityBump { psi: Arc<MatrixFn>, psi_sup: f64 },
    /// `b_ε = b ⋆ ρ_ε`, `σ_ε = σ ⋆ ρ_ε`; averaging against a probability
    /// density preserves every declared constant.
    Mollification { kernel: MollifierKernel },
    /// `b_ε = b + ε s(x)`, `σ` unchanged; `shift_sup` bounds `|s|`.
    DriftShift { shift: Arc<VectorFn>, shift_sup: f64 },
}

/// A base set together with a perturbation direction.
#[derive(Clone)]
pub struct PerturbationFamily {
    pub base: CoefficientSet,
    pub kind: Perturbation,
}

impl PerturbationFamily {
    pub fn volatility_bump<F: Fn(&[f64]) -> DMatrix<f64> + Send + Sync + 'static>(
        base: CoefficientSet,
        psi: F,
        psi_sup: f64,
    ) -> Self {
        PerturbationFamily {
            base,
            kind: Perturbation::VolatilityBump {
                psi: Arc::new(psi),
                psi_sup,
            },
        }
    }

    pub fn mollification(base: CoefficientSet, kernel: MollifierKernel) -> Self {
        PerturbationFamily {
            base,
            kind: Perturbation::Mollification { kernel },
        }
    }

    pub fn drift_shift<F: Fn(&[f64]) -> DVector<f64> + Send + Sync + 'static>(
        base: CoefficientSet,
        shift: F,
        shift_sup: f64,
    ) -> Self {
        PerturbationFamily {
            base,
            kind: Perturbation::DriftShift {
                shift: Arc::new(shift),
                shift_sup,
            },
        }
    }

    /// The perturbed set at scale `ε ≥ 0`; `ε = 0` reproduces the base set
    /// pointwise.
    ///
    /// A volatility bump moves `σ`'s singular values by at most
    /// `ε·psi_sup`, so the declared ellipticity constant widens to cover
    /// the shifted range; a bump large enough to reach a zero singular
    /// value is rejected rather than declared away.
    pub fn perturbed(&self, eps: f64) -> Result<CoefficientSet> {
        if eps < 0.0 {
            return Err(Error::InvalidArgument(format!(
                "perturbation scale must be nonnegative, got {eps}"
            )));
        }
        let mut set = self.base.clone();
        if eps == 0.0 {
            return Ok(set);
        }
        match &self.kind {
            Perturbation::VolatilityBump { psi, psi_sup } => {
                let reach = eps * psi_sup;
                let sigma_floor = self.base.lambda.powf(-0.5) - reach;
                if !(sigma_floor > 0.0) {
                    return Err(Error::EllipticityViolation {
                        point: vec![],
                        detail: format!(
                            "bump of size {reach} can cancel a diffusion with singular values down to {}",
                            self.base.lambda.powf(-0.5)
                        ),
                    });
                }
                let sigma_ceil = self.base.lambda.sqrt() + reach;
                set.lambda = (sigma_ceil * sigma_ceil).max((sigma_floor * sigma_floor).recip());
                set.k2 += reach;
                let inner = self.base.diffusion.clone();
                let psi = psi.clone();
                set.diffusion =
                    DiffusionField::new(move |t, x| inner.eval(t, x) + psi(x) * eps);
            }
            Perturbation::Mollification { kernel } => {
                set.drift = mollify_drift(&self.base.drift, kernel, eps)?;
                set.diffusion = mollify_diffusion(&self.base.diffusion, kernel, eps)?;
            }
            Perturbation::DriftShift { shift, shift_sup } => {
                set.k1 += eps * shift_sup;
                let inner = self.base.drift.clone();
                let shift = shift.clone();
                set.drift = DriftField::new(move |t, x| inner.eval(t, x) + shift(x) * eps);
            }
        }
        Ok(set)
    }
}

/// Ready-made coefficient sets used across the test and audit suites.
pub mod presets {
    use super::*;

    /// Constant-coefficient set in dimension `d`.
    pub fn constant(dim: usize, sigma: f64, drift: f64) -> CoefficientSet {
        let a = sigma * sigma;
        let lambda = a.max(1.0 / a).max(1.0);
        CoefficientSet::new(
            dim,
            DriftField::constant(DVector::from_element(dim, drift)),
            DiffusionField::constant(DMatrix::identity(dim, dim) * sigma),
            1.0,
            drift.abs().max(1e-12),
            (sigma * sigma * dim as f64).sqrt() + 1e-12,
            lambda + 1e-12,
            1e-9,
            true,
        )
        .expect("constant preset is valid")
    }

    /// One-dimensional Lipschitz benchmark: `σ(x) = sqrt(2 + sin x)`,
    /// `b(x) = cos x`, so `a(x) = 2 + sin x` has eigenvalues in `[1, 3]`.
    pub fn holder_benchmark_1d() -> CoefficientSet {
        CoefficientSet::new(
            1,
            DriftField::scalar_1d(|_, x| x.cos()),
            DiffusionField::scalar_1d(|_, x| (2.0 + x.sin()).sqrt()),
            1.0,
            1.0,
            3f64.sqrt(),
            3.0,
            1.0,
            true,
        )
        .expect("benchmark preset is valid")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::{assert_abs_diff_eq, assert_relative_eq};

    fn unit_box() -> SampleBox {
        SampleBox::centered(1, 1.0).unwrap()
    }

    #[test]
    fn holder_of_linear_map_is_its_slope() {
        let plan = PairPlan::tensor(unit_box(), 60).unwrap();
        let v = holder_seminorm(|x: &[f64]| 2.0 * x[0], 1.0, &plan).unwrap();
        assert_relative_eq!(v, 2.0, max_relative = 1e-12);
    }

    #[test]
    fn holder_of_constant_is_zero() {
        let plan = PairPlan::tensor(unit_box(), 60).unwrap();
        let v = holder_seminorm(|_: &[f64]| 3.5, 0.5, &plan).unwrap();
        assert_abs_diff_eq!(v, 0.0);
    }

    #[test]
    fn holder_of_sqrt_abs_reaches_one() {
        // Brute-force oracle: the quotient |sqrt|x| − sqrt|y||/|x−y|^{1/2}
        // attains 1 exactly on pairs anchored at the kink, which the grid
        // contains (odd point count puts a node at 0).
        let plan = PairPlan::tensor(unit_box(), 61).unwrap();
        let v = holder_seminorm(|x: &[f64]| x[0].abs().sqrt(), 0.5, &plan).unwrap();
        assert_relative_eq!(v, 1.0, max_relative = 1e-9);
    }

    #[test]
    fn holder_rejects_bad_exponent_and_small_plans() {
        let plan = PairPlan::tensor(unit_box(), 60).unwrap();
        assert!(holder_seminorm(|x: &[f64]| x[0], 1.5, &plan).is_err());
        let tiny = PairPlan::tensor(unit_box(), 3).unwrap();
        assert!(holder_seminorm(|x: &[f64]| x[0], 1.0, &tiny).is_err());
    }

    #[test]
    fn holder_flags_nan_with_offending_point() {
        let plan = PairPlan::tensor(unit_box(), 60).unwrap();
        let err = holder_seminorm(
            |x: &[f64]| if x[0] > 0.99 { f64::NAN } else { x[0] },
            1.0,
            &plan,
        )
        .unwrap_err();
        assert!(matches!(err, Error::NonFinite { .. }));
    }

    #[test]
    fn holder_monotone_under_plan_refinement() {
        // The refined grid contains the coarse one (midpoint refinement) and
        // shares the base separation, so its pair set is a superset.
        let f = |x: &[f64]| (3.0 * x[0]).sin();
        let coarse = PairPlan::tensor(unit_box(), 46)
            .unwrap()
            .with_base_separation(1.0 / 45.0);
        let fine = PairPlan::tensor(unit_box(), 91)
            .unwrap()
            .with_base_separation(1.0 / 45.0);
        let vc = holder_seminorm(f, 0.7, &coarse).unwrap();
        let vf = holder_seminorm(f, 0.7, &fine).unwrap();
        assert!(vf >= vc);
    }

    #[test]
    fn delta_metrics_vanish_for_identical_sets() {
        let set = presets::holder_benchmark_1d();
        let dom = MetricDomain {
            domain: SampleBox::centered(1, 2.0).unwrap(),
            nodes_per_axis: 201,
            compactly_supported: false,
        };
        let m = delta_metrics(&set, &set, QIndex::Infinity, &[0.0], &dom).unwrap();
        assert_abs_diff_eq!(m.delta_b_sup, 0.0);
        assert_abs_diff_eq!(m.delta_sigma_holder, 0.0);
        assert_abs_diff_eq!(m.delta_total, 0.0);
        assert_abs_diff_eq!(m.alpha_q, 0.5);
    }

    #[test]
    fn delta_metrics_sees_constant_drift_shift_exactly() {
        let base = presets::constant(1, 1.0, 0.0);
        let family = PerturbationFamily::drift_shift(base.clone(), |_x| {
            DVector::from_element(1, 1.0)
        }, 1.0);
        let pert = family.perturbed(0.37).unwrap();
        let dom = MetricDomain {
            domain: SampleBox::centered(1, 2.0).unwrap(),
            nodes_per_axis: 101,
            compactly_supported: false,
        };
        let m = delta_metrics(&base, &pert, QIndex::Infinity, &[0.0], &dom).unwrap();
        assert_relative_eq!(m.delta_b_sup, 0.37, max_relative = 1e-13);
        assert_abs_diff_eq!(m.delta_sigma_holder, 0.0);
    }

    #[test]
    fn delta_metrics_lq_of_indicator_difference() {
        // Drift difference ε·1_{[0,1)} on a grid whose nodes land on both
        // jumps: the trapezoid value of the half-open indicator telescopes to
        // the exact integral, so ‖diff‖_{L²} = ε·(1·1)^{1/2} = ε.
        let eps = 0.25;
        let base = presets::constant(1, 1.0, 0.0);
        let mut pert = base.clone();
        pert.drift = DriftField::scalar_1d(move |_, x| {
            if (0.0..1.0).contains(&x) {
                eps
            } else {
                0.0
            }
        });
        let dom = MetricDomain {
            domain: SampleBox::new(vec![-2.0], vec![2.0]).unwrap(),
            nodes_per_axis: 401,
            compactly_supported: true,
        };
        let m = delta_metrics(&base, &pert, QIndex::Finite(2.0), &[0.0], &dom).unwrap();
        assert_relative_eq!(m.delta_b_lq, eps, max_relative = 1e-6);
        assert!(m.lq_exact);
        assert_relative_eq!(m.alpha_q, 0.25, max_relative = 1e-12);
    }

    #[test]
    fn delta_metrics_reject_small_q() {
        let set = presets::constant(1, 1.0, 0.0);
        let dom = MetricDomain {
            domain: unit_box(),
            nodes_per_axis: 11,
            compactly_supported: false,
        };
        assert!(delta_metrics(&set, &set, QIndex::Finite(1.0), &[0.0], &dom).is_err());
    }

    fn sign(x: f64) -> f64 {
        if x > 0.0 {
            1.0
        } else if x < 0.0 {
            -1.0
        } else {
            0.0
        }
    }

    #[test]
    fn mollified_sign_vanishes_at_origin() {
        let field = DriftField::scalar_1d(|_, x| sign(x));
        let kernel = MollifierKernel::triangular(1).unwrap();
        let m = mollify_drift(&field, &kernel, 0.3).unwrap();
        assert_abs_diff_eq!(m.eval(0.0, &[0.0])[0], 0.0, epsilon = 1e-12);
    }

    #[test]
    fn mollified_constant_is_preserved() {
        let field = DriftField::constant(DVector::from_element(1, 2.0));
        let kernel = MollifierKernel::triangular(1).unwrap();
        let m = mollify_drift(&field, &kernel, 0.1).unwrap();
        assert_relative_eq!(m.eval(0.0, &[0.7])[0], 2.0, max_relative = 1e-8);
    }

    #[test]
    fn mollified_sin_sup_gap_scales_linearly() {
        // Brute-force sup over a 10^4-point grid; the one-sided kernel has a
        // nonzero first moment, so the leading difference is ε·m₁·cos and the
        // log-log slope across the sweep is 1.
        let field = DriftField::scalar_1d(|_, x| x.sin());
        let kernel = MollifierKernel::one_sided_hat(1).unwrap();
        let epss = [0.2, 0.1, 0.05];
        let mut sups = Vec::new();
        for &e in &epss {
            let m = mollify_drift(&field, &kernel, e).unwrap();
            let mut sup = 0.0f64;
            for i in 0..10_000 {
                let x = -std::f64::consts::PI + 2.0 * std::f64::consts::PI * i as f64 / 9_999.0;
                sup = sup.max((m.eval(0.0, &[x])[0] - x.sin()).abs());
            }
            sups.push(sup);
        }
        let slope = (sups[0].ln() - sups[2].ln()) / (epss[0].ln() - epss[2].ln());
        assert!((slope - 1.0).abs() < 0.1, "slope {slope}");
    }

    #[test]
    fn mollifier_rejects_non_normalized_kernels() {
        assert!(MollifierKernel::new(|_z: &[f64]| 0.7, 1.0, 1).is_err());
    }

    #[test]
    fn mollified_field_preserves_sup_bound() {
        let field = DriftField::scalar_1d(|_, x| x.sin());
        let kernel = MollifierKernel::one_sided_hat(1).unwrap();
        let m = mollify_drift(&field, &kernel, 0.4).unwrap();
        for i in 0..200 {
            let x = -4.0 + 8.0 * i as f64 / 199.0;
            assert!(m.eval(0.0, &[x])[0].abs() <= 1.0 + 1e-9);
        }
    }

    #[test]
    fn assumption_report_accepts_unit_constant_set() {
        let set = presets::constant(1, 1.0, 0.0);
        let plan = PairPlan::tensor(SampleBox::centered(1, 3.0).unwrap(), 60).unwrap();
        let rep = assumption_report(&set, &[0.0], &plan).unwrap();
        assert!(rep.pass);
        assert_relative_eq!(rep.eig_min, 1.0, max_relative = 1e-12);
        assert_relative_eq!(rep.eig_max, 1.0, max_relative = 1e-12);
    }

    #[test]
    fn assumption_report_accepts_benchmark_set() {
        let set = presets::holder_benchmark_1d();
        let plan = PairPlan::tensor(
            SampleBox::centered(1, std::f64::consts::PI).unwrap(),
            60,
        )
        .unwrap();
        let rep = assumption_report(&set, &[0.0], &plan).unwrap();
        assert!(rep.pass, "report: {rep:?}");
        assert!(rep.eig_min >= 1.0 - 1e-9 && rep.eig_max <= 3.0 + 1e-9);
    }

    #[test]
    fn assumption_report_flags_discontinuous_drift() {
        let mut set = presets::constant(1, 1.0, 0.0);
        set.drift = DriftField::scalar_1d(|_, x| sign(x));
        set.k1 = 1.0;
        set.kappa = 5.0;
        let plan = PairPlan::tensor(SampleBox::centered(1, 1.0).unwrap(), 61).unwrap();
        let rep = assumption_report(&set, &[0.0], &plan).unwrap();
        // The jump forces a quotient of 2/spacing on the tightest straddling
        // pair, far above any sensible κ.
        assert!(!rep.drift_holder_ok);
        assert!(rep.drift_holder >= 50.0);
    }

    #[test]
    fn perturbation_at_zero_is_identity() {
        let base = presets::holder_benchmark_1d();
        let family = PerturbationFamily::volatility_bump(base.clone(), |x: &[f64]| {
            DMatrix::from_element(1, 1, x[0].sin())
        }, 1.0);
        let p = family.perturbed(0.0).unwrap();
        for i in 0..50 {
            let x = [-2.0 + 4.0 * i as f64 / 49.0];
            assert_eq!(
                base.diffusion.eval(0.3, &x)[(0, 0)],
                p.diffusion.eval(0.3, &x)[(0, 0)]
            );
            assert_eq!(base.drift.eval(0.3, &x)[0], p.drift.eval(0.3, &x)[0]);
        }
    }

    #[test]
    fn volatility_bump_is_linear_in_eps() {
        let base = presets::holder_benchmark_1d();
        let family = PerturbationFamily::volatility_bump(base.clone(), |x: &[f64]| {
            DMatrix::from_element(1, 1, x[0].sin())
        }, 1.0);
        let p = family.perturbed(0.2).unwrap();
        for i in 0..50 {
            let x = [-2.0 + 4.0 * i as f64 / 49.0];
            let diff = p.diffusion.eval(0.0, &x)[(0, 0)] - base.diffusion.eval(0.0, &x)[(0, 0)];
            assert_relative_eq!(diff, 0.2 * x[0].sin(), epsilon = 1e-14);
        }
    }
}
