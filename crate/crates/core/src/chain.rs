//! Markov-chain counterpart of the diffusion machinery: one-step
//! transitions, frozen-chain densities, the discrete defect kernel, the
//! step-weighted convolution `⊗_h`, and the finite parametrix sum.
//!
//! A chain approximates the diffusion with `N` Euler-type steps of size
//! `h = T/N`, driven by i.i.d. innovations that are either standard
//! Gaussian or a heavy-tailed polynomial-decay law.  The frozen proxy
//! drops the drift and evaluates `σ` at a fixed freeze point, which makes
//! its multi-step density a pure convolution: a closed-form Gaussian, or a
//! tabulated grid self-convolution for the polynomial-tail law.
//!
//! The zero-elapsed-time convention is fixed once and used everywhere: the
//! order-0 term at `i = j` is a Dirac mass (collapsing the `k = 0` slice of
//! `⊗_h` to `h·g`), and every higher-order term vanishes at `i = j`.  This
//! is the unique convention under which one step of the expansion
//! telescopes exactly: `p̃ + h·h⁻¹(π − p̃) = π`.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::coefficients::CoefficientSet;
use crate::gaussian::{q_r_normalizer, FrozenCovariance, MAX_DIM};
use crate::quad::gauss_hermite;
use crate::special::beta;
use crate::{Error, Result};

/// Innovation density with polynomial tail decay of order `M`:
/// the rescaled radial profile `c̃/c · (1 + (z/c)²)^{−M/2}` with
/// `c = √(M−3)`, which has unit mass, zero mean, and unit variance.
#[derive(Clone, Debug)]
pub struct PolyTailLaw {
    /// Decay order `M`.
    pub m: f64,
    /// Variance-normalizing scale `√(M−3)`.
    pub scale: f64,
    /// Fitted sup of `f_ξ / Q_M` over the tabulation grid.
    pub tail_domination: f64,
    norm: f64,
    nodes: Vec<f64>,
    values: Vec<f64>,
}

/// Tabulation layout for polynomial-tail innovations: 1025 nodes covering
/// enough of the tail that the truncated mass is far below the 10⁻⁸
/// normalization tolerance for every admissible order.
const TAB_NODES: usize = 1025;
const TAB_HALFWIDTH: f64 = 40.0;

impl PolyTailLaw {
    pub fn new(m: f64) -> Result<Self> {
        if !(m > 8.0) {
            return Err(Error::InvalidArgument(format!(
                "polynomial tail order must exceed 2d+5+γ (> 8 in d = 1), got {m}"
            )));
        }
        let scale = (m - 3.0).sqrt();
        let norm = 1.0 / beta(0.5, 0.5 * (m - 1.0));
        let step = 2.0 * TAB_HALFWIDTH / (TAB_NODES - 1) as f64;
        let nodes: Vec<f64> = (0..TAB_NODES)
            .map(|i| -TAB_HALFWIDTH + i as f64 * step)
            .collect();
        let mut law = PolyTailLaw {
            m,
            scale,
            tail_domination: 0.0,
            norm,
            nodes,
            values: Vec::new(),
        };
        law.values = law.nodes.iter().map(|&z| law.density(z)).collect();

        let mut mass = 0.0;
        let mut second = 0.0;
        for (i, (&z, &f)) in law.nodes.iter().zip(&law.values).enumerate() {
            let w = if i == 0 || i == TAB_NODES - 1 { 0.5 * step } else { step };
            mass += w * f;
            second += w * z * z * f;
        }
        if (mass - 1.0).abs() > 1e-8 {
            return Err(Error::InvalidArgument(format!(
                "tabulated innovation mass {mass} is off unity beyond 1e-8"
            )));
        }
        if (second - 1.0).abs() > 1e-6 {
            return Err(Error::InvalidArgument(format!(
                "tabulated innovation variance {second} is off unity beyond 1e-6"
            )));
        }
        let profile_norm = q_r_normalizer(m, 1)?;
        law.tail_domination = law
            .nodes
            .iter()
            .zip(&law.values)
            .map(|(&z, &f)| f / (profile_norm * (1.0 + z.abs()).powf(-m)))
            .fold(0.0f64, f64::max);
        Ok(law)
    }

    /// Analytic density value.
    pub fn density(&self, z: f64) -> f64 {
        let u = z / self.scale;
        self.norm / self.scale * (1.0 + u * u).powf(-0.5 * self.m)
    }

    /// Tabulation nodes and values (uniform, symmetric around zero).
    pub fn tabulated(&self) -> (&[f64], &[f64]) {
        (&self.nodes, &self.values)
    }
}

/// Law of the i.i.d. chain innovations.
#[derive(Clone, Debug)]
pub enum InnovationLaw {
    /// Standard Gaussian in any supported dimension.
    Gaussian,
    /// Polynomial-decay law; one-dimensional chains only.
    PolynomialTail(PolyTailLaw),
}

impl InnovationLaw {
    pub fn gaussian() -> Self {
        InnovationLaw::Gaussian
    }

    pub fn polynomial_tail(m: f64) -> Result<Self> {
        Ok(InnovationLaw::PolynomialTail(PolyTailLaw::new(m)?))
    }

    /// Density of one standardized innovation vector.
    pub fn density(&self, w: &[f64]) -> f64 {
        match self {
            InnovationLaw::Gaussian => {
                let d = w.len() as f64;
                let ww: f64 = w.iter().map(|v| v * v).sum();
                (2.0 * std::f64::consts::PI).powf(-0.5 * d) * (-0.5 * ww).exp()
            }
            InnovationLaw::PolynomialTail(law) => law.density(w[0]),
        }
    }
}

/// Euler-type chain over `[0, T]` with `N` steps of size `h = T/N`.
#[derive(Clone)]
pub struct ChainModel {
    pub set: CoefficientSet,
    pub horizon: f64,
    pub n_steps: usize,
    pub h: f64,
    pub law: InnovationLaw,
}

impl ChainModel {
    pub fn new(set: CoefficientSet, horizon: f64, n_steps: usize, law: InnovationLaw) -> Result<Self> {
        if !(horizon > 0.0 && horizon.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "chain horizon must be positive and finite, got {horizon}"
            )));
        }
        if n_steps == 0 {
            return Err(Error::InvalidArgument("chain needs at least one step".into()));
        }
        if let InnovationLaw::PolynomialTail(poly) = &law {
            if set.dim != 1 {
                return Err(Error::Unsupported(
                    "polynomial-tail innovations are implemented in dimension 1 only".into(),
                ));
            }
            let floor = 2.0 * set.dim as f64 + 5.0 + set.gamma;
            if !(poly.m > floor) {
                return Err(Error::InvalidArgument(format!(
                    "polynomial tail order {} must exceed 2d+5+γ = {floor}",
                    poly.m
                )));
            }
        }
        let h = horizon / n_steps as f64;
        Ok(ChainModel {
            set,
            horizon,
            n_steps,
            h,
            law,
        })
    }

    /// Grid time `t_k = k·h`.
    pub fn time(&self, k: usize) -> f64 {
        k as f64 * self.h
    }
}

/// Affine map of one chain step: `w ↦ x + shift + √h·σ·w`, with the
/// drift shift `b(t_k,x)·h` for the true step and zero for frozen steps.
#[derive(Clone, Debug)]
pub struct OneStepTransition {
    pub k: usize,
    pub x: Vec<f64>,
    pub shift: DVector<f64>,
    pub sigma: DMatrix<f64>,
    pub h: f64,
    /// Change-of-variables factor `det σ · h^{d/2}`.
    pub jacobian: f64,
    sigma_inv: DMatrix<f64>,
}

impl OneStepTransition {
    fn build(model: &ChainModel, k: usize, x: &[f64], sigma_at: &[f64], drifted: bool) -> Result<Self> {
        if k >= model.n_steps {
            return Err(Error::InvalidArgument(format!(
                "step index {k} is out of range for an {}-step chain",
                model.n_steps
            )));
        }
        if x.len() != model.set.dim {
            return Err(Error::AxisMismatch(format!(
                "start point dimension {} does not match the model dimension {}",
                x.len(),
                model.set.dim
            )));
        }
        let t = model.time(k);
        let sigma = model.set.diffusion.eval(t, sigma_at);
        let det = sigma.determinant();
        if !(det.abs() > 1e-12) {
            return Err(Error::EllipticityViolation {
                point: sigma_at.to_vec(),
                detail: format!("one-step diffusion matrix is singular (det = {det:e})"),
            });
        }
        let sigma_inv = sigma.clone().try_inverse().ok_or_else(|| Error::EllipticityViolation {
            point: sigma_at.to_vec(),
            detail: "one-step diffusion matrix is not invertible".into(),
        })?;
        let shift = if drifted {
            model.set.drift.eval(t, x) * model.h
        } else {
            DVector::zeros(model.set.dim)
        };
        Ok(OneStepTransition {
            k,
            x: x.to_vec(),
            shift,
            sigma,
            h: model.h,
            jacobian: det.abs() * model.h.powf(0.5 * model.set.dim as f64),
            sigma_inv,
        })
    }

    /// True chain step from `x`.
    pub fn new(model: &ChainModel, k: usize, x: &[f64]) -> Result<Self> {
        Self::build(model, k, x, x, true)
    }

    /// Frozen step: driftless, with `σ` evaluated at the freeze point.
    pub fn frozen(model: &ChainModel, k: usize, x: &[f64], freeze: &[f64]) -> Result<Self> {
        Self::build(model, k, x, freeze, false)
    }

    /// Image of one innovation vector.
    pub fn apply(&self, w: &[f64]) -> Vec<f64> {
        let d = self.x.len();
        let root_h = self.h.sqrt();
        let mut out = Vec::with_capacity(d);
        for r in 0..d {
            let mut acc = self.x[r] + self.shift[r];
            for c in 0..d {
                acc += root_h * self.sigma[(r, c)] * w[c];
            }
            out.push(acc);
        }
        out
    }

    /// Transition density at displacement `disp = y − x` (before the drift
    /// shift): pull back through the affine map and divide by its Jacobian.
    pub fn density_disp(&self, law: &InnovationLaw, disp: &[f64]) -> f64 {
        let d = self.x.len();
        let root_h = self.h.sqrt();
        let mut w = [0.0; MAX_DIM];
        for r in 0..d {
            let mut acc = 0.0;
            for c in 0..d {
                acc += self.sigma_inv[(r, c)] * (disp[c] - self.shift[c]);
            }
            w[r] = acc / root_h;
        }
        law.density(&w[..d]) / self.jacobian
    }

    /// Transition density at the target `y`.
    pub fn density(&self, law: &InnovationLaw, y: &[f64]) -> f64 {
        let d = self.x.len();
        let mut disp = [0.0; MAX_DIM];
        for r in 0..d {
            disp[r] = y[r] - self.x[r];
        }
        self.density_disp(law, &disp[..d])
    }
}

/// One-step transition density `π^h(t_k, x, y)`.
pub fn one_step_density(model: &ChainModel, k: usize, x: &[f64], y: &[f64]) -> Result<f64> {
    Ok(OneStepTransition::new(model, k, x)?.density(&model.law, y))
}

/// Value of a chain density at a pair of time indices, honoring the
/// zero-elapsed-time convention.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ChainDensity {
    /// `i = j`: a Dirac mass at the start point.
    Dirac,
    Value(f64),
}

/// Density of the frozen multi-step chain `x + √h Σ σ(t_k, freeze) ξ_k`,
/// reusable across targets.  Spans of one step evaluate through the same
/// code path as the frozen one-step transition, so single-step identities
/// hold bitwise; longer polynomial-tail spans tabulate the self-convolution
/// on a grid of spacing `≤ √h/8` and interpolate linearly.
pub struct FrozenChainKernel {
    pub i: usize,
    pub j: usize,
    pub freeze: Vec<f64>,
    law: InnovationLaw,
    body: KernelBody,
}

enum KernelBody {
    SingleStep(OneStepTransition),
    Gaussian(FrozenCovariance),
    PolyGrid { lo: f64, step: f64, values: Vec<f64> },
}

impl FrozenChainKernel {
    pub fn build(model: &ChainModel, i: usize, j: usize, freeze: &[f64]) -> Result<Self> {
        let d = model.set.dim;
        if freeze.len() != d {
            return Err(Error::AxisMismatch(format!(
                "freeze point dimension {} does not match the model dimension {d}",
                freeze.len()
            )));
        }
        if !(i < j && j <= model.n_steps) {
            return Err(Error::InvalidArgument(format!(
                "frozen span needs i < j ≤ N, got i={i}, j={j}, N={}",
                model.n_steps
            )));
        }
        let body = if j - i == 1 {
            KernelBody::SingleStep(OneStepTransition::frozen(model, i, &vec![0.0; d], freeze)?)
        } else {
            match &model.law {
                InnovationLaw::Gaussian => {
                    let mut cov = DMatrix::zeros(d, d);
                    for k in i..j {
                        cov += model.set.a(model.time(k), freeze) * model.h;
                    }
                    KernelBody::Gaussian(FrozenCovariance::from_spd(cov, freeze)?)
                }
                InnovationLaw::PolynomialTail(law) => {
                    KernelBody::PolyGrid(poly_self_convolution(model, law, i, j, freeze[0])?)
                }
            }
        };
        Ok(FrozenChainKernel {
            i,
            j,
            freeze: freeze.to_vec(),
            law: model.law.clone(),
            body,
        })
    }

    /// Density at displacement `y − x`.
    pub fn eval_disp(&self, disp: &[f64]) -> f64 {
        match &self.body {
            KernelBody::SingleStep(step) => step.density_disp(&self.law, disp),
            KernelBody::Gaussian(cov) => cov.density_disp(disp),
            KernelBody::PolyGrid { lo, step, values } => {
                let u = (disp[0] - lo) / step;
                if !(0.0..=(values.len() - 1) as f64).contains(&u) {
                    return 0.0;
                }
                let idx = (u as usize).min(values.len() - 2);
                let frac = u - idx as f64;
                values[idx] * (1.0 - frac) + values[idx + 1] * frac
            }
        }
    }

    pub fn eval(&self, x: &[f64], y: &[f64]) -> f64 {
        let d = x.len();
        let mut disp = [0.0; MAX_DIM];
        for r in 0..d {
            disp[r] = y[r] - x[r];
        }
        self.eval_disp(&disp[..d])
    }
}

impl KernelBody {
    #[allow(non_snake_case)]
    fn PolyGrid(grid: (f64, f64, Vec<f64>)) -> Self {
        KernelBody::PolyGrid {
            lo: grid.0,
            step: grid.1,
            values: grid.2,
        }
    }
}

/// Tabulate the density of `√h Σ_{k=i}^{j−1} σ(t_k, freeze)·ξ` by direct
/// grid convolution, one step at a time.
fn poly_self_convolution(
    model: &ChainModel,
    law: &PolyTailLaw,
    i: usize,
    j: usize,
    freeze: f64,
) -> Result<(f64, f64, Vec<f64>)> {
    let root_h = model.h.sqrt();
    let step = root_h / 8.0;
    let sigmas: Vec<f64> = (i..j)
        .map(|k| model.set.diffusion.eval(model.time(k), &[freeze])[(0, 0)])
        .collect();
    let joint_sd = root_h * sigmas.iter().map(|s| s * s).sum::<f64>().sqrt();
    let half = 50.0 * joint_sd;
    let n_half = (half / step).ceil() as usize;
    let n = 2 * n_half + 1;
    let lo = -(n_half as f64) * step;

    let step_density = |sigma: f64, z: f64| law.density(z / (sigma * root_h)) / (sigma * root_h);
    let mut values: Vec<f64> = (0..n)
        .map(|a| step_density(sigmas[0], lo + a as f64 * step))
        .collect();
    // Per-step factor support: the analytic density is far below the
    // accumulated truncation budget beyond the tabulated innovation range.
    for &sigma in &sigmas[1..] {
        let reach = (TAB_HALFWIDTH * sigma * root_h / step).ceil() as isize;
        let next: Vec<f64> = (0..n as isize)
            .into_par_iter()
            .map(|a| {
                let mut acc = 0.0;
                let b_lo = (a - reach).max(0);
                let b_hi = (a + reach).min(n as isize - 1);
                for b in b_lo..=b_hi {
                    let z = (a - b) as f64 * step;
                    acc += values[b as usize] * step_density(sigma, z);
                }
                acc * step
            })
            .collect();
        values = next;
    }
    Ok((lo, step, values))
}

/// Frozen-chain density `p̃^h(t_i, t_j, x, y)` at freeze point `freeze`,
/// honoring the Dirac convention at `i = j`.  Batched callers should build
/// a [`FrozenChainKernel`] once per `(i, j, freeze)` instead.
pub fn frozen_chain_density(
    model: &ChainModel,
    i: usize,
    j: usize,
    x: &[f64],
    y: &[f64],
    freeze: &[f64],
) -> Result<ChainDensity> {
    if i == j {
        return Ok(ChainDensity::Dirac);
    }
    let kernel = FrozenChainKernel::build(model, i, j, freeze)?;
    Ok(ChainDensity::Value(kernel.eval(x, y)))
}

/// Discrete generator `h⁻¹·(E[φ(one step from x)] − φ(x))`; `frozen_at`
/// switches to the driftless step with `σ` at the freeze point.
///
/// The expectation uses 64-node Gauss–Hermite quadrature per axis for the
/// Gaussian law and the 1025-node tabulation trapezoid for the
/// polynomial-tail law.
pub fn generator_apply<F>(
    model: &ChainModel,
    k: usize,
    phi: F,
    x: &[f64],
    frozen_at: Option<&[f64]>,
) -> Result<f64>
where
    F: Fn(&[f64]) -> f64,
{
    let step = match frozen_at {
        Some(freeze) => OneStepTransition::frozen(model, k, x, freeze)?,
        None => OneStepTransition::new(model, k, x)?,
    };
    let expected = expect_under_step(&model.law, &step, |z| {
        let v = phi(z);
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::NonFinite {
                context: "generator test function sample".into(),
                point: z.to_vec(),
            })
        }
    })?;
    Ok((expected - phi(x)) / model.h)
}

/// Expectation of `f(step image)` under one innovation draw.
fn expect_under_step<F>(law: &InnovationLaw, step: &OneStepTransition, f: F) -> Result<f64>
where
    F: Fn(&[f64]) -> Result<f64>,
{
    let d = step.x.len();
    match law {
        InnovationLaw::Gaussian => {
            let (nodes, weights) = gauss_hermite(64)?;
            match d {
                1 => {
                    let mut acc = 0.0;
                    for (&w, &n) in weights.iter().zip(&nodes) {
                        acc += w * f(&step.apply(&[n]))?;
                    }
                    Ok(acc)
                }
                2 => {
                    let mut acc = 0.0;
                    for (&wa, &na) in weights.iter().zip(&nodes) {
                        for (&wb, &nb) in weights.iter().zip(&nodes) {
                            acc += wa * wb * f(&step.apply(&[na, nb]))?;
                        }
                    }
                    Ok(acc)
                }
                _ => Err(Error::Unsupported(
                    "chain generator quadrature covers dimensions 1 and 2".into(),
                )),
            }
        }
        InnovationLaw::PolynomialTail(poly) => {
            let (nodes, values) = poly.tabulated();
            let h = nodes[1] - nodes[0];
            let mut acc = 0.0;
            for (i, (&n, &fv)) in nodes.iter().zip(values).enumerate() {
                let w = if i == 0 || i == nodes.len() - 1 { 0.5 * h } else { h };
                acc += w * fv * f(&step.apply(&[n]))?;
            }
            Ok(acc)
        }
    }
}

/// Discrete defect kernel `H^h(t_i, t_j, x, y)`.
///
/// For `j = i+1` this is `h⁻¹(π^h − π̃^h)` — the true one-step density
/// minus the frozen one — evaluated through one shared code path so the
/// one-step telescoping identity is exact.  For `j > i+1` the true and
/// frozen generators are applied by innovation quadrature to
/// `z ↦ p̃^h(t_{i+1}, t_j, z, y)`; the `±φ(x)` terms cancel.
pub fn kernel_hh(model: &ChainModel, i: usize, j: usize, x: &[f64], y: &[f64]) -> Result<f64> {
    if !(i < j && j <= model.n_steps) {
        return Err(Error::InvalidArgument(format!(
            "kernel needs i < j ≤ N, got i={i}, j={j}, N={}",
            model.n_steps
        )));
    }
    if j == i + 1 {
        let true_step = OneStepTransition::new(model, i, x)?;
        let frozen_step = OneStepTransition::frozen(model, i, x, y)?;
        return Ok((true_step.density(&model.law, y) - frozen_step.density(&model.law, y)) / model.h);
    }
    let kernel = FrozenChainKernel::build(model, i + 1, j, y)?;
    let true_step = OneStepTransition::new(model, i, x)?;
    let frozen_step = OneStepTransition::frozen(model, i, x, y)?;
    let e_true = expect_under_step(&model.law, &true_step, |z| Ok(kernel.eval(z, y)))?;
    let e_frozen = expect_under_step(&model.law, &frozen_step, |z| Ok(kernel.eval(z, y)))?;
    Ok((e_true - e_frozen) / model.h)
}

/// Uniform spatial grid for `⊗_h` and the parametrix recursion.
#[derive(Clone, Debug)]
pub struct ChainGrid {
    pub nodes: Vec<f64>,
    pub step: f64,
}

impl ChainGrid {
    /// An odd-count uniform grid (odd so that halving checks nest).
    pub fn new(lo: f64, hi: f64, nodes: usize) -> Result<Self> {
        if !(hi > lo) || nodes < 33 || nodes % 2 == 0 {
            return Err(Error::InvalidArgument(format!(
                "chain grid needs lo < hi and an odd node count ≥ 33, got [{lo}, {hi}] with {nodes}"
            )));
        }
        let step = (hi - lo) / (nodes - 1) as f64;
        Ok(ChainGrid {
            nodes: (0..nodes).map(|i| lo + i as f64 * step).collect(),
            step,
        })
    }

    /// Default grid for a span: centered between the endpoints, reaching 8
    /// envelope widths past them, with spacing that resolves a single step
    /// of the narrowest admissible diffusion.
    pub fn spanning(model: &ChainModel, i: usize, j: usize, x: f64, y: f64) -> Result<Self> {
        if !(i < j && j <= model.n_steps) {
            return Err(Error::InvalidArgument(format!(
                "grid span needs i < j ≤ N, got i={i}, j={j}, N={}",
                model.n_steps
            )));
        }
        let span = (j - i) as f64 * model.h;
        let center = 0.5 * (x + y);
        let half = 0.5 * (y - x).abs() + 8.0 * (span * model.set.lambda).sqrt();
        let target_step = 0.5 * (model.h / model.set.lambda).sqrt();
        let mut count = (2.0 * half / target_step).ceil() as usize + 1;
        count = count.max(33);
        if count % 2 == 0 {
            count += 1;
        }
        ChainGrid::new(center - half, center + half, count)
    }

    fn weight(&self, idx: usize) -> f64 {
        if idx == 0 || idx == self.nodes.len() - 1 {
            0.5 * self.step
        } else {
            self.step
        }
    }

    /// Trapezoid mass of tabulated values; `stride = 2` evaluates the
    /// nested half-resolution grid.
    fn mass(&self, values: &[f64], stride: usize) -> f64 {
        let idx: Vec<usize> = (0..self.nodes.len()).step_by(stride).collect();
        let mut acc = 0.0;
        for w in idx.windows(2) {
            let (a, b) = (w[0], w[1]);
            acc += 0.5 * (values[a] + values[b]) * (self.nodes[b] - self.nodes[a]);
        }
        acc
    }
}

/// Step-weighted convolution
/// `(f ⊗_h g)(t_i, t_j, x, y) = Σ_{k=0}^{j−i−1} h ∫ f(t_i,t_{i+k},x,z) g(t_{i+k},t_j,z,y) dz`,
/// where a Dirac value of `f` at zero elapsed time collapses the `k = 0`
/// slice to `h·g(t_i, t_j, x, y)`.
pub fn discrete_convolve<F, G>(
    f: F,
    g: G,
    i: usize,
    j: usize,
    x: &[f64],
    y: &[f64],
    h: f64,
    grid: &ChainGrid,
) -> Result<f64>
where
    F: Fn(usize, usize, &[f64], &[f64]) -> Result<ChainDensity>,
    G: Fn(usize, usize, &[f64], &[f64]) -> Result<f64>,
{
    if !(i < j) {
        return Err(Error::InvalidArgument(format!(
            "discrete convolution needs i < j, got i={i}, j={j}"
        )));
    }
    let mut total = 0.0;
    for k in 0..(j - i) {
        if k == 0 {
            match f(i, i, x, x)? {
                ChainDensity::Dirac => total += h * g(i, j, x, y)?,
                ChainDensity::Value(_) => {
                    let mut acc = 0.0;
                    for (idx, z) in grid.nodes.iter().enumerate() {
                        let fv = match f(i, i, x, &[*z])? {
                            ChainDensity::Dirac => {
                                return Err(Error::InvalidArgument(
                                    "inconsistent Dirac convention in convolution source".into(),
                                ))
                            }
                            ChainDensity::Value(v) => v,
                        };
                        acc += grid.weight(idx) * fv * g(i, j, &[*z], y)?;
                    }
                    total += h * acc;
                }
            }
            continue;
        }
        let mut acc = 0.0;
        for (idx, z) in grid.nodes.iter().enumerate() {
            let fv = match f(i, i + k, x, &[*z])? {
                ChainDensity::Dirac => {
                    return Err(Error::InvalidArgument(
                        "Dirac values are only admissible at zero elapsed time".into(),
                    ))
                }
                ChainDensity::Value(v) => v,
            };
            acc += grid.weight(idx) * fv * g(i + k, j, &[*z], y)?;
        }
        total += h * acc;
    }
    Ok(total)
}

/// Finite parametrix sum at one target.
#[derive(Clone, Debug)]
pub struct ChainParametrixResult {
    /// Sum of all orders `r = 0..=j−i`.
    pub value: f64,
    /// Per-order terms.
    pub terms: Vec<f64>,
    /// Trapezoid mass of the order-0 term over the grid.
    pub term0_mass: f64,
    /// Full-grid vs half-grid mass difference of the order-0 term; the
    /// refinement guard that rejected coarser grids.
    pub mass_refinement_gap: f64,
}

/// Frozen span density as a scalar (d = 1), freeze at the evaluation point.
fn frozen_span_value(
    model: &ChainModel,
    kernels: &SpanKernels,
    i: usize,
    m: usize,
    x: f64,
    z: f64,
) -> Result<f64> {
    match &model.law {
        InnovationLaw::Gaussian => {
            let mut var = 0.0;
            for k in i..m {
                var += model.h * model.set.a(model.time(k), &[z])[(0, 0)];
            }
            Ok(gauss1(z - x, var))
        }
        InnovationLaw::PolynomialTail(_) => {
            let kernel = kernels.get(model, i, m, z)?;
            Ok(kernel.eval(&[x], &[z]))
        }
    }
}

/// Scalar Gaussian density with variance `v`.
fn gauss1(u: f64, v: f64) -> f64 {
    (-0.5 * u * u / v).exp() / (2.0 * std::f64::consts::PI * v).sqrt()
}

/// Kernel entry for the parametrix recursion.  The Gaussian law admits a
/// closed form: averaging the frozen Gaussian over one true (resp. frozen)
/// step just adds the step's covariance, so
/// `H^h = h⁻¹[N(y−x−b(x)h; C + h·a(x)) − N(y−x; C + h·a(y))]` with
/// `C` the frozen covariance of the remaining steps.  The tests pin this
/// against the quadrature definition in [`kernel_hh`].
fn hh_entry(model: &ChainModel, kernels: &SpanKernels, k: usize, m: usize, z: f64, zp: f64) -> Result<f64> {
    match &model.law {
        InnovationLaw::Gaussian => {
            let t = model.time(k);
            let mut c_var = 0.0;
            for q in (k + 1)..m {
                c_var += model.h * model.set.a(model.time(q), &[zp])[(0, 0)];
            }
            let az = model.set.a(t, &[z])[(0, 0)];
            let azp = model.set.a(t, &[zp])[(0, 0)];
            let bz = model.set.drift.eval(t, &[z])[0];
            let disp = zp - z;
            Ok((gauss1(disp - bz * model.h, c_var + model.h * az)
                - gauss1(disp, c_var + model.h * azp))
                / model.h)
        }
        InnovationLaw::PolynomialTail(_) => {
            if m == k + 1 {
                return kernel_hh(model, k, m, &[z], &[zp]);
            }
            let kernel = kernels.get(model, k + 1, m, zp)?;
            let true_step = OneStepTransition::new(model, k, &[z])?;
            let frozen_step = OneStepTransition::frozen(model, k, &[z], &[zp])?;
            let e_true = expect_under_step(&model.law, &true_step, |w| Ok(kernel.eval(w, &[zp])))?;
            let e_frozen = expect_under_step(&model.law, &frozen_step, |w| Ok(kernel.eval(w, &[zp])))?;
            Ok((e_true - e_frozen) / model.h)
        }
    }
}

/// Cache of frozen-chain kernels keyed by `(span, freeze)`; only the
/// polynomial-tail law needs it (Gaussian spans are closed-form).
struct SpanKernels {
    cells: std::sync::Mutex<std::collections::HashMap<(usize, u64), std::sync::Arc<FrozenChainKernel>>>,
}

impl SpanKernels {
    fn new() -> Self {
        SpanKernels {
            cells: std::sync::Mutex::new(std::collections::HashMap::new()),
        }
    }

    fn get(&self, model: &ChainModel, i: usize, j: usize, freeze: f64) -> Result<std::sync::Arc<FrozenChainKernel>> {
        let key = (j - i, freeze.to_bits());
        if let Some(k) = self.cells.lock().expect("kernel cache lock").get(&key) {
            return Ok(k.clone());
        }
        let built = std::sync::Arc::new(FrozenChainKernel::build(model, i, j, &[freeze])?);
        let mut map = self.cells.lock().expect("kernel cache lock");
        Ok(map.entry(key).or_insert(built).clone())
    }
}

/// Finite parametrix sum `Σ_{r=0}^{j−i} Φ_r(t_i, t_j, x, y)` at one target.
pub fn chain_density_parametrix(
    model: &ChainModel,
    i: usize,
    j: usize,
    x: &[f64],
    y: &[f64],
    grid: &ChainGrid,
) -> Result<ChainParametrixResult> {
    let mut out = chain_density_parametrix_grid(model, i, j, x, &[y[0]], grid)?;
    Ok(out.pop().expect("one target yields one result"))
}

/// Finite parametrix sum at many targets with one shared recursion.
///
/// `Φ_0 = p̃^h` (Dirac at zero elapsed time), `Φ_r = Φ_{r−1} ⊗_h H^h`, and
/// the returned terms are `Φ_r(t_i, t_j, x, y)` for `r = 0..=j−i`.  The
/// intermediate layers are materialized on the grid; kernel matrices are
/// shared across orders (and across time pairs of equal span for
/// time-homogeneous coefficients).
pub fn chain_density_parametrix_grid(
    model: &ChainModel,
    i: usize,
    j: usize,
    x: &[f64],
    targets: &[f64],
    grid: &ChainGrid,
) -> Result<Vec<ChainParametrixResult>> {
    if model.set.dim != 1 {
        return Err(Error::Unsupported(
            "the chain parametrix recursion covers dimension 1 only".into(),
        ));
    }
    if !(i < j && j <= model.n_steps) {
        return Err(Error::InvalidArgument(format!(
            "parametrix span needs i < j ≤ N, got i={i}, j={j}, N={}",
            model.n_steps
        )));
    }
    if targets.is_empty() {
        return Err(Error::InvalidArgument("parametrix needs at least one target".into()));
    }
    let nt = j - i;
    if matches!(model.law, InnovationLaw::PolynomialTail(_)) && nt > 4 {
        return Err(Error::Unsupported(
            "polynomial-tail parametrix spans are limited to 4 steps (grid self-convolutions per freeze point dominate the cost)".into(),
        ));
    }
    let xs = x[0];
    let span = nt as f64 * model.h;
    let (lo, hi) = (grid.nodes[0], *grid.nodes.last().expect("nonempty grid"));
    let reach = 8.0 * span.sqrt();
    if xs - reach < lo || xs + reach > hi {
        return Err(Error::InvalidArgument(format!(
            "grid [{lo}, {hi}] must cover the start point ± 8·√(elapsed) = [{}, {}]",
            xs - reach,
            xs + reach
        )));
    }
    if targets.iter().any(|y| *y < lo || *y > hi) {
        return Err(Error::InvalidArgument(
            "every target must lie inside the spatial grid".into(),
        ));
    }

    let nz = grid.nodes.len();
    let h = model.h;
    let kernels = SpanKernels::new();

    // Order-0 term on the grid at the full span, for the mass guard.
    let term0_grid: Vec<f64> = grid
        .nodes
        .par_iter()
        .map(|&z| frozen_span_value(model, &kernels, i, j, xs, z))
        .collect::<Result<_>>()?;
    let full_mass = grid.mass(&term0_grid, 1);
    let half_mass = grid.mass(&term0_grid, 2);
    let mass_gap = (full_mass - half_mass).abs();
    if mass_gap > 1e-3 {
        return Err(Error::RefinementNeeded(format!(
            "spatial grid too coarse for the order-0 mass: full-grid {full_mass} vs half-grid {half_mass}"
        )));
    }

    // Φ_0 on the grid at the interior spans 1..nt−1.
    let phi0: Vec<Vec<f64>> = (1..nt)
        .map(|sm| {
            grid.nodes
                .par_iter()
                .map(|&z| frozen_span_value(model, &kernels, i, i + sm, xs, z))
                .collect::<Result<_>>()
        })
        .collect::<Result<_>>()?;

    // Kernel matrices between interior grid times, stored column-major
    // (target-point-major) and shared by span for time-homogeneous sets.
    let spans_needed = nt.saturating_sub(2);
    let shared = model.set.time_homogeneous;
    let mut k_mats: Vec<Vec<f64>> = Vec::new();
    for ell in 1..=spans_needed {
        let mat: Vec<f64> = (0..nz * nz)
            .into_par_iter()
            .map(|flat| {
                let b = flat / nz;
                let a = flat % nz;
                hh_entry(model, &kernels, i, i + ell, grid.nodes[a], grid.nodes[b])
            })
            .collect::<Result<_>>()?;
        k_mats.push(mat);
    }
    let kernel_column = |k: usize, m: usize, mat_buf: &mut Vec<f64>, b: usize| -> Result<()> {
        debug_assert!(k < m);
        if shared {
            let mat = &k_mats[m - k - 1];
            mat_buf.clear();
            mat_buf.extend_from_slice(&mat[b * nz..(b + 1) * nz]);
        } else {
            mat_buf.clear();
            for a in 0..nz {
                mat_buf.push(hh_entry(model, &kernels, i + k, i + m, grid.nodes[a], grid.nodes[b])?);
            }
        }
        Ok(())
    };

    // Kernel values from the start point and into each target.
    let h_start: Vec<Vec<f64>> = (1..nt)
        .map(|sm| {
            (0..nz)
                .into_par_iter()
                .map(|b| hh_entry(model, &kernels, i, i + sm, xs, grid.nodes[b]))
                .collect::<Result<_>>()
        })
        .collect::<Result<_>>()?;
    let h_into: Vec<Vec<Vec<f64>>> = targets
        .par_iter()
        .map(|&y| {
            (1..nt)
                .map(|k| {
                    (0..nz)
                        .map(|a| hh_entry(model, &kernels, i + k, j, grid.nodes[a], y))
                        .collect::<Result<Vec<f64>>>()
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;
    let h_direct: Vec<f64> = targets
        .iter()
        .map(|&y| hh_entry(model, &kernels, i, j, xs, y))
        .collect::<Result<_>>()?;

    let trapz_dot = |f: &[f64], g: &[f64]| -> f64 {
        let mut acc = 0.0;
        for a in 0..nz {
            acc += grid.weight(a) * f[a] * g[a];
        }
        acc
    };

    // Recursion over orders; `phi_prev` holds Φ_{r−1} at spans 1..nt−1.
    let mut terms: Vec<Vec<f64>> = vec![Vec::with_capacity(nt + 1); targets.len()];
    for (s, &y) in targets.iter().enumerate() {
        terms[s].push(frozen_span_value(model, &kernels, i, j, xs, y)?);
    }
    let mut phi_prev = phi0;
    for r in 1..=nt {
        for (s, term_list) in terms.iter_mut().enumerate() {
            let mut val = if r == 1 { h * h_direct[s] } else { 0.0 };
            for k in 1..nt {
                val += h * trapz_dot(&phi_prev[k - 1], &h_into[s][k - 1]);
            }
            term_list.push(val);
        }
        if r < nt {
            let phi_next: Vec<Vec<f64>> = (1..nt)
                .map(|sm| {
                    (0..nz)
                        .into_par_iter()
                        .map(|b| {
                            let mut col = Vec::new();
                            let mut acc = if r == 1 { h * h_start[sm - 1][b] } else { 0.0 };
                            for k in 1..sm {
                                kernel_column(k, sm, &mut col, b)?;
                                acc += h * trapz_dot(&phi_prev[k - 1], &col);
                            }
                            Ok(acc)
                        })
                        .collect::<Result<_>>()
                })
                .collect::<Result<_>>()?;
            phi_prev = phi_next;
        }
    }

    Ok(terms
        .into_iter()
        .map(|term_list| ChainParametrixResult {
            value: term_list.iter().sum(),
            terms: term_list,
            term0_mass: full_mass,
            mass_refinement_gap: mass_gap,
        })
        .collect())
}
