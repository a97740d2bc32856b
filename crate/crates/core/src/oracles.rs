//! Independent ground-truth engines and comparison machinery: Monte Carlo
//! density estimation, the Chapman–Kolmogorov grid recursion, weighted
//! sup-norm comparisons, log–log rate fitting, and the stability sweeps
//! that turn coefficient perturbations into measured gap-vs-distance
//! ratios.
//!
//! Every estimator here is built independently of the parametrix engines
//! it audits: Monte Carlo only touches the coefficient fields and the
//! innovation law, and the grid recursion only composes one-step
//! transition densities.  Agreement between the two families is therefore
//! evidence, not circularity.

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, StandardNormal, StudentT};
use rayon::prelude::*;

use crate::chain::{
    chain_density_parametrix_grid, one_step_density, ChainGrid, ChainModel, InnovationLaw,
};
use crate::coefficients::{
    delta_metrics, CoefficientSet, DeltaMetrics, MetricDomain, PerturbationFamily, QIndex,
};
use crate::gaussian::{ConcentrationProfile, GaussianRef};
use crate::sde::{density_series_grid, ConvolutionScheme};
use crate::{Error, Result};

/// Which engine produced a density grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Provenance {
    ParametrixSde,
    ParametrixChain,
    MonteCarlo,
    GridCk,
}

impl std::fmt::Display for Provenance {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let tag = match self {
            Provenance::ParametrixSde => "parametrix-sde",
            Provenance::ParametrixChain => "parametrix-chain",
            Provenance::MonteCarlo => "mc",
            Provenance::GridCk => "grid-ck",
        };
        f.write_str(tag)
    }
}

/// Density values tabulated over tensor axes of elapsed times, start
/// points, and end points (one-dimensional state space).
///
/// Values are stored row-major in `(elapsed, start, end)` order.  Small
/// negative values down to `−10⁻¹²` are tolerated as quadrature noise;
/// anything below that is rejected as a sign defect.
#[derive(Clone, Debug)]
pub struct DensityGrid {
    pub elapsed: Vec<f64>,
    pub starts: Vec<f64>,
    pub ends: Vec<f64>,
    pub values: Vec<f64>,
    pub provenance: Provenance,
    /// Human-readable description of the producing scheme.
    pub scheme: String,
    /// Monte Carlo seed, when applicable.
    pub seed: Option<u64>,
    /// Batch-means standard errors (Monte Carlo only), same layout.
    pub standard_errors: Option<Vec<f64>>,
    /// Set when a kernel bandwidth fell below the end-grid resolution.
    pub bandwidth_warning: bool,
}

fn strictly_increasing(axis: &[f64]) -> bool {
    axis.windows(2).all(|w| w[0] < w[1])
}

impl DensityGrid {
    pub fn new(
        elapsed: Vec<f64>,
        starts: Vec<f64>,
        ends: Vec<f64>,
        values: Vec<f64>,
        provenance: Provenance,
        scheme: String,
    ) -> Result<Self> {
        if elapsed.is_empty() || starts.is_empty() || ends.is_empty() {
            return Err(Error::InvalidArgument("density grid axes must be nonempty".into()));
        }
        if !strictly_increasing(&elapsed) || !strictly_increasing(&starts) || !strictly_increasing(&ends) {
            return Err(Error::InvalidArgument(
                "density grid axes must be strictly increasing".into(),
            ));
        }
        if elapsed.iter().any(|v| !(*v > 0.0)) {
            return Err(Error::InvalidArgument("elapsed times must be positive".into()));
        }
        let expected = elapsed.len() * starts.len() * ends.len();
        if values.len() != expected {
            return Err(Error::InvalidArgument(format!(
                "density grid holds {} values but the axes span {expected}",
                values.len()
            )));
        }
        for (idx, v) in values.iter().enumerate() {
            if !v.is_finite() || *v < -1e-12 {
                return Err(Error::InvalidArgument(format!(
                    "density value {v:e} at flat index {idx} violates nonnegativity"
                )));
            }
        }
        Ok(DensityGrid {
            elapsed,
            starts,
            ends,
            values,
            provenance,
            scheme,
            seed: None,
            standard_errors: None,
            bandwidth_warning: false,
        })
    }

    /// Grid over a single elapsed time and start point.
    pub fn single(
        elapsed: f64,
        start: f64,
        ends: Vec<f64>,
        values: Vec<f64>,
        provenance: Provenance,
        scheme: String,
    ) -> Result<Self> {
        DensityGrid::new(vec![elapsed], vec![start], ends, values, provenance, scheme)
    }

    pub fn value_at(&self, ie: usize, is: usize, iy: usize) -> f64 {
        self.values[(ie * self.starts.len() + is) * self.ends.len() + iy]
    }

    /// Axes equality with another grid, exact to the bit.
    pub fn shares_axes(&self, other: &DensityGrid) -> bool {
        self.elapsed == other.elapsed && self.starts == other.starts && self.ends == other.ends
    }

    /// End index and value of the largest entry (single elapsed/start
    /// grids; the first slice otherwise).
    pub fn mode(&self) -> (usize, f64) {
        let slice = &self.values[..self.ends.len()];
        let (idx, v) = slice
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).expect("finite densities"))
            .expect("nonempty grid");
        (idx, *v)
    }
}

/// Number of seed-derived substream batches used for batch-means errors.
const MC_BATCHES: usize = 20;
/// Euler steps for the diffusion sampler.
const MC_DIFFUSION_STEPS: usize = 200;

fn sample_innovation<R: rand::Rng>(law: &InnovationLaw, rng: &mut R) -> f64 {
    match law {
        InnovationLaw::Gaussian => StandardNormal.sample(rng),
        InnovationLaw::PolynomialTail(poly) => {
            // The law is a Student-t with ν = M−1 degrees of freedom scaled
            // to unit variance: z = √(M−3)/√(M−1) · t_ν.
            let nu = poly.m - 1.0;
            let t: f64 = StudentT::new(nu).expect("valid degrees of freedom").sample(rng);
            poly.scale / nu.sqrt() * t
        }
    }
}

fn silverman_bandwidth(samples_sorted: &[f64], n: usize) -> f64 {
    let nf = n as f64;
    let mean = samples_sorted.iter().sum::<f64>() / nf;
    let var = samples_sorted.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (nf - 1.0);
    let quantile = |p: f64| -> f64 {
        let pos = p * (n - 1) as f64;
        let lo = pos.floor() as usize;
        let frac = pos - lo as f64;
        if lo + 1 < n {
            samples_sorted[lo] * (1.0 - frac) + samples_sorted[lo + 1] * frac
        } else {
            samples_sorted[lo]
        }
    };
    let iqr = quantile(0.75) - quantile(0.25);
    let spread = var.sqrt().min(iqr / 1.349).max(f64::MIN_POSITIVE);
    0.8 * 0.9 * spread * nf.powf(-0.2)
}

/// Shared Monte Carlo KDE layer: draw endpoint samples per seeded batch,
/// pick the bandwidth, and assemble the estimate with batch-means errors.
fn mc_kernel_estimate<S>(
    simulate: S,
    ends: &[f64],
    n_paths: usize,
    bandwidth: Option<f64>,
    seed: u64,
    elapsed: f64,
    start: f64,
    scheme: String,
) -> Result<DensityGrid>
where
    S: Fn(&mut ChaCha12Rng) -> f64 + Sync,
{
    if n_paths < 10_000 {
        return Err(Error::InvalidArgument(format!(
            "Monte Carlo density needs at least 10⁴ paths, got {n_paths}"
        )));
    }
    if let Some(bw) = bandwidth {
        if !(bw > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "kernel bandwidth must be positive, got {bw}"
            )));
        }
    }
    if !strictly_increasing(ends) || ends.is_empty() {
        return Err(Error::InvalidArgument(
            "end grid must be nonempty and strictly increasing".into(),
        ));
    }
    let per_batch = n_paths.div_ceil(MC_BATCHES);
    let total = per_batch * MC_BATCHES;

    let batches: Vec<Vec<f64>> = (0..MC_BATCHES)
        .into_par_iter()
        .map(|b| {
            let mut rng = ChaCha12Rng::seed_from_u64(seed);
            rng.set_stream(b as u64);
            (0..per_batch).map(|_| simulate(&mut rng)).collect()
        })
        .collect();
    for batch in &batches {
        if let Some(bad) = batch.iter().find(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                context: "Monte Carlo path endpoint".into(),
                point: vec![*bad],
            });
        }
    }

    let bw = match bandwidth {
        Some(b) => b,
        None => {
            let mut all: Vec<f64> = batches.iter().flatten().copied().collect();
            all.sort_by(|a, b| a.partial_cmp(b).expect("finite endpoints"));
            silverman_bandwidth(&all, total)
        }
    };
    let min_spacing = ends
        .windows(2)
        .map(|w| w[1] - w[0])
        .fold(f64::INFINITY, f64::min);
    let warning = bw < min_spacing;

    let norm = 1.0 / ((2.0 * std::f64::consts::PI).sqrt() * bw * per_batch as f64);
    let per_batch_estimates: Vec<Vec<f64>> = batches
        .par_iter()
        .map(|batch| {
            ends.iter()
                .map(|&y| {
                    let mut acc = 0.0;
                    for &xend in batch {
                        let u = (xend - y) / bw;
                        acc += (-0.5 * u * u).exp();
                    }
                    acc * norm
                })
                .collect()
        })
        .collect();

    let nb = MC_BATCHES as f64;
    let mut values = Vec::with_capacity(ends.len());
    let mut errors = Vec::with_capacity(ends.len());
    for iy in 0..ends.len() {
        let mean = per_batch_estimates.iter().map(|e| e[iy]).sum::<f64>() / nb;
        let var = per_batch_estimates
            .iter()
            .map(|e| (e[iy] - mean) * (e[iy] - mean))
            .sum::<f64>()
            / (nb - 1.0);
        values.push(mean);
        errors.push((var / nb).sqrt());
    }

    let mut grid = DensityGrid::single(
        elapsed,
        start,
        ends.to_vec(),
        values,
        Provenance::MonteCarlo,
        format!("{scheme}, {total} paths in {MC_BATCHES} batches, bandwidth {bw:.6e}"),
    )?;
    grid.seed = Some(seed);
    grid.standard_errors = Some(errors);
    grid.bandwidth_warning = warning;
    Ok(grid)
}

/// Monte Carlo density of the diffusion at time `t` started from `(s, x)`:
/// Euler paths with step `(t−s)/200`, Gaussian-kernel estimate on the end
/// grid, batch-means standard errors over 20 seed-derived substreams.
///
/// `bandwidth = None` selects Silverman's rule scaled by 0.8.
pub fn mc_density_diffusion(
    set: &CoefficientSet,
    s: f64,
    t: f64,
    x: f64,
    ends: &[f64],
    n_paths: usize,
    bandwidth: Option<f64>,
    seed: u64,
) -> Result<DensityGrid> {
    if set.dim != 1 {
        return Err(Error::Unsupported(
            "Monte Carlo density estimation covers dimension 1".into(),
        ));
    }
    if !(t > s) {
        return Err(Error::InvalidArgument(format!(
            "time window needs s < t, got s={s}, t={t}"
        )));
    }
    let dt = (t - s) / MC_DIFFUSION_STEPS as f64;
    let root_dt = dt.sqrt();
    let simulate = |rng: &mut ChaCha12Rng| -> f64 {
        let mut pos = x;
        for k in 0..MC_DIFFUSION_STEPS {
            let tk = s + k as f64 * dt;
            let b = set.drift.eval(tk, &[pos])[0];
            let sg = set.diffusion.eval(tk, &[pos])[(0, 0)];
            let xi: f64 = StandardNormal.sample(rng);
            pos += b * dt + sg * root_dt * xi;
        }
        pos
    };
    mc_kernel_estimate(
        simulate,
        ends,
        n_paths,
        bandwidth,
        seed,
        t - s,
        x,
        format!("Euler step {dt:.3e}"),
    )
}

/// Monte Carlo density of the chain at `t_j` started from `(t_i, x)`,
/// stepping with the model's own `h` and innovation law.
pub fn mc_density_chain(
    model: &ChainModel,
    i: usize,
    j: usize,
    x: f64,
    ends: &[f64],
    n_paths: usize,
    bandwidth: Option<f64>,
    seed: u64,
) -> Result<DensityGrid> {
    if model.set.dim != 1 {
        return Err(Error::Unsupported(
            "Monte Carlo density estimation covers dimension 1".into(),
        ));
    }
    if !(i < j && j <= model.n_steps) {
        return Err(Error::InvalidArgument(format!(
            "chain window needs i < j ≤ N, got i={i}, j={j}, N={}",
            model.n_steps
        )));
    }
    let root_h = model.h.sqrt();
    let simulate = |rng: &mut ChaCha12Rng| -> f64 {
        let mut pos = x;
        for k in i..j {
            let tk = model.time(k);
            let b = model.set.drift.eval(tk, &[pos])[0];
            let sg = model.set.diffusion.eval(tk, &[pos])[(0, 0)];
            let xi = sample_innovation(&model.law, rng);
            pos += b * model.h + sg * root_h * xi;
        }
        pos
    };
    mc_kernel_estimate(
        simulate,
        ends,
        n_paths,
        bandwidth,
        seed,
        (j - i) as f64 * model.h,
        x,
        format!("chain step {:.3e}", model.h),
    )
}

/// Exact chain density by the Chapman–Kolmogorov recursion
/// `p_{k+1}(y) = ∫ p_k(z) π^h(t_k, z, y) dz` on a trapezoid grid.
///
/// The first step is the one-step density itself; the grid must cover
/// `x ± 8√(t_j−t_i)` with at least 512 nodes, and a mass drift above
/// `10⁻³` in any step demands refinement instead of returning silently
/// degraded values.
pub fn grid_chapman_kolmogorov(
    model: &ChainModel,
    i: usize,
    j: usize,
    x: f64,
    grid: &ChainGrid,
) -> Result<DensityGrid> {
    if model.set.dim != 1 {
        return Err(Error::Unsupported(
            "the grid recursion covers dimension 1".into(),
        ));
    }
    if !(i < j && j <= model.n_steps) {
        return Err(Error::InvalidArgument(format!(
            "recursion window needs i < j ≤ N, got i={i}, j={j}, N={}",
            model.n_steps
        )));
    }
    if grid.nodes.len() < 512 {
        return Err(Error::InvalidArgument(format!(
            "the grid recursion needs ≥ 512 nodes, got {}",
            grid.nodes.len()
        )));
    }
    let span = (j - i) as f64 * model.h;
    let reach = 8.0 * span.sqrt();
    let (lo, hi) = (grid.nodes[0], *grid.nodes.last().expect("nonempty grid"));
    if x - reach < lo || x + reach > hi {
        return Err(Error::InvalidArgument(format!(
            "grid [{lo}, {hi}] must cover the start point ± 8√(elapsed) = [{}, {}]",
            x - reach,
            x + reach
        )));
    }

    let nz = grid.nodes.len();
    let weight = |idx: usize| if idx == 0 || idx == nz - 1 { 0.5 * grid.step } else { grid.step };
    let mut values: Vec<f64> = grid
        .nodes
        .par_iter()
        .map(|&y| one_step_density(model, i, &[x], &[y]))
        .collect::<Result<_>>()?;
    let mut mass: f64 = (0..nz).map(|a| weight(a) * values[a]).sum();
    if (mass - 1.0).abs() > 1e-3 {
        return Err(Error::RefinementNeeded(format!(
            "grid loses mass already at the first step: {mass}"
        )));
    }
    for k in (i + 1)..j {
        let prev = values;
        values = (0..nz)
            .into_par_iter()
            .map(|b| {
                let y = [grid.nodes[b]];
                let mut acc = 0.0;
                for a in 0..nz {
                    acc += weight(a) * prev[a] * one_step_density(model, k, &[grid.nodes[a]], &y)?;
                }
                Ok(acc)
            })
            .collect::<Result<_>>()?;
        let next_mass: f64 = (0..nz).map(|a| weight(a) * values[a]).sum();
        if (next_mass - mass).abs() > 1e-3 {
            return Err(Error::RefinementNeeded(format!(
                "mass drifted from {mass} to {next_mass} in step {k}"
            )));
        }
        mass = next_mass;
    }
    DensityGrid::single(
        span,
        x,
        grid.nodes.clone(),
        values,
        Provenance::GridCk,
        format!("trapezoid recursion, {nz} nodes, step {:.3e}", grid.step),
    )
}

/// Weight for sup-norm comparisons: the Gaussian reference envelope or a
/// time-scaled polynomial concentration profile.
pub enum ComparisonWeight {
    GaussianEnvelope(GaussianRef),
    Concentration { profile: ConcentrationProfile, c: f64 },
}

impl ComparisonWeight {
    fn eval(&self, elapsed: f64, disp: f64) -> Result<f64> {
        match self {
            ComparisonWeight::GaussianEnvelope(reference) => reference.eval(elapsed, &[disp]),
            ComparisonWeight::Concentration { profile, c } => profile.scaled(*c, elapsed, &[disp]),
        }
    }
}

/// Result of a weighted sup comparison between two density grids.
#[derive(Clone, Debug)]
pub struct DensityComparison {
    /// `sup |a−b| / weight` over the probe window.
    pub sup_weighted_gap: f64,
    /// `(elapsed, start, end)` where the sup is attained.
    pub at: (f64, f64, f64),
    /// Grid points inside the probe window.
    pub points_used: usize,
}

/// Weighted sup gap between two density grids sharing axes, restricted to
/// the window `|end − start| ≤ 6√elapsed` where both densities and the
/// weight carry numerically meaningful mass.
pub fn compare_densities(
    a: &DensityGrid,
    b: &DensityGrid,
    weight: &ComparisonWeight,
) -> Result<DensityComparison> {
    if !a.shares_axes(b) {
        return Err(Error::AxisMismatch(
            "density comparison needs identical elapsed/start/end axes".into(),
        ));
    }
    let mut sup = 0.0f64;
    let mut at = (a.elapsed[0], a.starts[0], a.ends[0]);
    let mut used = 0usize;
    for (ie, &elapsed) in a.elapsed.iter().enumerate() {
        for (is, &start) in a.starts.iter().enumerate() {
            for (iy, &end) in a.ends.iter().enumerate() {
                let disp = end - start;
                if disp.abs() > 6.0 * elapsed.sqrt() {
                    continue;
                }
                used += 1;
                let w = weight.eval(elapsed, disp)?;
                let gap = (a.value_at(ie, is, iy) - b.value_at(ie, is, iy)).abs() / w;
                if gap > sup {
                    sup = gap;
                    at = (elapsed, start, end);
                }
            }
        }
    }
    if used == 0 {
        return Err(Error::InvalidArgument(
            "no grid point falls inside the comparison window".into(),
        ));
    }
    Ok(DensityComparison {
        sup_weighted_gap: sup,
        at,
        points_used: used,
    })
}

/// Least-squares fit of `log gap` against `log ε`.
#[derive(Clone, Debug)]
pub struct RateFit {
    pub slope: f64,
    pub intercept: f64,
    /// Root-mean-square residual of the log–log fit.
    pub residual: f64,
    /// Nonpositive gaps dropped before fitting.
    pub dropped: usize,
}

/// Fit a convergence rate from an ε-sweep.  Nonpositive gaps are dropped
/// (they carry no logarithm); fewer than three surviving points, or a
/// surviving ε-range narrower than one octave, is a failure rather than an
/// extrapolation.
pub fn rate_fit(epsilons: &[f64], gaps: &[f64]) -> Result<RateFit> {
    if epsilons.len() != gaps.len() {
        return Err(Error::InvalidArgument(format!(
            "rate fit needs matching lists, got {} epsilons and {} gaps",
            epsilons.len(),
            gaps.len()
        )));
    }
    if epsilons.iter().any(|e| !(*e > 0.0)) {
        return Err(Error::InvalidArgument("epsilons must be positive".into()));
    }
    let mut pts: Vec<(f64, f64)> = Vec::with_capacity(epsilons.len());
    let mut dropped = 0usize;
    for (&e, &g) in epsilons.iter().zip(gaps) {
        if g > 0.0 && g.is_finite() {
            pts.push((e.ln(), g.ln()));
        } else {
            dropped += 1;
        }
    }
    if pts.len() < 3 {
        return Err(Error::InsufficientData(format!(
            "rate fit needs ≥ 3 positive gaps, kept {} after dropping {dropped}",
            pts.len()
        )));
    }
    let (emin, emax) = pts
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| (lo.min(p.0), hi.max(p.0)));
    if emax - emin < std::f64::consts::LN_2 {
        return Err(Error::InvalidArgument(
            "rate fit needs epsilons spanning at least one octave".into(),
        ));
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx = pts.iter().map(|p| (p.0 - mx) * (p.0 - mx)).sum::<f64>();
    let sxy = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum::<f64>();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ss_res = pts
        .iter()
        .map(|p| {
            let r = p.1 - (intercept + slope * p.0);
            r * r
        })
        .sum::<f64>();
    Ok(RateFit {
        slope,
        intercept,
        residual: (ss_res / n).sqrt(),
        dropped,
    })
}

/// Payoffs evaluated on the exponential of the terminal state.
#[derive(Clone, Copy, Debug)]
pub enum Payoff {
    /// `1` when `exp(y) ≥ strike`.
    IndicatorCall { strike: f64 },
    /// `(1 − slope·|exp(y) − center|)₊`: bounded by one, Lipschitz in the
    /// price variable.
    BoundedLipschitz { center: f64, slope: f64 },
}

impl Payoff {
    pub fn eval(&self, y: f64) -> f64 {
        let price = y.exp();
        match self {
            Payoff::IndicatorCall { strike } => {
                if price >= *strike {
                    1.0
                } else {
                    0.0
                }
            }
            Payoff::BoundedLipschitz { center, slope } => {
                (1.0 - slope * (price - center).abs()).max(0.0)
            }
        }
    }
}

/// Quadrature and metric choices shared by the sensitivity and sweep
/// drivers.
#[derive(Clone)]
pub struct SweepSettings {
    /// Parametrix truncation order.
    pub order: usize,
    /// Diffusion convolution scheme (ignored by chain sweeps).
    pub scheme: ConvolutionScheme,
    /// End-point probe grid, strictly increasing.
    pub ends: Vec<f64>,
    /// Domain/resolution for coefficient distance measurements.
    pub metric: MetricDomain,
    /// Times at which coefficient distances are sampled.
    pub metric_times: Vec<f64>,
}

/// Price impact of one coefficient perturbation against its envelope
/// bound `Δ · ∫ payoff(exp y) · p_c(elapsed, y−x) dy`.
#[derive(Clone, Debug)]
pub struct PayoffSensitivity {
    pub price_base: f64,
    pub price_perturbed: f64,
    pub difference: f64,
    pub delta: DeltaMetrics,
    /// `∫ payoff(exp y) · p_c(elapsed, y−x) dy` over the probe grid.
    pub envelope_integral: f64,
    /// `delta_total · envelope_integral`.
    pub bound: f64,
    /// `|difference| / bound`; zero when both sides vanish.
    pub ratio: f64,
}

fn trapezoid_nonuniform(xs: &[f64], f: impl Fn(usize) -> f64) -> f64 {
    let mut acc = 0.0;
    for w in 0..xs.len() - 1 {
        acc += 0.5 * (f(w) + f(w + 1)) * (xs[w + 1] - xs[w]);
    }
    acc
}

/// Measure how a coefficient perturbation moves an option price, and
/// compare against the coefficient-distance envelope bound.
pub fn price_sensitivity(
    family: &PerturbationFamily,
    eps: f64,
    payoff: &Payoff,
    q: QIndex,
    s: f64,
    t: f64,
    x: f64,
    settings: &SweepSettings,
) -> Result<PayoffSensitivity> {
    if family.base.dim != 1 {
        return Err(Error::Unsupported("price sensitivity covers dimension 1".into()));
    }
    if !strictly_increasing(&settings.ends) || settings.ends.len() < 5 {
        return Err(Error::InvalidArgument(
            "price quadrature needs ≥ 5 strictly increasing end points".into(),
        ));
    }
    let perturbed = family.perturbed(eps)?;
    let targets: Vec<Vec<f64>> = settings.ends.iter().map(|&y| vec![y]).collect();
    let base_vals = density_series_grid(&family.base, s, t, &[x], &targets, settings.order, &settings.scheme)?;
    let pert_vals = density_series_grid(&perturbed, s, t, &[x], &targets, settings.order, &settings.scheme)?;

    let payoff_at: Vec<f64> = settings.ends.iter().map(|&y| payoff.eval(y)).collect();
    if payoff_at.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            context: "payoff evaluation".into(),
            point: vec![x],
        });
    }
    let price_base = trapezoid_nonuniform(&settings.ends, |i| payoff_at[i] * base_vals[i].value);
    let price_perturbed = trapezoid_nonuniform(&settings.ends, |i| payoff_at[i] * pert_vals[i].value);
    let difference = price_perturbed - price_base;

    let delta = delta_metrics(&family.base, &perturbed, q, &settings.metric_times, &settings.metric)?;
    let reference = GaussianRef::new(0.5 / family.base.lambda, 1)?;
    let envelope: Vec<f64> = settings
        .ends
        .iter()
        .map(|&y| reference.eval(t - s, &[y - x]))
        .collect::<Result<_>>()?;
    let envelope_integral = trapezoid_nonuniform(&settings.ends, |i| payoff_at[i] * envelope[i]);
    let bound = delta.delta_total * envelope_integral;
    let ratio = if bound > 0.0 {
        difference.abs() / bound
    } else if difference == 0.0 {
        0.0
    } else {
        return Err(Error::InvalidArgument(
            "nonzero price difference with a vanishing envelope bound".into(),
        ));
    };
    Ok(PayoffSensitivity {
        price_base,
        price_perturbed,
        difference,
        delta,
        envelope_integral,
        bound,
        ratio,
    })
}

/// One ε-entry of a stability sweep.
#[derive(Clone, Debug)]
pub struct StabilityEntry {
    pub epsilon: f64,
    pub delta: DeltaMetrics,
    pub sup_weighted_gap: f64,
    pub gap_at: (f64, f64, f64),
    /// `sup_weighted_gap / delta_total`.
    pub ratio: f64,
}

/// Gap-versus-distance audit across an ε-sweep: per-ε coefficient
/// distances, weighted density gaps, their ratios, and the fitted
/// log–log rate.
#[derive(Clone, Debug)]
pub struct StabilityReport {
    pub entries: Vec<StabilityEntry>,
    pub q: QIndex,
    /// Rate exponent `(1 − d/q)/2` attached to a finite `q`, `1/2` at
    /// `q = ∞`.
    pub alpha_q: f64,
    pub slope: f64,
    pub intercept: f64,
    pub residual: f64,
    /// `max ratio / min ratio` across the sweep.
    pub ratio_spread: f64,
}

fn assemble_report(entries: Vec<StabilityEntry>, q: QIndex) -> Result<StabilityReport> {
    let epsilons: Vec<f64> = entries.iter().map(|e| e.epsilon).collect();
    let gaps: Vec<f64> = entries.iter().map(|e| e.sup_weighted_gap).collect();
    let fit = rate_fit(&epsilons, &gaps)?;
    let (mut rmin, mut rmax) = (f64::INFINITY, 0.0f64);
    for e in &entries {
        if !e.ratio.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "non-finite gap/distance ratio at ε = {}",
                e.epsilon
            )));
        }
        rmin = rmin.min(e.ratio);
        rmax = rmax.max(e.ratio);
    }
    let alpha_q = entries.first().map(|e| e.delta.alpha_q).unwrap_or(0.5);
    Ok(StabilityReport {
        q,
        alpha_q,
        slope: fit.slope,
        intercept: fit.intercept,
        residual: fit.residual,
        ratio_spread: if rmin > 0.0 { rmax / rmin } else { f64::INFINITY },
        entries,
    })
}

/// Sweep a diffusion perturbation family over ε: parametrix densities for
/// the base and each perturbed set, weighted sup gaps against the Gaussian
/// reference envelope, coefficient distances, and the fitted rate.
pub fn diffusion_stability_sweep(
    family: &PerturbationFamily,
    epsilons: &[f64],
    q: QIndex,
    s: f64,
    t: f64,
    x: f64,
    settings: &SweepSettings,
) -> Result<StabilityReport> {
    if family.base.dim != 1 {
        return Err(Error::Unsupported("stability sweeps cover dimension 1".into()));
    }
    if epsilons.iter().any(|e| !(*e > 0.0)) {
        return Err(Error::InvalidArgument("sweep epsilons must be positive".into()));
    }
    let targets: Vec<Vec<f64>> = settings.ends.iter().map(|&y| vec![y]).collect();
    let to_grid = |set: &CoefficientSet| -> Result<DensityGrid> {
        let vals = density_series_grid(set, s, t, &[x], &targets, settings.order, &settings.scheme)?;
        DensityGrid::single(
            t - s,
            x,
            settings.ends.clone(),
            vals.into_iter().map(|v| v.value).collect(),
            Provenance::ParametrixSde,
            format!("series order {}", settings.order),
        )
    };
    let base_grid = to_grid(&family.base)?;
    let weight = ComparisonWeight::GaussianEnvelope(GaussianRef::new(0.5 / family.base.lambda, 1)?);

    let mut entries = Vec::with_capacity(epsilons.len());
    for &eps in epsilons {
        let perturbed = family.perturbed(eps)?;
        let pert_grid = to_grid(&perturbed)?;
        let cmp = compare_densities(&base_grid, &pert_grid, &weight)?;
        let delta = delta_metrics(&family.base, &perturbed, q, &settings.metric_times, &settings.metric)?;
        if !(delta.delta_total > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "perturbation at ε = {eps} has zero coefficient distance"
            )));
        }
        entries.push(StabilityEntry {
            epsilon: eps,
            ratio: cmp.sup_weighted_gap / delta.delta_total,
            sup_weighted_gap: cmp.sup_weighted_gap,
            gap_at: cmp.at,
            delta,
        });
    }
    assemble_report(entries, q)
}

/// Chain analogue of [`diffusion_stability_sweep`]: the parametrix sum of
/// the perturbed chain against the base chain on a shared grid.
pub fn chain_stability_sweep(
    family: &PerturbationFamily,
    epsilons: &[f64],
    q: QIndex,
    law: InnovationLaw,
    horizon: f64,
    n_steps: usize,
    x: f64,
    settings: &SweepSettings,
) -> Result<StabilityReport> {
    if family.base.dim != 1 {
        return Err(Error::Unsupported("stability sweeps cover dimension 1".into()));
    }
    if epsilons.iter().any(|e| !(*e > 0.0)) {
        return Err(Error::InvalidArgument("sweep epsilons must be positive".into()));
    }
    let reach = settings
        .ends
        .iter()
        .map(|e| (e - x).abs())
        .fold(0.0f64, f64::max);
    let base_model = ChainModel::new(family.base.clone(), horizon, n_steps, law.clone())?;
    let half = reach + 8.0 * (horizon * family.base.lambda).sqrt();
    let target_step = 0.5 * (base_model.h / family.base.lambda).sqrt();
    let mut count = (2.0 * half / target_step).ceil() as usize + 1;
    count = count.max(513);
    if count % 2 == 0 {
        count += 1;
    }
    let grid = ChainGrid::new(x - half, x + half, count)?;

    let to_grid = |set: &CoefficientSet| -> Result<DensityGrid> {
        let model = ChainModel::new(set.clone(), horizon, n_steps, law.clone())?;
        let results = chain_density_parametrix_grid(&model, 0, n_steps, &[x], &settings.ends, &grid)?;
        DensityGrid::single(
            horizon,
            x,
            settings.ends.clone(),
            results.into_iter().map(|r| r.value).collect(),
            Provenance::ParametrixChain,
            format!("chain parametrix, N = {n_steps}"),
        )
    };
    let base_grid = to_grid(&family.base)?;
    let weight = ComparisonWeight::GaussianEnvelope(GaussianRef::new(0.5 / family.base.lambda, 1)?);

    let mut entries = Vec::with_capacity(epsilons.len());
    for &eps in epsilons {
        let perturbed = family.perturbed(eps)?;
        let pert_grid = to_grid(&perturbed)?;
        let cmp = compare_densities(&base_grid, &pert_grid, &weight)?;
        let delta = delta_metrics(&family.base, &perturbed, q, &settings.metric_times, &settings.metric)?;
        if !(delta.delta_total > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "perturbation at ε = {eps} has zero coefficient distance"
            )));
        }
        entries.push(StabilityEntry {
            epsilon: eps,
            ratio: cmp.sup_weighted_gap / delta.delta_total,
            sup_weighted_gap: cmp.sup_weighted_gap,
            gap_at: cmp.at,
            delta,
        });
    }
    assemble_report(entries, q)
}
