//! Experiment drivers: each one reads its parameters from the parsed
//! config, runs the corresponding engine, writes CSV reports, and records
//! fitted constants and audit verdicts in the run manifest.
//!
//! Every CSV value is printed with 17 significant digits, so re-running a
//! config reproduces the output files byte for byte regardless of thread
//! count.  Wall-clock entries live only in the manifest, which is exempt
//! from that guarantee.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use parametrix::chain::{ChainGrid, ChainModel};
use parametrix::coefficients::{
    delta_metrics, holder_seminorm, CoefficientSet, MetricDomain, PairPlan, SampleBox,
};
use parametrix::oracles::{
    compare_densities, diffusion_stability_sweep, grid_chapman_kolmogorov, mc_density_chain,
    mc_density_diffusion, price_sensitivity, rate_fit, ComparisonWeight, DensityGrid, Provenance,
    StabilityReport,
};
use parametrix::sde::{density_series_grid, ConvolutionScheme};

use crate::catalog;
use crate::config::{epsilon_list, probe_ends, ConfigError, RawConfig};

/// Failure modes of a run, ordered by exit code: usage and configuration
/// problems exit with 2, engine failures with 3.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Engine(String),
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Usage(e.to_string())
    }
}

impl From<parametrix::Error> for CliError {
    fn from(e: parametrix::Error) -> Self {
        CliError::Engine(format!("engine error: {e}"))
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Engine(format!("i/o error: {e}"))
    }
}

/// 17-significant-digit decimal rendering used for every CSV number.
fn fmt(v: f64) -> String {
    format!("{v:.16e}")
}

/// Ordered key-value manifest with audit verdicts and stage timings.
pub struct Manifest {
    entries: Vec<(String, String)>,
    audits: Vec<(String, bool)>,
    stages: Vec<(String, u128)>,
}

impl Manifest {
    fn new(kind: &str, config_sha: &str, seed: u64, threads: usize) -> Self {
        let mut entries = Vec::new();
        entries.push(("experiment".to_string(), kind.to_string()));
        entries.push(("config_sha256".to_string(), config_sha.to_string()));
        entries.push(("cli_version".to_string(), env!("CARGO_PKG_VERSION").to_string()));
        entries.push(("engine_version".to_string(), parametrix::VERSION.to_string()));
        entries.push(("seed".to_string(), seed.to_string()));
        let threads = if threads == 0 {
            "auto".to_string()
        } else {
            threads.to_string()
        };
        entries.push(("threads".to_string(), threads));
        Manifest {
            entries,
            audits: Vec::new(),
            stages: Vec::new(),
        }
    }

    fn record(&mut self, key: &str, value: String) {
        self.entries.push((key.to_string(), value));
    }

    fn record_f64(&mut self, key: &str, value: f64) {
        self.record(key, fmt(value));
    }

    fn audit(&mut self, name: &str, passed: bool) {
        self.audits.push((name.to_string(), passed));
    }

    fn stage(&mut self, name: &str, since: Instant) {
        self.stages.push((name.to_string(), since.elapsed().as_millis()));
    }

    pub fn failed_audits(&self) -> usize {
        self.audits.iter().filter(|(_, ok)| !ok).count()
    }

    fn render(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.entries {
            let _ = writeln!(out, "{k} = {v}");
        }
        for (name, ok) in &self.audits {
            let _ = writeln!(out, "audit_{name} = {}", if *ok { "pass" } else { "fail" });
        }
        let _ = writeln!(out, "audits_failed = {}", self.failed_audits());
        for (name, ms) in &self.stages {
            let _ = writeln!(out, "wall_ms_{name} = {ms}");
        }
        out
    }
}

/// What a finished run hands back to `main`.
pub struct RunOutcome {
    pub files: Vec<PathBuf>,
    pub audits_failed: usize,
}

fn write_file(dir: &Path, name: &str, content: &str) -> Result<PathBuf, CliError> {
    let path = dir.join(name);
    std::fs::write(&path, content)?;
    Ok(path)
}

fn density_csv(grid: &DensityGrid) -> String {
    let mut out = String::from("elapsed,start,end,value,provenance\n");
    for (ie, &elapsed) in grid.elapsed.iter().enumerate() {
        for (is, &start) in grid.starts.iter().enumerate() {
            for (iy, &end) in grid.ends.iter().enumerate() {
                let _ = writeln!(
                    out,
                    "{},{},{},{},{}",
                    fmt(elapsed),
                    fmt(start),
                    fmt(end),
                    fmt(grid.value_at(ie, is, iy)),
                    grid.provenance
                );
            }
        }
    }
    out
}

fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from("epsilon,delta_sup,delta_lq,delta_holder,gap,ratio\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            fmt(r.epsilon),
            fmt(r.delta_sup),
            fmt(r.delta_lq),
            fmt(r.delta_holder),
            fmt(r.gap),
            fmt(r.ratio)
        );
    }
    out
}

struct SweepRow {
    epsilon: f64,
    delta_sup: f64,
    delta_lq: f64,
    delta_holder: f64,
    gap: f64,
    ratio: f64,
}

fn report_rows(report: &StabilityReport) -> Vec<SweepRow> {
    report
        .entries
        .iter()
        .map(|e| SweepRow {
            epsilon: e.epsilon,
            delta_sup: e.delta.delta_b_sup + e.delta.delta_sigma_sup,
            delta_lq: e.delta.delta_b_lq,
            delta_holder: e.delta.delta_sigma_holder,
            gap: e.sup_weighted_gap,
            ratio: e.ratio,
        })
        .collect()
}

/// Everything the experiment drivers share: the parsed config, resolved
/// seed/threads, and the output directory.
pub struct RunContext<'a> {
    pub raw: &'a RawConfig,
    pub out_dir: &'a Path,
    pub seed: u64,
    pub threads: usize,
    pub config_sha: String,
}

impl<'a> RunContext<'a> {
    fn coefficient_set(&self) -> Result<CoefficientSet, CliError> {
        let section = self.raw.section("coefficients");
        let id = section.str_required("id")?;
        Ok(catalog::build_set(id, section)?)
    }

    fn window(&self) -> Result<(f64, f64, f64), CliError> {
        let w = self.raw.section("window");
        let s = w.f64_or("s", 0.0)?;
        let t = w.f64_or("t", 1.0)?;
        let x = w.f64_or("x", 0.0)?;
        if !(t > s) {
            return Err(CliError::Usage(format!(
                "config error: field `window.t`: must exceed window.s (got s={s}, t={t})"
            )));
        }
        Ok((s, t, x))
    }

    fn scheme_for(&self, set: &CoefficientSet) -> Result<(usize, ConvolutionScheme), CliError> {
        let sec = self.raw.section("scheme");
        let order = sec.usize_or("order", 2)?;
        let mut scheme = ConvolutionScheme::with_profile(set.dim, set.gamma, set.lambda);
        scheme.time_nodes = sec.usize_or("time_nodes", scheme.time_nodes)?;
        if let Some(g) = sec.f64_opt("time_grading")? {
            scheme.time_grading = g;
        }
        if let Some(w) = sec.f64_opt("box_halfwidth")? {
            scheme.space_box_halfwidth = w;
        }
        scheme.space_nodes_per_axis = sec.usize_or("space_nodes", scheme.space_nodes_per_axis)?;
        scheme.moving_nodes_per_axis = sec.usize_or("moving_nodes", scheme.moving_nodes_per_axis)?;
        scheme.inner_time_nodes = sec.usize_or("inner_time_nodes", scheme.inner_time_nodes)?;
        Ok((order, scheme))
    }

    fn chain_model(&self, set: &CoefficientSet) -> Result<ChainModel, CliError> {
        let sec = self.raw.section("chain");
        let horizon = sec.f64_or("horizon", 1.0)?;
        let steps = sec.usize_or("steps", 10)?;
        let law_id = sec.str_or("law", "gaussian");
        let law = catalog::build_law(law_id, sec)?;
        if !(horizon > 0.0) || steps == 0 {
            return Err(CliError::Usage(format!(
                "config error: field `chain.horizon`/`chain.steps`: need a positive horizon and at least one step (got {horizon}, {steps})"
            )));
        }
        Ok(ChainModel::new(set.clone(), horizon, steps, law)?)
    }

    fn metric_domain(&self, x: f64, dim: usize) -> Result<MetricDomain, CliError> {
        let sec = self.raw.section("metric");
        let half = sec.f64_or("halfwidth", 6.0)?;
        let nodes = sec.usize_or("nodes", 201)?;
        let compact = sec.str_or("compactly_supported", "false") == "true";
        if !(half > 0.0) {
            return Err(CliError::Usage(format!(
                "config error: field `metric.halfwidth`: must be positive, got {half}"
            )));
        }
        let domain = SampleBox::new(vec![x - half; dim], vec![x + half; dim])
            .map_err(|e| CliError::Engine(e.to_string()))?;
        Ok(MetricDomain {
            domain,
            nodes_per_axis: nodes,
            compactly_supported: compact,
        })
    }

    fn metric_times(&self, s: f64, t: f64) -> Result<Vec<f64>, CliError> {
        let sec = self.raw.section("metric");
        if let Some(ts) = sec.f64_list("times")? {
            return Ok(ts);
        }
        Ok(vec![s, 0.5 * (s + t), t])
    }
}

/// Dispatch on `[experiment] kind` and produce the outcome plus manifest.
pub fn run(ctx: &RunContext<'_>) -> Result<RunOutcome, CliError> {
    let kind = ctx.raw.section("experiment").str_required("kind")?;
    let mut manifest = Manifest::new(kind, &ctx.config_sha, ctx.seed, ctx.threads);
    let total = Instant::now();
    let mut files = match kind {
        "sde-density" => sde_density(ctx, &mut manifest)?,
        "chain-density" => chain_density(ctx, &mut manifest)?,
        "perturb-sweep" => perturb_sweep(ctx, &mut manifest)?,
        "mollify-sweep" => mollify_sweep(ctx, &mut manifest)?,
        "chain-compare" => chain_compare(ctx, &mut manifest)?,
        "price-sensitivity" => price_sensitivity_run(ctx, &mut manifest)?,
        other => {
            return Err(CliError::Usage(format!(
                "config error: field `experiment.kind`: unknown experiment `{other}`"
            )))
        }
    };
    ctx.raw.reject_unused()?;
    manifest.stage("total", total);
    let audits_failed = manifest.failed_audits();
    files.push(write_file(ctx.out_dir, "manifest.txt", &manifest.render())?);
    Ok(RunOutcome {
        files,
        audits_failed,
    })
}

/// Optional Monte Carlo cross-check shared by the density experiments:
/// compares engine values against the estimate within three standard
/// errors plus an absolute slack for quadrature bias.
fn mc_audit(
    manifest: &mut Manifest,
    engine: &DensityGrid,
    mc: &DensityGrid,
    slack: f64,
) -> Result<(), CliError> {
    let se = mc
        .standard_errors
        .as_ref()
        .ok_or_else(|| CliError::Engine("Monte Carlo grid lacks standard errors".into()))?;
    let mut worst = 0.0f64;
    let mut ok = true;
    for (idx, (&v, &m)) in engine.values.iter().zip(&mc.values).enumerate() {
        let allowed = 3.0 * se[idx] + slack;
        let gap = (v - m).abs();
        worst = worst.max(gap - allowed);
        if gap > allowed {
            ok = false;
        }
    }
    manifest.record_f64("mc_worst_excess", worst.max(0.0));
    manifest.record(
        "mc_bandwidth_warning",
        mc.bandwidth_warning.to_string(),
    );
    manifest.audit("mc-agreement", ok);
    Ok(())
}

fn sde_density(ctx: &RunContext<'_>, manifest: &mut Manifest) -> Result<Vec<PathBuf>, CliError> {
    let set = ctx.coefficient_set()?;
    if set.dim != 1 {
        return Err(CliError::Usage(
            "config error: field `coefficients.dim`: density experiments need dimension 1".into(),
        ));
    }
    let (s, t, x) = ctx.window()?;
    let ends = probe_ends(ctx.raw.section("probe"), x)?;
    let (order, scheme) = ctx.scheme_for(&set)?;

    let engine_t = Instant::now();
    let targets: Vec<Vec<f64>> = ends.iter().map(|&y| vec![y]).collect();
    let results = density_series_grid(&set, s, t, &[x], &targets, order, &scheme)?;
    manifest.stage("engine", engine_t);
    let grid = DensityGrid::single(
        t - s,
        x,
        ends.clone(),
        results.iter().map(|r| r.value).collect(),
        Provenance::ParametrixSde,
        format!("series order {order}"),
    )?;
    let tail = results
        .iter()
        .map(|r| r.terms.last().copied().unwrap_or(0.0).abs())
        .fold(0.0f64, f64::max);
    manifest.record("order", order.to_string());
    manifest.record_f64("max_last_term", tail);

    if let Some(tol) = ctx.raw.section("audit").f64_opt("mass_tol")? {
        let mut mass = 0.0;
        for w in 0..ends.len() - 1 {
            mass += 0.5 * (grid.values[w] + grid.values[w + 1]) * (ends[w + 1] - ends[w]);
        }
        manifest.record_f64("probe_mass", mass);
        manifest.audit("mass", (mass - 1.0).abs() <= tol);
    }

    let mut files = vec![write_file(ctx.out_dir, "sde_density.csv", &density_csv(&grid))?];
    let mc_paths = ctx.raw.section("probe").usize_or("mc_paths", 0)?;
    if mc_paths > 0 {
        let mc_t = Instant::now();
        let mc = mc_density_diffusion(&set, s, t, x, &ends, mc_paths, None, ctx.seed)?;
        manifest.stage("mc", mc_t);
        let slack = ctx.raw.section("audit").f64_or("mc_slack", 5e-3)?;
        mc_audit(manifest, &grid, &mc, slack)?;
        files.push(write_file(ctx.out_dir, "sde_density_mc.csv", &density_csv(&mc))?);
    }
    Ok(files)
}

/// Chain grid sized like the stability sweeps: covers the probe reach plus
/// `8√(horizon·Λ)`, with steps no coarser than half the one-step width.
fn chain_grid_for(model: &ChainModel, x: f64, ends: &[f64]) -> Result<ChainGrid, CliError> {
    let reach = ends.iter().map(|e| (e - x).abs()).fold(0.0f64, f64::max);
    let half = reach + 8.0 * (model.horizon * model.set.lambda).sqrt();
    let target_step = 0.5 * (model.h / model.set.lambda).sqrt();
    let mut count = (2.0 * half / target_step).ceil() as usize + 1;
    count = count.max(513);
    if count % 2 == 0 {
        count += 1;
    }
    Ok(ChainGrid::new(x - half, x + half, count)?)
}

fn chain_density(ctx: &RunContext<'_>, manifest: &mut Manifest) -> Result<Vec<PathBuf>, CliError> {
    let set = ctx.coefficient_set()?;
    let model = ctx.chain_model(&set)?;
    let x = ctx.raw.section("window").f64_or("x", 0.0)?;
    let ends = probe_ends(ctx.raw.section("probe"), x)?;
    let grid = chain_grid_for(&model, x, &ends)?;

    let engine_t = Instant::now();
    let results =
        parametrix::chain::chain_density_parametrix_grid(&model, 0, model.n_steps, &[x], &ends, &grid)?;
    manifest.stage("engine", engine_t);
    let refinement_gap = results
        .iter()
        .map(|r| r.mass_refinement_gap)
        .fold(0.0f64, f64::max);
    manifest.record_f64("term0_mass", results[0].term0_mass);
    manifest.record_f64("mass_refinement_gap", refinement_gap);
    manifest.record("steps", model.n_steps.to_string());

    let out = DensityGrid::single(
        model.horizon,
        x,
        ends.clone(),
        results.iter().map(|r| r.value).collect(),
        Provenance::ParametrixChain,
        format!("chain parametrix, N = {}", model.n_steps),
    )?;
    let mut files = vec![write_file(ctx.out_dir, "chain_density.csv", &density_csv(&out))?];
    let mc_paths = ctx.raw.section("probe").usize_or("mc_paths", 0)?;
    if mc_paths > 0 {
        let mc_t = Instant::now();
        let mc = mc_density_chain(&model, 0, model.n_steps, x, &ends, mc_paths, None, ctx.seed)?;
        manifest.stage("mc", mc_t);
        let slack = ctx.raw.section("audit").f64_or("mc_slack", 5e-3)?;
        mc_audit(manifest, &out, &mc, slack)?;
        files.push(write_file(ctx.out_dir, "chain_density_mc.csv", &density_csv(&mc))?);
    }
    Ok(files)
}

fn record_report(manifest: &mut Manifest, report: &StabilityReport) {
    manifest.record_f64("slope", report.slope);
    manifest.record_f64("intercept", report.intercept);
    manifest.record_f64("residual", report.residual);
    manifest.record_f64("ratio_spread", report.ratio_spread);
    manifest.record_f64("alpha_q", report.alpha_q);
}

fn sweep_audits(ctx: &RunContext<'_>, manifest: &mut Manifest, report: &StabilityReport) -> Result<(), CliError> {
    let sec = ctx.raw.section("audit");
    let slope_target = sec.f64_or("slope_target", 1.0)?;
    let slope_tol = sec.f64_or("slope_tol", 0.15)?;
    let spread_cap = sec.f64_or("max_ratio_spread", 5.0)?;
    manifest.audit("slope", (report.slope - slope_target).abs() <= slope_tol);
    manifest.audit("ratio-spread", report.ratio_spread <= spread_cap);
    Ok(())
}

fn perturb_sweep(ctx: &RunContext<'_>, manifest: &mut Manifest) -> Result<Vec<PathBuf>, CliError> {
    let set = ctx.coefficient_set()?;
    if set.dim != 1 {
        return Err(CliError::Usage(
            "config error: field `coefficients.dim`: sweeps need dimension 1".into(),
        ));
    }
    let sweep = ctx.raw.section("sweep");
    let epsilons = epsilon_list(sweep, "epsilons")?;
    let q = sweep.q_index("q", set.dim)?;
    let pert_id = sweep.str_required("perturbation")?;
    let target = sweep.str_or("target", "diffusion");
    let family = catalog::build_perturbation(pert_id, set.clone(), sweep)?;

    let (s, t, x) = ctx.window()?;
    let ends = probe_ends(ctx.raw.section("probe"), x)?;
    let (order, scheme) = ctx.scheme_for(&set)?;
    let metric = ctx.metric_domain(x, set.dim)?;
    let metric_times = ctx.metric_times(s, t)?;
    let settings = parametrix::oracles::SweepSettings {
        order,
        scheme,
        ends,
        metric,
        metric_times,
    };

    let engine_t = Instant::now();
    let report = match target {
        "diffusion" => diffusion_stability_sweep(&family, &epsilons, q, s, t, x, &settings)?,
        "chain" => {
            let model = ctx.chain_model(&set)?;
            parametrix::oracles::chain_stability_sweep(
                &family,
                &epsilons,
                q,
                model.law.clone(),
                model.horizon,
                model.n_steps,
                x,
                &settings,
            )?
        }
        other => {
            return Err(CliError::Usage(format!(
                "config error: field `sweep.target`: expected `diffusion` or `chain`, got `{other}`"
            )))
        }
    };
    manifest.stage("engine", engine_t);
    record_report(manifest, &report);
    sweep_audits(ctx, manifest, &report)?;
    let rows = report_rows(&report);
    Ok(vec![write_file(ctx.out_dir, "perturb_sweep.csv", &sweep_csv(&rows))?])
}

fn mollify_sweep(ctx: &RunContext<'_>, manifest: &mut Manifest) -> Result<Vec<PathBuf>, CliError> {
    let set = ctx.coefficient_set()?;
    let sweep = ctx.raw.section("sweep");
    let epsilons = epsilon_list(sweep, "epsilons")?;
    let q = sweep.q_index("q", set.dim)?;
    let rate = sweep.f64_or("rate", set.gamma)?;
    let eta = sweep.f64_or("eta", 0.5 * set.gamma)?;
    if !(eta > 0.0 && eta < rate) {
        return Err(CliError::Usage(format!(
            "config error: field `sweep.eta`: need 0 < eta < rate, got eta={eta}, rate={rate}"
        )));
    }
    let (s, t, x) = ctx.window()?;
    let metric = ctx.metric_domain(x, set.dim)?;
    let metric_times = ctx.metric_times(s, t)?;
    let family = catalog::build_perturbation("mollify", set.clone(), sweep)?;
    // An odd count keeps the domain center on the pair grid, so a kink
    // placed there is probed by the dyadic near-diagonal pairs that reach
    // the fine Hölder scale.
    let pair_points = ctx.raw.section("metric").usize_or("pair_points", 201)?;
    let plan = PairPlan::tensor(metric.domain.clone(), pair_points)
        .map_err(|e| CliError::Engine(e.to_string()))?;

    let engine_t = Instant::now();
    let mut rows = Vec::with_capacity(epsilons.len());
    let mut sup_gaps = Vec::with_capacity(epsilons.len());
    let mut eta_gaps = Vec::with_capacity(epsilons.len());
    for &eps in &epsilons {
        let pert = family.perturbed(eps)?;
        let delta = delta_metrics(&set, &pert, q, &metric_times, &metric)?;
        let mut eta_norm = 0.0f64;
        for &tt in &metric_times {
            let drift_sem = holder_seminorm(
                |p: &[f64]| set.drift.eval(tt, p) - pert.drift.eval(tt, p),
                eta,
                &plan,
            )?;
            let diff_sem = holder_seminorm(
                |p: &[f64]| set.diffusion.eval(tt, p) - pert.diffusion.eval(tt, p),
                eta,
                &plan,
            )?;
            eta_norm = eta_norm.max(drift_sem + diff_sem);
        }
        let sup_gap = delta.delta_b_sup + delta.delta_sigma_sup;
        rows.push(SweepRow {
            epsilon: eps,
            delta_sup: sup_gap,
            delta_lq: delta.delta_b_lq,
            delta_holder: eta_norm,
            gap: sup_gap,
            ratio: sup_gap / eps.powf(rate),
        });
        sup_gaps.push(sup_gap);
        eta_gaps.push(eta_norm);
    }
    manifest.stage("engine", engine_t);

    let sup_fit = rate_fit(&epsilons, &sup_gaps)?;
    let eta_fit = rate_fit(&epsilons, &eta_gaps)?;
    manifest.record_f64("rate_target", rate);
    manifest.record_f64("eta", eta);
    manifest.record_f64("slope", sup_fit.slope);
    manifest.record_f64("intercept", sup_fit.intercept);
    manifest.record_f64("residual", sup_fit.residual);
    manifest.record_f64("slope_holder", eta_fit.slope);
    manifest.record_f64("residual_holder", eta_fit.residual);

    let tol = ctx.raw.section("audit").f64_or("slope_tol", 0.15)?;
    manifest.audit("sup-rate", (sup_fit.slope - rate).abs() <= tol);
    manifest.audit("holder-rate", (eta_fit.slope - (rate - eta)).abs() <= tol);
    Ok(vec![write_file(ctx.out_dir, "mollify_sweep.csv", &sweep_csv(&rows))?])
}

fn chain_compare(ctx: &RunContext<'_>, manifest: &mut Manifest) -> Result<Vec<PathBuf>, CliError> {
    let set = ctx.coefficient_set()?;
    let model = ctx.chain_model(&set)?;
    let x = ctx.raw.section("window").f64_or("x", 0.0)?;
    let probe = ctx.raw.section("probe");
    let lo = probe.f64_or("end_lo", x - 2.0)?;
    let hi = probe.f64_or("end_hi", x + 2.0)?;
    let count = probe.usize_or("end_count", 21)?;
    if !(hi > lo) || count < 2 {
        return Err(CliError::Usage(
            "config error: field `probe.end_hi`: need end_lo < end_hi and end_count >= 2".into(),
        ));
    }

    let grid = chain_grid_for(&model, x, &[lo, hi])?;
    // Probe on recursion grid nodes so both engines are compared without
    // interpolation.
    let in_window: Vec<usize> = (0..grid.nodes.len())
        .filter(|&i| grid.nodes[i] >= lo && grid.nodes[i] <= hi)
        .collect();
    let stride = (in_window.len() / count).max(1);
    let picked: Vec<usize> = in_window.iter().copied().step_by(stride).collect();
    let ends: Vec<f64> = picked.iter().map(|&i| grid.nodes[i]).collect();

    let engine_t = Instant::now();
    let results =
        parametrix::chain::chain_density_parametrix_grid(&model, 0, model.n_steps, &[x], &ends, &grid)?;
    let ck = grid_chapman_kolmogorov(&model, 0, model.n_steps, x, &grid)?;
    manifest.stage("engine", engine_t);

    let para: Vec<f64> = results.iter().map(|r| r.value).collect();
    let ck_at: Vec<f64> = picked.iter().map(|&i| ck.values[i]).collect();

    let mut out = String::from("elapsed,start,end,parametrix,grid_ck,gap\n");
    let mut max_gap = 0.0f64;
    for (k, &end) in ends.iter().enumerate() {
        let gap = (para[k] - ck_at[k]).abs();
        max_gap = max_gap.max(gap);
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            fmt(model.horizon),
            fmt(x),
            fmt(end),
            fmt(para[k]),
            fmt(ck_at[k]),
            fmt(gap)
        );
    }
    let (mode_idx, mode_val) = ck_at
        .iter()
        .copied()
        .enumerate()
        .max_by(|a, b| a.1.partial_cmp(&b.1).expect("finite density"))
        .expect("nonempty probe");
    let mode_rel = (para[mode_idx] - mode_val).abs() / mode_val;
    manifest.record_f64("max_abs_gap", max_gap);
    manifest.record_f64("mode_relative_gap", mode_rel);
    manifest.record("steps", model.n_steps.to_string());

    let sec = ctx.raw.section("audit");
    let rel_tol = sec.f64_or("mode_rel_tol", 1e-2)?;
    let abs_tol = sec.f64_or("abs_tol", 5e-3)?;
    manifest.audit("mode-relative-gap", mode_rel <= rel_tol);
    manifest.audit("abs-gap", max_gap <= abs_tol);

    let para_grid = DensityGrid::single(
        model.horizon,
        x,
        ends.clone(),
        para,
        Provenance::ParametrixChain,
        format!("chain parametrix, N = {}", model.n_steps),
    )?;
    let ck_grid = DensityGrid::single(
        model.horizon,
        x,
        ends,
        ck_at,
        Provenance::GridCk,
        ck.scheme.clone(),
    )?;
    // Weighted comparison over the shared axes doubles as a shape check on
    // the compare path itself.
    let weight = ComparisonWeight::GaussianEnvelope(
        parametrix::gaussian::GaussianRef::new(0.5 / set.lambda, 1)
            .map_err(|e| CliError::Engine(e.to_string()))?,
    );
    let cmp = compare_densities(&para_grid, &ck_grid, &weight)?;
    manifest.record_f64("sup_weighted_gap", cmp.sup_weighted_gap);

    Ok(vec![
        write_file(ctx.out_dir, "chain_density.csv", &density_csv(&para_grid))?,
        write_file(ctx.out_dir, "grid_ck.csv", &density_csv(&ck_grid))?,
        write_file(ctx.out_dir, "chain_compare.csv", &out)?,
    ])
}

fn price_sensitivity_run(
    ctx: &RunContext<'_>,
    manifest: &mut Manifest,
) -> Result<Vec<PathBuf>, CliError> {
    let set = ctx.coefficient_set()?;
    if set.dim != 1 {
        return Err(CliError::Usage(
            "config error: field `coefficients.dim`: price sensitivity needs dimension 1".into(),
        ));
    }
    let sweep = ctx.raw.section("sweep");
    let epsilons = epsilon_list(sweep, "epsilons")?;
    let q = sweep.q_index("q", set.dim)?;
    let pert_id = sweep.str_required("perturbation")?;
    let family = catalog::build_perturbation(pert_id, set.clone(), sweep)?;

    let payoff_sec = ctx.raw.section("payoff");
    let payoff_id = payoff_sec.str_or("id", "indicator-call");
    let payoff = catalog::build_payoff(payoff_id, payoff_sec)?;

    let (s, t, x) = ctx.window()?;
    let ends = probe_ends(ctx.raw.section("probe"), x)?;
    let (order, scheme) = ctx.scheme_for(&set)?;
    let metric = ctx.metric_domain(x, set.dim)?;
    let metric_times = ctx.metric_times(s, t)?;
    let settings = parametrix::oracles::SweepSettings {
        order,
        scheme,
        ends,
        metric,
        metric_times,
    };

    let engine_t = Instant::now();
    let mut out = String::from("epsilon,price_base,price_perturbed,difference,bound,ratio\n");
    let mut max_ratio = 0.0f64;
    let mut all_ok = true;
    for &eps in &epsilons {
        let sens = price_sensitivity(&family, eps, &payoff, q, s, t, x, &settings)?;
        max_ratio = max_ratio.max(sens.ratio);
        if !sens.ratio.is_finite() || !(sens.bound > 0.0) {
            all_ok = false;
        }
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            fmt(eps),
            fmt(sens.price_base),
            fmt(sens.price_perturbed),
            fmt(sens.difference),
            fmt(sens.bound),
            fmt(sens.ratio)
        );
    }
    manifest.stage("engine", engine_t);
    manifest.record_f64("envelope_constant", max_ratio);
    let cap = ctx.raw.section("audit").f64_or("ratio_cap", 10.0)?;
    manifest.audit("bound-positive", all_ok);
    manifest.audit("envelope-constant", max_ratio <= cap);
    Ok(vec![write_file(
        ctx.out_dir,
        "price_sensitivity.csv",
        &out,
    )?])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_numbers_carry_seventeen_significant_digits() {
        assert_eq!(fmt(0.1), "1.0000000000000001e-1");
        assert_eq!(fmt(1.0), "1.0000000000000000e0");
        let third = 1.0f64 / 3.0;
        assert_eq!(fmt(third).parse::<f64>().unwrap(), third);
    }

    #[test]
    fn manifest_renders_audits_and_failure_count() {
        let mut m = Manifest::new("demo", "abc", 7, 0);
        m.record_f64("slope", 1.0);
        m.audit("first", true);
        m.audit("second", false);
        let text = m.render();
        assert!(text.contains("experiment = demo"));
        assert!(text.contains("threads = auto"));
        assert!(text.contains("audit_first = pass"));
        assert!(text.contains("audit_second = fail"));
        assert!(text.contains("audits_failed = 1"));
        assert_eq!(m.failed_audits(), 1);
    }
}
