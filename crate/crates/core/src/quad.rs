//! Deterministic quadrature building blocks.
//!
//! All rules here are fixed-node (no adaptivity beyond explicit doubling
//! loops at the call sites), so every integral in the crate is a pure
//! function of its scheme parameters.

use crate::{Error, Result};
use nalgebra::DMatrix;

/// Composite Simpson rule on `[a, b]` with `nodes` equally spaced
/// evaluation points.  `nodes` must be odd and at least 3.
pub fn composite_simpson<F: Fn(f64) -> f64>(f: F, a: f64, b: f64, nodes: usize) -> Result<f64> {
    if nodes < 3 || nodes % 2 == 0 {
        return Err(Error::InvalidArgument(format!(
            "composite Simpson needs an odd node count >= 3, got {nodes}"
        )));
    }
    let n = nodes - 1;
    let h = (b - a) / n as f64;
    let mut acc = f(a) + f(b);
    for i in 1..n {
        let w = if i % 2 == 1 { 4.0 } else { 2.0 };
        acc += w * f(a + i as f64 * h);
    }
    Ok(acc * h / 3.0)
}

/// Trapezoid rule over uniformly spaced samples with spacing `step`.
pub fn trapezoid_uniform(values: &[f64], step: f64) -> f64 {
    if values.len() < 2 {
        return 0.0;
    }
    let interior: f64 = values[1..values.len() - 1].iter().sum();
    step * (0.5 * (values[0] + values[values.len() - 1]) + interior)
}

/// Nodes and weights for the probabilists' Gauss–Hermite rule, normalized so
/// that `E[f(ξ)] ≈ Σ w_i f(x_i)` for `ξ ~ N(0, 1)` with `Σ w_i = 1`.
///
/// Computed by the Golub–Welsch eigen-decomposition of the Jacobi matrix of
/// the (monic) Hermite recurrence, so the rule is exact for polynomials of
/// degree `2n − 1`.
pub fn gauss_hermite(n: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    if n == 0 {
        return Err(Error::InvalidArgument(
            "Gauss-Hermite order must be positive".into(),
        ));
    }
    let mut jacobi = DMatrix::<f64>::zeros(n, n);
    for k in 1..n {
        let b = (k as f64).sqrt();
        jacobi[(k - 1, k)] = b;
        jacobi[(k, k - 1)] = b;
    }
    let eig = jacobi.symmetric_eigen();
    let mut pairs: Vec<(f64, f64)> = (0..n)
        .map(|i| {
            let node = eig.eigenvalues[i];
            let first = eig.eigenvectors[(0, i)];
            (node, first * first)
        })
        .collect();
    pairs.sort_by(|a, b| a.0.partial_cmp(&b.0).expect("finite eigenvalues"));
    let total: f64 = pairs.iter().map(|p| p.1).sum();
    Ok(pairs.into_iter().map(|(x, w)| (x, w / total)).unzip())
}

/// Midpoint rule for `∫_s^t f(u) du` on a mesh graded toward `t`.
///
/// Substituting `u = t − (t−s)(1−v)^g` equidistributes an integrable endpoint
/// singularity `(t−u)^{1/g − 1}`; the rule returns midpoint nodes in `v`
/// together with the transformed weights, and never evaluates at `u = s` or
/// `u = t`.
pub fn graded_midpoint_mesh(s: f64, t: f64, n: usize, g: f64) -> Result<Vec<(f64, f64)>> {
    if n == 0 {
        return Err(Error::InvalidArgument(
            "graded mesh needs at least one cell".into(),
        ));
    }
    if !(t > s) || !(g >= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "graded mesh needs t > s and grading >= 1, got s={s}, t={t}, g={g}"
        )));
    }
    let span = t - s;
    let mut mesh = Vec::with_capacity(n);
    for j in 0..n {
        let v = (j as f64 + 0.5) / n as f64;
        let u = t - span * (1.0 - v).powf(g);
        let w = g * span * (1.0 - v).powf(g - 1.0) / n as f64;
        mesh.push((u, w));
    }
    Ok(mesh)
}
