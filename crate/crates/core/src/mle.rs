//! Maximum likelihood estimation of convex-transformed densities.
//!
//! Decreasing models (`d ≤ 3`) optimize heights at the sample sites: the
//! candidate function is always the lower convex hull of `(X_i, q_i)`, so
//! the estimator automatically has the polyhedral form of the population
//! MLE (knots a subset of the sample, domain `conv(X)`). The objective is
//! the augmented log-likelihood
//!
//! ```text
//! (1/n) Σ log h(ǧ(X_i)) − ∫ h∘ǧ dx + 1,
//! ```
//!
//! whose unconstrained maximizer is self-normalized; a normalization solve
//! still runs afterwards as a safeguard.
//!
//! Increasing models use the minimal max-affine extension through the
//! heights (exact for `d = 1`); `d ≥ 2` builds per-site support planes and
//! scores candidates with fixed-seed Monte Carlo integrals.

use ndarray::ArrayView2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::convexgeom::{
    general_position, AffinePiece, ConvexFn, GeomError, MaxAffineFn, PolyhedralFn,
};
use crate::integrate::{
    dd_eval, integrate_max_affine_shifted, integrate_poly, normalize_with, IntegrateError,
};
use crate::rng::SeedStream;
use crate::transforms::{Direction, TransformError};
use crate::Transformation;

#[derive(Debug, Error)]
pub enum MleError {
    #[error("existence conditions violated: {0}")]
    Existence(ExistenceViolation),
    #[error(transparent)]
    Geometry(#[from] GeomError),
    #[error(transparent)]
    Integrate(#[from] IntegrateError),
    #[error(transparent)]
    Transform(#[from] TransformError),
    #[error("objective not finite: {0}")]
    NonFinite(String),
    #[error("invalid configuration: {0}")]
    Config(String),
}

/// Structured report of which existence condition failed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum ExistenceViolation {
    /// `n` below the almost-sure existence threshold `n_d`.
    SampleTooSmall { n: usize, required: usize },
    /// Some `d+1` sites are degenerate.
    NotGeneralPosition,
    /// Increasing models need every observation strictly inside the
    /// positive orthant.
    NotInPositiveOrthant { index: usize },
    /// The transform cannot be bound to this dimension (power-concave
    /// needs `s > d`).
    InvalidModel(String),
}

impl std::fmt::Display for ExistenceViolation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ExistenceViolation::SampleTooSmall { n, required } => {
                write!(f, "sample size {n} below the existence threshold {required}")
            }
            ExistenceViolation::NotGeneralPosition => {
                write!(f, "observations are not in general position")
            }
            ExistenceViolation::NotInPositiveOrthant { index } => {
                write!(f, "observation {index} is not strictly inside the positive orthant")
            }
            ExistenceViolation::InvalidModel(msg) => write!(f, "invalid model: {msg}"),
        }
    }
}

/// Verify the almost-sure existence conditions before fitting: sample size
/// at least `n_d`, general position, and (increasing models) strictly
/// positive coordinates.
pub fn check_existence(
    t: &Transformation,
    points: ArrayView2<'_, f64>,
) -> Result<(), ExistenceViolation> {
    let n = points.nrows();
    let d = points.ncols();
    let required = t
        .existence_threshold(d)
        .map_err(|e| ExistenceViolation::InvalidModel(e.to_string()))?;
    if n < required {
        return Err(ExistenceViolation::SampleTooSmall { n, required });
    }
    if t.direction() == Direction::Increasing {
        for (i, row) in points.rows().into_iter().enumerate() {
            if row.iter().any(|&c| c <= 0.0) {
                return Err(ExistenceViolation::NotInPositiveOrthant { index: i });
            }
        }
    }
    if !general_position(points) {
        return Err(ExistenceViolation::NotGeneralPosition);
    }
    Ok(())
}

/// Fit configuration; `seed` drives initialization jitter and any Monte
/// Carlo integration inside the objective.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitConfig {
    pub transform: Transformation,
    pub max_iters: usize,
    pub grad_tol: f64,
    pub step_init: f64,
    pub seed: u64,
    pub normalize_tol: f64,
}

impl FitConfig {
    pub fn new(transform: Transformation) -> Self {
        FitConfig {
            transform,
            max_iters: 400,
            grad_tol: 1e-6,
            step_init: 0.25,
            seed: 0,
            normalize_tol: 1e-10,
        }
    }

    fn validate(&self) -> Result<(), MleError> {
        if self.max_iters == 0 {
            return Err(MleError::Config("max_iters must be at least 1".into()));
        }
        if !(self.grad_tol > 0.0) || !(self.step_init > 0.0) || !(self.normalize_tol > 0.0) {
            return Err(MleError::Config("tolerances and steps must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct FitDiagnostics {
    pub objective_trace: Vec<f64>,
    pub subgradient_norms: Vec<f64>,
    /// `∫ h∘ĝ` before the safeguard normalization.
    pub pre_normalization_integral: f64,
    /// Set when a Monte Carlo objective's final standard error exceeded
    /// `grad_tol`.
    pub mc_noise_warning: bool,
}

/// Fitted estimator: the normalized convex function, the attained mean
/// log-likelihood, and optimizer bookkeeping.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitResult {
    pub estimate: ConvexFn,
    pub loglik: f64,
    pub c_norm: f64,
    pub iters: usize,
    pub converged: bool,
    pub diagnostics: FitDiagnostics,
}

impl FitResult {
    /// Density value `h(ĝ(x))`, zero outside the estimate's domain.
    pub fn density(&self, t: &Transformation, x: &[f64]) -> f64 {
        let g = self.estimate.eval(x);
        if g.is_finite() {
            t.eval(g)
        } else {
            0.0
        }
    }
}

/// Augmented decreasing-model objective and its supergradient with respect
/// to the site heights.
///
/// The candidate is `ǧ = hull(X, q)`; non-knot coordinates receive the
/// likelihood pull of their site redistributed onto the supporting
/// vertices through the barycentric weights, and nothing from the integral
/// term (the hull is locally independent of a strictly-above-hull height).
pub fn objective_dec(
    t: &Transformation,
    points: ArrayView2<'_, f64>,
    heights: &[f64],
) -> Result<(f64, Vec<f64>), MleError> {
    let (value, grad, _) = objective_dec_with_hull(t, points, heights)?;
    Ok((value, grad))
}

fn objective_dec_with_hull(
    t: &Transformation,
    points: ArrayView2<'_, f64>,
    heights: &[f64],
) -> Result<(f64, Vec<f64>, PolyhedralFn), MleError> {
    let n = points.nrows();
    let d = points.ncols();
    let hull = PolyhedralFn::lower_convex_hull(points, heights)?;
    let (lo, hi) = t.finite_interval();
    let hv = hull.heights();
    for &g in hv {
        if !(g > lo && g < hi) {
            return Err(MleError::NonFinite(format!(
                "hull height {g} outside the finite interval ({lo}, {hi})"
            )));
        }
    }

    let mut loglik = 0.0;
    let mut grad = vec![0.0; n];
    let inv_n = 1.0 / n as f64;
    for i in 0..n {
        loglik += inv_n * t.log_eval(hv[i]);
        let w = inv_n * t.log_deriv(hv[i]);
        if hull.active()[i] {
            grad[i] += w;
        } else if let Some((cell, lam)) = hull.locate_cell(points.row(i).as_slice().unwrap()) {
            let verts = &hull.simplices()[cell].vertices;
            for (v, l) in verts.iter().zip(&lam) {
                grad[*v] += w * l;
            }
        }
    }

    let total = integrate_poly(t, &hull)?;
    let mut dfact = 1.0;
    for i in 2..=d {
        dfact *= i as f64;
    }
    for s in hull.simplices() {
        if s.volume == 0.0 {
            continue;
        }
        let vals: Vec<f64> = s.vertices.iter().map(|&v| hv[v]).collect();
        for (j, &v) in s.vertices.iter().enumerate() {
            let mut nodes = vals.clone();
            nodes.push(vals[j]);
            let partial = dfact * s.volume * dd_eval(t, d, &nodes)?;
            grad[v] -= partial;
        }
    }

    Ok((loglik - total + 1.0, grad, hull))
}

/// Decreasing-model MLE by subgradient ascent over site heights.
pub fn fit_decreasing(
    t: &Transformation,
    points: ArrayView2<'_, f64>,
    cfg: &FitConfig,
) -> Result<FitResult, MleError> {
    cfg.validate()?;
    if t.direction() != Direction::Decreasing {
        return Err(MleError::Config(
            "fit_decreasing requires a decreasing transformation".into(),
        ));
    }
    check_existence(t, points).map_err(MleError::Existence)?;
    let n = points.nrows();
    let d = points.ncols();

    // Degenerate n = d+1: the MLE is the uniform density on the simplex.
    if n == d + 1 {
        return uniform_simplex_fit(t, points, cfg);
    }

    let mut q = pilot_heights(t, points, cfg.seed);
    let objective = |q: &[f64]| -> Option<(f64, Vec<f64>)> {
        objective_dec_with_hull(t, points, q).ok().map(|(v, g, _)| (v, g))
    };

    let trace = ascend(&mut q, objective, cfg);

    let (_, _, hull) = objective_dec_with_hull(t, points, &q)?;
    let pre_norm = integrate_poly(t, &hull)?;
    let (estimate, c_norm) = normalize_with(
        t,
        &ConvexFn::Polyhedral(hull),
        cfg.normalize_tol,
        400_000,
        cfg.seed,
    )?;
    let loglik = mean_loglik(t, &estimate, points);
    Ok(FitResult {
        estimate,
        loglik,
        c_norm,
        iters: trace.iters,
        converged: trace.converged,
        diagnostics: FitDiagnostics {
            objective_trace: trace.objective_trace,
            subgradient_norms: trace.subgradient_norms,
            pre_normalization_integral: pre_norm,
            mc_noise_warning: false,
        },
    })
}

/// Increasing-model MLE: exact minimal max-affine path for `d = 1`,
/// support-plane candidates with common-random-number Monte Carlo scoring
/// for `d ≥ 2`.
pub fn fit_increasing(
    t: &Transformation,
    points: ArrayView2<'_, f64>,
    cfg: &FitConfig,
) -> Result<FitResult, MleError> {
    cfg.validate()?;
    if t.direction() != Direction::Increasing {
        return Err(MleError::Config(
            "fit_increasing requires an increasing transformation".into(),
        ));
    }
    check_existence(t, points).map_err(MleError::Existence)?;
    if points.ncols() == 1 {
        fit_increasing_1d(t, points, cfg)
    } else {
        fit_increasing_mc(t, points, cfg)
    }
}

struct AscentTrace {
    objective_trace: Vec<f64>,
    subgradient_norms: Vec<f64>,
    iters: usize,
    converged: bool,
}

/// Subgradient ascent with adaptive step halving and tail averaging. The
/// iterate with the best objective wins; a mean of the last half of the
/// trajectory is evaluated as a tie-breaker.
fn ascend<F>(q: &mut Vec<f64>, objective: F, cfg: &FitConfig) -> AscentTrace
where
    F: Fn(&[f64]) -> Option<(f64, Vec<f64>)>,
{
    let n = q.len();
    let Some((mut val, mut grad)) = objective(q) else {
        return AscentTrace {
            objective_trace: vec![],
            subgradient_norms: vec![],
            iters: 0,
            converged: false,
        };
    };
    let mut best_q = q.clone();
    let mut best_val = val;
    let mut step = cfg.step_init;
    let mut trace = vec![val];
    let mut gnorms = vec![sup_norm(&grad)];
    let mut tail_sum = vec![0.0; n];
    let mut tail_count = 0usize;
    let mut stall = 0usize;
    let mut converged = false;
    let mut iters = 0usize;

    for it in 0..cfg.max_iters {
        iters = it + 1;
        let gnorm = sup_norm(&grad);
        if gnorm <= cfg.grad_tol {
            converged = true;
            break;
        }
        // Try the step, halving while the objective degrades.
        let mut accepted = false;
        let mut local = step;
        for _ in 0..10 {
            let cand: Vec<f64> = q.iter().zip(&grad).map(|(qi, gi)| qi + local * gi).collect();
            if let Some((cv, cg)) = objective(&cand) {
                if cv > val - 1e-14 {
                    *q = cand;
                    val = cv;
                    grad = cg;
                    step = (local * 1.4).min(cfg.step_init * 16.0);
                    accepted = true;
                    break;
                }
            }
            local *= 0.5;
        }
        if !accepted {
            // Diminishing safeguard move keeps the method a true
            // subgradient scheme on nonsmooth ridges.
            let dim = local / (1.0 + it as f64).sqrt();
            let cand: Vec<f64> = q.iter().zip(&grad).map(|(qi, gi)| qi + dim * gi).collect();
            if let Some((cv, cg)) = objective(&cand) {
                *q = cand;
                val = cv;
                grad = cg;
            }
            step = (step * 0.5).max(1e-12);
        }
        trace.push(val);
        gnorms.push(sup_norm(&grad));
        if val > best_val + 1e-14 {
            best_val = val;
            best_q = q.clone();
        }
        if it >= cfg.max_iters / 2 {
            for (s, qi) in tail_sum.iter_mut().zip(q.iter()) {
                *s += qi;
            }
            tail_count += 1;
        }
        // Objective improvement below 1e-12 over 50 iterations counts as
        // converged.
        let lookback = 50.min(trace.len() - 1);
        if lookback == 50 && trace[trace.len() - 1] - trace[trace.len() - 1 - lookback] < 1e-12 {
            converged = true;
            stall += 1;
            let _ = stall;
            break;
        }
    }

    if tail_count > 0 {
        let avg: Vec<f64> = tail_sum.iter().map(|s| s / tail_count as f64).collect();
        if let Some((av, _)) = objective(&avg) {
            if av > best_val {
                best_val = av;
                best_q = avg;
            }
        }
    }
    *q = best_q;
    trace.push(best_val);
    AscentTrace { objective_trace: trace, subgradient_norms: gnorms, iters, converged }
}

fn sup_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0f64, |m, x| m.max(x.abs()))
}

fn mean_loglik(t: &Transformation, estimate: &ConvexFn, points: ArrayView2<'_, f64>) -> f64 {
    let n = points.nrows();
    let mut acc = 0.0;
    for row in points.rows() {
        acc += t.log_eval(estimate.eval(row.as_slice().unwrap()));
    }
    acc / n as f64
}

fn uniform_simplex_fit(
    t: &Transformation,
    points: ArrayView2<'_, f64>,
    _cfg: &FitConfig,
) -> Result<FitResult, MleError> {
    let n = points.nrows();
    let zeros = vec![0.0; n];
    let flat = PolyhedralFn::lower_convex_hull(points, &zeros)?;
    let vol: f64 = flat.simplices().iter().map(|s| s.volume).sum();
    if vol <= 0.0 {
        return Err(MleError::Existence(ExistenceViolation::NotGeneralPosition));
    }
    let c = t.h_inverse(1.0 / vol);
    let hull = flat.shift(c);
    let pre_norm = integrate_poly(t, &hull)?;
    let estimate = ConvexFn::Polyhedral(hull);
    let loglik = mean_loglik(t, &estimate, points);
    Ok(FitResult {
        estimate,
        loglik,
        c_norm: 0.0,
        iters: 0,
        converged: true,
        diagnostics: FitDiagnostics {
            objective_trace: vec![loglik],
            subgradient_norms: vec![0.0],
            pre_normalization_integral: pre_norm,
            mc_noise_warning: false,
        },
    })
}

/// Kernel pilot heights mapped through `h^{-1}`, clipped into the finite
/// interval, with a small seeded jitter so restarts explore distinct
/// starting points.
fn pilot_heights(t: &Transformation, points: ArrayView2<'_, f64>, seed: u64) -> Vec<f64> {
    let n = points.nrows();
    let d = points.ncols();
    let mut sd = vec![0.0; d];
    let mut mean = vec![0.0; d];
    for row in points.rows() {
        for c in 0..d {
            mean[c] += row[c] / n as f64;
        }
    }
    for row in points.rows() {
        for c in 0..d {
            sd[c] += (row[c] - mean[c]).powi(2) / n as f64;
        }
    }
    for s in sd.iter_mut() {
        *s = s.sqrt().max(1e-6);
    }
    let bw: Vec<f64> = sd
        .iter()
        .map(|s| s * (4.0 / (d as f64 + 2.0)).powf(1.0 / (d as f64 + 4.0))
            * (n as f64).powf(-1.0 / (d as f64 + 4.0)))
        .collect();
    let norm: f64 =
        bw.iter().map(|b| 1.0 / (b * (2.0 * std::f64::consts::PI).sqrt())).product();

    let mut density = vec![0.0; n];
    for i in 0..n {
        let xi = points.row(i);
        let mut acc = 0.0;
        for j in 0..n {
            let xj = points.row(j);
            let e: f64 = (0..d).map(|c| ((xi[c] - xj[c]) / bw[c]).powi(2)).sum();
            acc += (-0.5 * e).exp();
        }
        density[i] = acc * norm / n as f64;
    }

    let (ylo, yhi) = t.finite_interval();
    let mut stream = SeedStream::new(seed, "fit-init-jitter");
    let mut q: Vec<f64> = density
        .iter()
        .map(|&p| t.h_inverse(p.max(1e-300)))
        .collect();
    let spread = q.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1.0);
    for v in q.iter_mut() {
        let jitter = if seed == 0 { 0.0 } else { 0.02 * spread * (stream.next_f64() - 0.5) };
        let mut y = *v + jitter;
        let margin = 1e-6 * spread;
        if ylo.is_finite() {
            y = y.max(ylo + margin);
        }
        if yhi.is_finite() {
            y = y.min(yhi - margin);
        }
        *v = y;
    }
    q
}

fn fit_increasing_1d(
    t: &Transformation,
    points: ArrayView2<'_, f64>,
    cfg: &FitConfig,
) -> Result<FitResult, MleError> {
    let n = points.nrows();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| points[(i, 0)].partial_cmp(&points[(j, 0)]).unwrap());
    let xs: Vec<f64> = order.iter().map(|&i| points[(i, 0)]).collect();

    let pilot = pilot_heights(t, points, cfg.seed);
    let mut q: Vec<f64> = order.iter().map(|&i| pilot[i]).collect();
    project_feasible_1d(&xs, &mut q);

    let pts1 = ndarray::Array2::from_shape_vec((n, 1), xs.clone()).unwrap();
    let objective = |q: &[f64]| -> Option<(f64, Vec<f64>)> {
        let mut qp = q.to_vec();
        project_feasible_1d(&xs, &mut qp);
        let g = MaxAffineFn::minimal_through(pts1.view(), &qp).ok()?;
        let total = integrate_max_affine_shifted(t, &g, 0.0, 0, 0).ok()?.value;
        let mut ll = 0.0;
        let inv_n = 1.0 / n as f64;
        let mut grad = vec![0.0; n];
        for i in 0..n {
            let v = t.log_eval(qp[i]);
            if !v.is_finite() {
                return None;
            }
            ll += inv_n * v;
            grad[i] = inv_n * t.log_deriv(qp[i]);
        }
        // Numeric integral sensitivities: the envelope kinks make the
        // exact derivative piecewise; central differences are robust here.
        let h = 1e-6 * (1.0 + sup_norm(&qp));
        for i in 0..n {
            let mut plus = qp.clone();
            plus[i] += h;
            let mut minus = qp.clone();
            minus[i] -= h;
            let gp = MaxAffineFn::minimal_through(pts1.view(), &plus)
                .ok()
                .and_then(|g| integrate_max_affine_shifted(t, &g, 0.0, 0, 0).ok())
                .map(|e| e.value);
            let gm = MaxAffineFn::minimal_through(pts1.view(), &minus)
                .ok()
                .and_then(|g| integrate_max_affine_shifted(t, &g, 0.0, 0, 0).ok())
                .map(|e| e.value);
            if let (Some(p), Some(m)) = (gp, gm) {
                grad[i] -= (p - m) / (2.0 * h);
            }
        }
        Some((ll - total + 1.0, grad))
    };

    let trace = ascend(&mut q, objective, cfg);
    project_feasible_1d(&xs, &mut q);

    let g = MaxAffineFn::minimal_through(pts1.view(), &q)?;
    let pre_norm = integrate_max_affine_shifted(t, &g, 0.0, 0, 0)?.value;
    let (estimate, c_norm) =
        normalize_with(t, &ConvexFn::MaxAffine(g), cfg.normalize_tol, 400_000, cfg.seed)?;
    let loglik = mean_loglik(t, &estimate, points);
    Ok(FitResult {
        estimate,
        loglik,
        c_norm,
        iters: trace.iters,
        converged: trace.converged,
        diagnostics: FitDiagnostics {
            objective_trace: trace.objective_trace,
            subgradient_norms: trace.subgradient_norms,
            pre_normalization_integral: pre_norm,
            mc_noise_warning: false,
        },
    })
}

/// Project heights onto the feasible cone of convex nonincreasing
/// sequences with strictly negative secant slopes.
fn project_feasible_1d(xs: &[f64], q: &mut [f64]) {
    let n = xs.len();
    if n < 2 {
        return;
    }
    // Convexify via the 1D lower hull of (x, q).
    let pts = ndarray::Array2::from_shape_vec((n, 1), xs.to_vec()).unwrap();
    if let Ok(hull) = PolyhedralFn::lower_convex_hull(pts.view(), q) {
        q.copy_from_slice(hull.heights());
    }
    // Enforce strictly negative slopes by forward-propagating a floor.
    let scale = q.iter().fold(1.0f64, |m, v| m.max(v.abs()));
    let floor = 1e-7 * scale / (xs[n - 1] - xs[0]).max(1e-12);
    for i in 1..n {
        let dx = xs[i] - xs[i - 1];
        let max_allowed = q[i - 1] - floor * dx;
        if q[i] > max_allowed {
            q[i] = max_allowed;
        }
    }
}

fn fit_increasing_mc(
    t: &Transformation,
    points: ArrayView2<'_, f64>,
    cfg: &FitConfig,
) -> Result<FitResult, MleError> {
    let n = points.nrows();
    let mc_budget = 60_000;
    let pilot = pilot_heights(t, points, cfg.seed);
    let mut q = pilot;

    let objective = |q: &[f64]| -> Option<f64> {
        let g = support_plane_candidate(points, q)?;
        let total = integrate_max_affine_shifted(t, &g, 0.0, mc_budget, cfg.seed).ok()?.value;
        let mut ll = 0.0;
        for (i, row) in points.rows().into_iter().enumerate() {
            let v = t.log_eval(g.eval(row.as_slice().unwrap()));
            if !v.is_finite() {
                return None;
            }
            ll += v / n as f64;
            let _ = i;
        }
        Some(ll - total + 1.0)
    };

    let (best_q, best_val, iters, converged) =
        nelder_mead(&mut q, objective, cfg.max_iters, cfg.grad_tol);
    let g = support_plane_candidate(points, &best_q)
        .ok_or_else(|| MleError::NonFinite("no feasible support-plane candidate".into()))?;
    let pre = integrate_max_affine_shifted(t, &g, 0.0, mc_budget, cfg.seed)?;
    let (estimate, c_norm) = normalize_with(
        t,
        &ConvexFn::MaxAffine(g),
        cfg.normalize_tol,
        mc_budget,
        cfg.seed,
    )?;
    let loglik = mean_loglik(t, &estimate, points);
    let mc_noise_warning = pre.std_error > cfg.grad_tol;
    Ok(FitResult {
        estimate,
        loglik,
        c_norm,
        iters,
        converged,
        diagnostics: FitDiagnostics {
            objective_trace: vec![best_val],
            subgradient_norms: vec![],
            pre_normalization_integral: pre.value,
            mc_noise_warning,
        },
    })
}

/// Max-affine candidate interpolating the heights from below: one support
/// plane per site, slope from local ridge-regularized least squares,
/// clamped negative and scaled back until it minorizes every `(X_k, q_k)`.
fn support_plane_candidate(points: ArrayView2<'_, f64>, q: &[f64]) -> Option<MaxAffineFn> {
    let n = points.nrows();
    let d = points.ncols();
    let scale = q.iter().fold(1.0f64, |m, v| m.max(v.abs()));
    let mut pieces = Vec::new();
    for i in 0..n {
        let xi = points.row(i);
        // Weighted LS for the local slope.
        let mut ata = vec![vec![0.0; d + 1]; d];
        for k in 0..n {
            if k == i {
                continue;
            }
            let u: Vec<f64> = (0..d).map(|c| points[(k, c)] - xi[c]).collect();
            let r = q[k] - q[i];
            let w = 1.0 / (u.iter().map(|v| v * v).sum::<f64>() + 1e-9);
            for a in 0..d {
                for b in 0..d {
                    ata[a][b] += w * u[a] * u[b];
                }
                ata[a][d] += w * u[a] * r;
            }
        }
        for (a, row) in ata.iter_mut().enumerate() {
            row[a] += 1e-9;
        }
        let mut sys = ata.clone();
        let mut slope = match crate::convexgeom::gauss_solve(&mut sys) {
            Some(s) => s,
            None => vec![-1.0; d],
        };
        let floor = 1e-4 * scale / bbox_span(points).max(1e-12);
        for s in slope.iter_mut() {
            *s = s.min(-floor);
        }
        // Scale toward zero until the plane minorizes all heights.
        let mut lambda: f64 = 1.0;
        let mut feasible = true;
        for k in 0..n {
            if k == i {
                continue;
            }
            let u: Vec<f64> = (0..d).map(|c| points[(k, c)] - xi[c]).collect();
            let v: f64 = slope.iter().zip(&u).map(|(a, b)| a * b).sum();
            let r = q[k] - q[i];
            if v > r + 1e-12 {
                if v > 0.0 && r >= 0.0 {
                    lambda = lambda.min(r / v);
                } else {
                    feasible = false;
                    break;
                }
            }
        }
        if !feasible {
            continue;
        }
        let a: Vec<f64> = slope.iter().map(|s| (s * lambda).min(-floor)).collect();
        // Re-check after the negativity clamp.
        let ok = (0..n).all(|k| {
            if k == i {
                return true;
            }
            let v: f64 =
                (0..d).map(|c| a[c] * (points[(k, c)] - xi[c])).sum();
            v <= q[k] - q[i] + 1e-9 * scale
        });
        if !ok {
            continue;
        }
        let b = q[i] - a.iter().zip(xi.iter()).map(|(ac, xc)| ac * xc).sum::<f64>();
        pieces.push(AffinePiece { a, b });
    }
    if pieces.is_empty() {
        // Global fallback: a single plane through the topmost site.
        let top = (0..n).max_by(|&i, &j| q[i].partial_cmp(&q[j]).unwrap())?;
        let a = vec![-1.0; d];
        let b = q[top]
            - a.iter()
                .zip(points.row(top).iter())
                .map(|(ac, xc)| ac * xc)
                .sum::<f64>();
        pieces.push(AffinePiece { a, b });
    }
    let probes: Vec<Vec<f64>> = points.rows().into_iter().map(|r| r.to_vec()).collect();
    MaxAffineFn::new(pieces).ok().map(|f| f.simplified(&probes))
}

fn bbox_span(points: ArrayView2<'_, f64>) -> f64 {
    let d = points.ncols();
    let mut span = 0.0f64;
    for c in 0..d {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for r in points.rows() {
            lo = lo.min(r[c]);
            hi = hi.max(r[c]);
        }
        span = span.max(hi - lo);
    }
    span
}

/// Plain Nelder–Mead maximization for the Monte Carlo increasing path.
fn nelder_mead<F>(
    q: &mut Vec<f64>,
    objective: F,
    max_iters: usize,
    tol: f64,
) -> (Vec<f64>, f64, usize, bool)
where
    F: Fn(&[f64]) -> Option<f64>,
{
    let n = q.len();
    let score = |x: &[f64]| objective(x).unwrap_or(f64::NEG_INFINITY);
    let mut simplex: Vec<Vec<f64>> = vec![q.clone()];
    let spread = 0.1 * (1.0 + sup_norm(q));
    for i in 0..n {
        let mut v = q.clone();
        v[i] += spread;
        simplex.push(v);
    }
    let mut vals: Vec<f64> = simplex.iter().map(|v| score(v)).collect();
    let mut iters = 0;
    let mut converged = false;
    for it in 0..max_iters {
        iters = it + 1;
        let mut order: Vec<usize> = (0..simplex.len()).collect();
        order.sort_by(|&i, &j| vals[j].partial_cmp(&vals[i]).unwrap());
        let reorder: Vec<Vec<f64>> = order.iter().map(|&i| simplex[i].clone()).collect();
        let revals: Vec<f64> = order.iter().map(|&i| vals[i]).collect();
        simplex = reorder;
        vals = revals;
        if (vals[0] - vals[n]).abs() < tol * (1.0 + vals[0].abs()) {
            converged = true;
            break;
        }
        let centroid: Vec<f64> = (0..n)
            .map(|c| simplex[..n].iter().map(|v| v[c]).sum::<f64>() / n as f64)
            .collect();
        let worst = simplex[n].clone();
        let reflect: Vec<f64> =
            centroid.iter().zip(&worst).map(|(c, w)| c + (c - w)).collect();
        let rv = score(&reflect);
        if rv > vals[0] {
            let expand: Vec<f64> =
                centroid.iter().zip(&worst).map(|(c, w)| c + 2.0 * (c - w)).collect();
            let ev = score(&expand);
            if ev > rv {
                simplex[n] = expand;
                vals[n] = ev;
            } else {
                simplex[n] = reflect;
                vals[n] = rv;
            }
        } else if rv > vals[n - 1] {
            simplex[n] = reflect;
            vals[n] = rv;
        } else {
            let contract: Vec<f64> =
                centroid.iter().zip(&worst).map(|(c, w)| c + 0.5 * (w - c)).collect();
            let cv = score(&contract);
            if cv > vals[n] {
                simplex[n] = contract;
                vals[n] = cv;
            } else {
                for i in 1..=n {
                    let s0 = simplex[0].clone();
                    for (c, v) in simplex[i].iter_mut().enumerate() {
                        *v = s0[c] + 0.5 * (*v - s0[c]);
                    }
                    vals[i] = score(&simplex[i]);
                }
            }
        }
    }
    let mut best = 0;
    for i in 1..simplex.len() {
        if vals[i] > vals[best] {
            best = i;
        }
    }
    *q = simplex[best].clone();
    (simplex[best].clone(), vals[best], iters, converged)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::integrate::integrate_max_affine;
    use ndarray::array;

    #[test]
    fn existence_gate_examples() {
        let lc = Transformation::log_concave();
        let collinear = array![[0.0, 0.0], [1.0, 1.0], [2.0, 2.0]];
        assert_eq!(
            check_existence(&lc, collinear.view()),
            Err(ExistenceViolation::NotGeneralPosition)
        );

        let pc = Transformation::power_concave(2.0).unwrap();
        let one = array![[0.5]];
        assert_eq!(
            check_existence(&pc, one.view()),
            Err(ExistenceViolation::SampleTooSmall { n: 1, required: 2 })
        );

        let lv = Transformation::log_convex();
        let zeroed = array![[1.0, 0.0], [0.5, 1.0], [2.0, 2.0]];
        assert_eq!(
            check_existence(&lv, zeroed.view()),
            Err(ExistenceViolation::NotInPositiveOrthant { index: 0 })
        );
    }

    /// Constant-height candidates reduce the augmented objective to a
    /// one-parameter problem whose stationary point is the uniform height.
    #[test]
    fn objective_dec_constant_stationarity() {
        let t = Transformation::log_concave();
        let pts = array![[0.0, 0.0], [2.0, 0.1], [0.1, 2.0], [1.9, 1.8], [1.0, 0.9]];
        let zeros = vec![0.0; 5];
        let flat = PolyhedralFn::lower_convex_hull(pts.view(), &zeros).unwrap();
        let vol: f64 = flat.simplices().iter().map(|s| s.volume).sum();
        let c_star = t.h_inverse(1.0 / vol);
        let (_, grad) = objective_dec(&t, pts.view(), &vec![c_star; 5]).unwrap();
        let directional: f64 = grad.iter().sum();
        assert!(directional.abs() < 1e-8, "constant-direction derivative {directional}");

        // Off the optimum the constant-direction derivative matches the
        // finite difference of the one-parameter objective.
        let c = c_star + 0.3;
        let (v0, grad) = objective_dec(&t, pts.view(), &vec![c; 5]).unwrap();
        let h = 1e-6;
        let (vp, _) = objective_dec(&t, pts.view(), &vec![c + h; 5]).unwrap();
        let (vm, _) = objective_dec(&t, pts.view(), &vec![c - h; 5]).unwrap();
        let fd = (vp - vm) / (2.0 * h);
        let dir: f64 = grad.iter().sum();
        assert!((fd - dir).abs() < 1e-5, "fd {fd} vs analytic {dir}");
        assert!(vp < v0 || vm < v0);
    }

    #[test]
    fn uniform_fit_on_simplex_sample() {
        let t = Transformation::log_concave();
        let pts = array![[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]];
        let cfg = FitConfig::new(t);
        let fit = fit_decreasing(&t, pts.view(), &cfg).unwrap();
        assert!(fit.converged);
        // Uniform on a triangle of area 1/2: density 2, g ≡ -ln 2.
        let g = fit.estimate.eval(&[0.2, 0.2]);
        assert!((g - (0.5f64).ln().abs()).abs() < 1e-9 || (t.eval(g) - 2.0).abs() < 1e-9);
        assert!((fit.diagnostics.pre_normalization_integral - 1.0).abs() < 1e-9);
    }

    /// Three-point d=1 fit against a brute-force grid oracle over heights.
    #[test]
    fn fit_decreasing_matches_bruteforce_oracle() {
        let t = Transformation::log_concave();
        let pts = array![[-1.0], [0.0], [1.0]];
        let mut cfg = FitConfig::new(t);
        cfg.max_iters = 600;
        let fit = fit_decreasing(&t, pts.view(), &cfg).unwrap();
        assert!((fit.diagnostics.pre_normalization_integral - 1.0).abs() < 1e-6);

        // Oracle: optimize the augmented objective on a shrinking grid.
        let obj = |q: &[f64]| objective_dec(&t, pts.view(), q).map(|(v, _)| v).unwrap_or(-1e18);
        let mut best = (vec![0.0, 0.0, 0.0], f64::NEG_INFINITY);
        let mut center = vec![0.5, 0.0, 0.5];
        let mut width = 2.0f64;
        for _ in 0..12 {
            let steps = 9;
            let mut local_best = best.clone();
            for a in 0..steps {
                for b in 0..steps {
                    for c in 0..steps {
                        let q = vec![
                            center[0] - width + 2.0 * width * a as f64 / (steps - 1) as f64,
                            center[1] - width + 2.0 * width * b as f64 / (steps - 1) as f64,
                            center[2] - width + 2.0 * width * c as f64 / (steps - 1) as f64,
                        ];
                        let v = obj(&q);
                        if v > local_best.1 {
                            local_best = (q, v);
                        }
                    }
                }
            }
            best = local_best;
            center = best.0.clone();
            width *= 0.45;
        }
        let fitted_obj = fit.diagnostics.objective_trace.last().copied().unwrap();
        assert!(
            fitted_obj >= best.1 - 1e-4,
            "ascent {fitted_obj} vs oracle {}",
            best.1
        );
        // Knots are sample sites and the density integrates to one.
        match &fit.estimate {
            ConvexFn::Polyhedral(p) => {
                let total = integrate_poly(&t, p).unwrap();
                assert!((total - 1.0).abs() < 1e-9);
            }
            _ => panic!("decreasing fit must be polyhedral"),
        }
    }

    #[test]
    fn fit_refuses_bad_input() {
        let t = Transformation::log_concave();
        let pts = array![[0.0, 0.0], [1.0, 1.0], [2.0, 2.0], [3.0, 3.0]];
        let cfg = FitConfig::new(t);
        assert!(matches!(
            fit_decreasing(&t, pts.view(), &cfg),
            Err(MleError::Existence(ExistenceViolation::NotGeneralPosition))
        ));
        let tv = Transformation::log_convex();
        let cfgv = FitConfig::new(tv);
        let ptsv = array![[0.0], [1.0]];
        assert!(matches!(
            fit_increasing(&tv, ptsv.view(), &cfgv),
            Err(MleError::Existence(ExistenceViolation::NotInPositiveOrthant { .. }))
        ));
    }

    /// Two-point increasing fit against a 2-parameter brute-force oracle.
    #[test]
    fn fit_increasing_1d_matches_oracle() {
        let t = Transformation::power_convex(1.0).unwrap();
        let pts = array![[0.5], [1.0]];
        let mut cfg = FitConfig::new(t);
        cfg.max_iters = 800;
        let fit = fit_increasing(&t, pts.view(), &cfg).unwrap();
        let est = fit.estimate.as_max_affine().unwrap();
        assert!(est.slopes_negative());
        let total = integrate_max_affine(&t, est, 0, 0).unwrap().value;
        assert!((total - 1.0).abs() < 1e-9, "∫p̂ = {total}");

        // Brute force over (q1, q2) with the same augmented objective.
        let pts1 = array![[0.5], [1.0]];
        let obj = |q1: f64, q2: f64| -> f64 {
            let g = match MaxAffineFn::minimal_through(pts1.view(), &[q1, q2]) {
                Ok(g) => g,
                Err(_) => return f64::NEG_INFINITY,
            };
            let total = match integrate_max_affine(&t, &g, 0, 0) {
                Ok(e) => e.value,
                Err(_) => return f64::NEG_INFINITY,
            };
            0.5 * (t.log_eval(q1) + t.log_eval(q2)) - total + 1.0
        };
        let mut best = f64::NEG_INFINITY;
        let mut c = (1.0, 0.5);
        let mut w = 1.5;
        for _ in 0..14 {
            let mut local = (c, best);
            for a in 0..17 {
                for b in 0..17 {
                    let q1 = c.0 - w + 2.0 * w * a as f64 / 16.0;
                    let q2 = c.1 - w + 2.0 * w * b as f64 / 16.0;
                    let v = obj(q1, q2);
                    if v > local.1 {
                        local = ((q1, q2), v);
                    }
                }
            }
            c = local.0;
            best = local.1;
            w *= 0.5;
        }
        let fitted_obj = fit.diagnostics.objective_trace.last().copied().unwrap();
        assert!(fitted_obj >= best - 2e-3, "ascent {fitted_obj} vs oracle {best}");
    }

    /// Restart stability: perturbed initializations agree in objective.
    #[test]
    fn restart_objective_stability() {
        let t = Transformation::log_concave();
        let pts = array![[-1.2], [-0.4], [0.1], [0.6], [1.3], [2.0], [-2.1], [0.9]];
        let mut objs = Vec::new();
        for seed in 1..=5u64 {
            let mut cfg = FitConfig::new(t);
            cfg.seed = seed;
            cfg.max_iters = 900;
            cfg.grad_tol = 1e-9;
            let fit = fit_decreasing(&t, pts.view(), &cfg).unwrap();
            objs.push(fit.diagnostics.objective_trace.last().copied().unwrap());
        }
        let lo = objs.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = objs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        assert!(hi - lo < 1e-6, "restart objectives spread too wide: {objs:?}");
    }
}
