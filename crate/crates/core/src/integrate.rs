//! Exact and Monte Carlo integration of `h∘g` for polyhedral `g`.
//!
//! The exact route integrates `h` composed with an affine interpolant over
//! a simplex through divided differences of the repeated antiderivatives:
//!
//! ```text
//! ∫_S h(ℓ(x)) dx = d! · vol(S) · Δ[y_0, …, y_d] A_d
//! ```
//!
//! where `y_i` are the vertex values of `ℓ` and `A_d` is the `d`-th
//! tail-vanishing antiderivative of `h`. Divided differences over clustered
//! nodes are numerically catastrophic, so node spreads below a switch
//! threshold use a truncated expansion of the divided difference around the
//! mean node value (terms through order 8); wider spreads use either the
//! same expansion run to convergence or a confluent Newton table, whichever
//! is well conditioned for the node geometry.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::convexgeom::{ConvexFn, GeomError, LevelRegion, MaxAffineFn, McEstimate, PolyhedralFn};
use crate::rng::SeedStream;
use crate::scalar::Real;
use crate::transforms::{Direction, MonotoneTransform, TransformError, TransformKind};

/// Spread threshold below which the expansion is truncated at order 8
/// rather than run to convergence.
pub const TAYLOR_SWITCH: f64 = 1e-4;

/// Relative gap under which distinct nodes are coalesced into a confluent
/// tie before building a Newton table.
const CLUSTER_SNAP: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum IntegrateError {
    #[error("transform direction mismatch: expected a {expected:?} transformation")]
    InvalidDirection { expected: Direction },
    #[error("vertex value {value} sits at or beyond a limit point of h{}", fmt_simplex(*.simplex))]
    NonFinite { value: f64, simplex: Option<usize> },
    #[error("antiderivative unavailable: {0}")]
    Antiderivative(#[from] TransformError),
    #[error("geometry error: {0}")]
    Geometry(#[from] GeomError),
    #[error("normalization bracket failure: {0}")]
    BracketFailure(String),
    #[error("divergent integral: {0}")]
    Divergence(String),
    #[error("simplex {index}: {source}")]
    Simplex {
        index: usize,
        #[source]
        source: Box<IntegrateError>,
    },
}

fn fmt_simplex(ix: Option<usize>) -> String {
    match ix {
        Some(i) => format!(" (simplex {i})"),
        None => String::new(),
    }
}

/// How a per-simplex integral will be evaluated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum IntegralMethod {
    DividedDifference,
    Taylor,
    MonteCarlo,
}

/// Evaluation plan for one simplex: the transform, the affine interpolant's
/// vertex values, the simplex volume, and the chosen method.
#[derive(Debug, Clone)]
pub struct SimplexIntegralPlan<F: Real> {
    pub transform: MonotoneTransform<F>,
    pub vertex_values: Vec<F>,
    pub volume: F,
    pub method: IntegralMethod,
}

impl<F: Real> SimplexIntegralPlan<F> {
    /// Choose the method for the given node geometry. Falls back to Monte
    /// Carlo when the exact antiderivative is unavailable.
    pub fn new(
        transform: MonotoneTransform<F>,
        vertex_values: Vec<F>,
        volume: F,
    ) -> Result<Self, IntegrateError> {
        let d = vertex_values.len() - 1;
        validate_vertex_values(&transform, &vertex_values, None)?;
        let method = if transform.antideriv(d, probe_value(&transform, &vertex_values)).is_err() {
            IntegralMethod::MonteCarlo
        } else {
            let (lo, hi) = spread(&vertex_values);
            if (hi - lo).to_f64().unwrap() < TAYLOR_SWITCH {
                IntegralMethod::Taylor
            } else {
                IntegralMethod::DividedDifference
            }
        };
        Ok(SimplexIntegralPlan { transform, vertex_values, volume, method })
    }

    /// Execute the plan; `mc_budget`/`seed` are consulted only by the Monte
    /// Carlo branch.
    pub fn execute(&self, mc_budget: usize, seed: u64) -> Result<McEstimate, IntegrateError>
    where
        F: Real,
    {
        match self.method {
            IntegralMethod::MonteCarlo => {
                let vals: Vec<f64> =
                    self.vertex_values.iter().map(|v| v.to_f64().unwrap()).collect();
                // Only f64 Monte Carlo is provided; lower precisions go
                // through the same path.
                let t64 = retype_f64(&self.transform);
                Ok(simplex_integral_mc(&t64, &vals, self.volume.to_f64().unwrap(), mc_budget, seed))
            }
            _ => {
                let v = simplex_integral(&self.transform, &self.vertex_values, self.volume)?;
                Ok(McEstimate { value: v.to_f64().unwrap(), std_error: 0.0 })
            }
        }
    }
}

fn retype_f64<F: Real>(t: &MonotoneTransform<F>) -> MonotoneTransform<f64> {
    match t.kind() {
        TransformKind::LogConcave => MonotoneTransform::log_concave(),
        TransformKind::LogConvex => MonotoneTransform::log_convex(),
        TransformKind::PowerConcave(s) => {
            MonotoneTransform::power_concave(s.to_f64().unwrap()).unwrap()
        }
        TransformKind::PowerConvex(s) => {
            MonotoneTransform::power_convex(s.to_f64().unwrap()).unwrap()
        }
    }
}

fn spread<F: Real>(values: &[F]) -> (F, F) {
    let mut lo = values[0];
    let mut hi = values[0];
    for &v in values {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    (lo, hi)
}

fn probe_value<F: Real>(t: &MonotoneTransform<F>, values: &[F]) -> F {
    match t.kind() {
        TransformKind::PowerConvex(_) => {
            let (_, hi) = spread(values);
            if hi > F::zero() {
                hi
            } else {
                F::one()
            }
        }
        _ => values[0],
    }
}

fn validate_vertex_values<F: Real>(
    t: &MonotoneTransform<F>,
    values: &[F],
    simplex: Option<usize>,
) -> Result<(), IntegrateError> {
    for &v in values {
        let bad = !v.is_finite()
            || match t.kind() {
                // h(y) = +∞ at and below the pole.
                TransformKind::PowerConcave(_) => v <= F::zero(),
                _ => false,
            };
        if bad {
            return Err(IntegrateError::NonFinite {
                value: v.to_f64().unwrap_or(f64::NAN),
                simplex,
            });
        }
    }
    Ok(())
}

/// Exact integral of `h∘ℓ` over a simplex with the given vertex values and
/// volume: `d!·V·Δ[y_0..y_d]A_d`.
pub fn simplex_integral<F: Real>(
    t: &MonotoneTransform<F>,
    vertex_values: &[F],
    volume: F,
) -> Result<F, IntegrateError> {
    let d = vertex_values.len() - 1;
    if d == 0 {
        validate_vertex_values(t, vertex_values, None)?;
        return Ok(volume * t.eval(vertex_values[0]));
    }
    validate_vertex_values(t, vertex_values, None)?;
    let dd = dd_eval(t, d, vertex_values)?;
    let mut fact = F::one();
    for i in 2..=d {
        fact = fact * F::of_usize(i);
    }
    Ok(fact * volume * dd)
}

/// Monte Carlo counterpart of [`simplex_integral`]: uniform barycentric
/// (Dirichlet) sampling, independent of the divided-difference route.
pub fn simplex_integral_mc(
    t: &MonotoneTransform<f64>,
    vertex_values: &[f64],
    volume: f64,
    mc_budget: usize,
    seed: u64,
) -> McEstimate {
    let m = vertex_values.len();
    let mut stream = SeedStream::new(seed, "simplex-mc");
    let mut sum = 0.0;
    let mut sumsq = 0.0;
    let mut e = vec![0.0; m];
    for _ in 0..mc_budget {
        let mut tot = 0.0;
        for ei in e.iter_mut() {
            *ei = -(1.0 - stream.next_f64()).ln();
            tot += *ei;
        }
        let y: f64 = e.iter().zip(vertex_values).map(|(ei, v)| ei / tot * v).sum();
        let val = t.eval(y);
        sum += val;
        sumsq += val * val;
    }
    let n = mc_budget as f64;
    let mean = sum / n;
    let var = (sumsq / n - mean * mean).max(0.0);
    McEstimate { value: volume * mean, std_error: volume * (var / n).sqrt() }
}

/// Divided difference `Δ[nodes] A_k` of order `nodes.len() − 1`, which may
/// exceed `k` (derivatives of `h` then enter the confluent columns).
pub(crate) fn dd_eval<F: Real>(
    t: &MonotoneTransform<F>,
    k: usize,
    nodes: &[F],
) -> Result<F, IntegrateError> {
    let order = nodes.len() - 1;
    let mut ys: Vec<F> = nodes.to_vec();
    ys.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let (lo, hi) = (ys[0], ys[order]);
    let sigma = hi - lo;

    // Coalesce nearly-equal nodes into exact ties.
    let snap = F::of(CLUSTER_SNAP) * (F::one() + hi.abs().max(lo.abs()));
    let mut i = 0;
    while i < ys.len() {
        let mut j = i + 1;
        while j < ys.len() && ys[j] - ys[i] <= snap {
            j += 1;
        }
        let snap_to = ys[i];
        for v in ys.iter_mut().take(j).skip(i + 1) {
            *v = snap_to;
        }
        i = j;
    }

    if sigma == F::zero() {
        let mut fact = F::one();
        for m in 2..=order {
            fact = fact * F::of_usize(m);
        }
        return Ok(a_deriv(t, k, order, ys[0])? / fact);
    }

    let analytic_ok = match t.kind() {
        TransformKind::LogConcave | TransformKind::LogConvex => true,
        // Power kinds are analytic away from the pole at 0.
        TransformKind::PowerConcave(_) | TransformKind::PowerConvex(_) => lo > F::zero(),
    };
    let radius_ok = match t.kind() {
        TransformKind::LogConcave | TransformKind::LogConvex => sigma <= F::of(0.5),
        TransformKind::PowerConcave(_) | TransformKind::PowerConvex(_) => {
            sigma <= F::of(0.5) * lo
        }
    };

    if sigma.to_f64().unwrap() < TAYLOR_SWITCH && analytic_ok {
        dd_series(t, k, &ys, 8)
    } else if analytic_ok && radius_ok {
        dd_series(t, k, &ys, 64)
    } else {
        dd_table(t, k, &ys)
    }
}

/// Expansion of the divided difference around the mean node value:
/// `Δ[y]A_k = Σ_m A_k^{(order+m)}(ȳ) · e_m(δ) / (order+m)!` with `e_m` the
/// complete homogeneous symmetric polynomial of the centered nodes.
fn dd_series<F: Real>(
    t: &MonotoneTransform<F>,
    k: usize,
    ys: &[F],
    max_terms: usize,
) -> Result<F, IntegrateError> {
    let order = ys.len() - 1;
    let nvars = ys.len();
    let mut mean = F::zero();
    for &y in ys {
        mean = mean + y;
    }
    mean = mean / F::of_usize(nvars);
    let delta: Vec<F> = ys.iter().map(|&y| y - mean).collect();

    // Complete homogeneous symmetric polynomials via the standard
    // variable-by-variable recurrence.
    let mut homog = vec![F::zero(); max_terms + 1];
    homog[0] = F::one();
    for &dv in &delta {
        for m in 1..=max_terms {
            let prev = homog[m - 1];
            homog[m] = homog[m] + dv * prev;
        }
    }

    let mut fact = F::one();
    for m in 2..=order {
        fact = fact * F::of_usize(m);
    }
    let mut acc = F::zero();
    let mut calm = 0;
    for m in 0..=max_terms {
        if m > 0 {
            fact = fact * F::of_usize(order + m);
        }
        let term = a_deriv(t, k, order + m, mean)? * homog[m] / fact;
        acc = acc + term;
        if term.abs() <= F::of(1e-17) * acc.abs().max(F::of(1e-300)) {
            calm += 1;
            if calm >= 3 {
                break;
            }
        } else {
            calm = 0;
        }
    }
    Ok(acc)
}

/// Confluent Newton divided-difference table (exact ties use derivative
/// columns).
fn dd_table<F: Real>(
    t: &MonotoneTransform<F>,
    k: usize,
    ys: &[F],
) -> Result<F, IntegrateError> {
    let n = ys.len();
    let mut col: Vec<F> = Vec::with_capacity(n);
    for &y in ys {
        col.push(a_deriv(t, k, 0, y)?);
    }
    let mut fact = F::one();
    for j in 1..n {
        fact = fact * F::of_usize(j);
        // After this pass col[i] = Δ[y_i..y_{i+j}].
        let mut next = vec![F::zero(); n - j];
        for i in 0..n - j {
            let dy = ys[i + j] - ys[i];
            next[i] = if dy == F::zero() {
                a_deriv(t, k, j, ys[i])? / fact
            } else {
                (col[i + 1] - col[i]) / dy
            };
        }
        col = next;
    }
    Ok(col[0])
}

/// `j`-th derivative of the `k`-th antiderivative: `A_{k−j}` for `j ≤ k`,
/// `h^{(j−k)}` beyond.
fn a_deriv<F: Real>(
    t: &MonotoneTransform<F>,
    k: usize,
    j: usize,
    y: F,
) -> Result<F, IntegrateError> {
    if j <= k {
        Ok(t.antideriv(k - j, y)?)
    } else {
        Ok(t.deriv_m(j - k, y)?)
    }
}

/// Exact integral `∫ h∘f dx` over `conv(X)` for a decreasing transform.
pub fn integrate_poly(
    t: &MonotoneTransform<f64>,
    f: &PolyhedralFn,
) -> Result<f64, IntegrateError> {
    integrate_poly_shifted(t, f, 0.0)
}

/// As [`integrate_poly`] with all heights shifted by `c` (no copy).
pub fn integrate_poly_shifted(
    t: &MonotoneTransform<f64>,
    f: &PolyhedralFn,
    c: f64,
) -> Result<f64, IntegrateError> {
    if t.direction() != Direction::Decreasing {
        return Err(IntegrateError::InvalidDirection { expected: Direction::Decreasing });
    }
    let heights = f.heights();
    let mut parts = Vec::with_capacity(f.simplices().len());
    for (ix, s) in f.simplices().iter().enumerate() {
        if s.volume == 0.0 {
            parts.push(0.0);
            continue;
        }
        let vals: Vec<f64> = s.vertices.iter().map(|&v| heights[v] + c).collect();
        let part = simplex_integral(t, &vals, s.volume)
            .map_err(|e| IntegrateError::Simplex { index: ix, source: Box::new(e) })?;
        parts.push(part);
    }
    Ok(pairwise_sum(&parts))
}

/// Deterministic pairwise (tree) reduction.
pub(crate) fn pairwise_sum(v: &[f64]) -> f64 {
    match v.len() {
        0 => 0.0,
        1 => v[0],
        n => {
            let mid = n / 2;
            pairwise_sum(&v[..mid]) + pairwise_sum(&v[mid..])
        }
    }
}

/// Integral of `h∘f` over the nonnegative orthant for an increasing
/// transform: exact via the kink decomposition for `d = 1`, importance /
/// bounded-support Monte Carlo for `d ≥ 2`.
pub fn integrate_max_affine(
    t: &MonotoneTransform<f64>,
    f: &MaxAffineFn,
    mc_budget: usize,
    seed: u64,
) -> Result<McEstimate, IntegrateError> {
    integrate_max_affine_shifted(t, f, 0.0, mc_budget, seed)
}

pub fn integrate_max_affine_shifted(
    t: &MonotoneTransform<f64>,
    f: &MaxAffineFn,
    c: f64,
    mc_budget: usize,
    seed: u64,
) -> Result<McEstimate, IntegrateError> {
    if t.direction() != Direction::Increasing {
        return Err(IntegrateError::InvalidDirection { expected: Direction::Increasing });
    }
    if !f.slopes_negative() {
        return Err(IntegrateError::Divergence(
            "a slope coordinate is nonnegative; h∘g is not integrable on the orthant".into(),
        ));
    }
    let top = f.value_at_origin() + c;
    if !(top < t.y_inf()) {
        return Err(IntegrateError::Divergence(format!(
            "g(0) = {top} must stay below y∞ = {}",
            t.y_inf()
        )));
    }
    if f.dim() == 1 {
        return Ok(McEstimate { value: max_affine_exact_1d(t, f, c)?, std_error: 0.0 });
    }
    match t.kind() {
        TransformKind::LogConvex => Ok(log_convex_importance(t, f, c, mc_budget, seed)),
        TransformKind::PowerConvex(_) => Ok(power_convex_box_mc(t, f, c, mc_budget, seed)),
        _ => unreachable!("increasing kinds only"),
    }
}

/// Exact piecewise closed form over the upper envelope, including the
/// infinite tail (the tail-vanishing antiderivative absorbs it).
fn max_affine_exact_1d(
    t: &MonotoneTransform<f64>,
    f: &MaxAffineFn,
    c: f64,
) -> Result<f64, IntegrateError> {
    // Upper envelope of lines by the monotone-stack construction; slopes
    // ascending, breaking b-ties toward the higher offset.
    let mut pieces: Vec<(f64, f64)> = f.pieces().iter().map(|p| (p.a[0], p.b + c)).collect();
    pieces.sort_by(|x, y| x.0.partial_cmp(&y.0).unwrap().then(y.1.partial_cmp(&x.1).unwrap()));
    pieces.dedup_by(|nx, head| {
        if nx.0 == head.0 {
            true // same slope: keep the first (higher b)
        } else {
            false
        }
    });
    let mut env: Vec<(f64, f64, f64)> = Vec::new(); // (a, b, x_from)
    for &(a, b) in &pieces {
        let mut x_from = 0.0;
        while let Some(&(ta, tb, tx)) = env.last() {
            // Intersection with the stack top; the steeper line loses
            // beyond it.
            let xi = (tb - b) / (a - ta);
            if xi <= tx {
                env.pop();
            } else {
                x_from = xi;
                break;
            }
        }
        if env.is_empty() {
            x_from = 0.0;
        }
        if x_from >= 0.0 {
            env.push((a, b, x_from.max(0.0)));
        } else {
            env.push((a, b, 0.0));
        }
    }
    // Remove pieces whose interval collapsed onto a later start.
    let mut total = 0.0;
    for i in 0..env.len() {
        let (a, b, x0) = env[i];
        let y0 = a * x0 + b;
        let upper = if i + 1 < env.len() {
            let x1 = env[i + 1].2;
            Some(a * x1 + b)
        } else {
            None
        };
        let a1_low = match upper {
            Some(y1) => t.antideriv(1, y1)?,
            None => 0.0, // A_1 vanishes along the h→0 tail
        };
        total += (a1_low - t.antideriv(1, y0)?) / a;
    }
    Ok(total)
}

/// Importance sampling from the separable law of the dominant piece.
fn log_convex_importance(
    t: &MonotoneTransform<f64>,
    f: &MaxAffineFn,
    c: f64,
    mc_budget: usize,
    seed: u64,
) -> McEstimate {
    let d = f.dim();
    let dominant = f
        .pieces()
        .iter()
        .max_by(|p, q| p.b.partial_cmp(&q.b).unwrap())
        .expect("nonempty pieces");
    let rates: Vec<f64> = dominant.a.iter().map(|&a| -a).collect();
    let log_norm: f64 = rates.iter().map(|r| r.ln()).sum();
    let mut stream = SeedStream::new(seed, "logconvex-importance");
    let mut sum = 0.0;
    let mut sumsq = 0.0;
    let mut x = vec![0.0; d];
    for _ in 0..mc_budget {
        for (j, xj) in x.iter_mut().enumerate() {
            *xj = -(1.0 - stream.next_f64()).ln() / rates[j];
        }
        let g = f.eval(&x) + c;
        let log_q: f64 =
            log_norm + x.iter().zip(&rates).map(|(xi, r)| -r * xi).sum::<f64>();
        let w = (t.log_eval(g) - log_q).exp();
        sum += w;
        sumsq += w * w;
    }
    let n = mc_budget as f64;
    let mean = sum / n;
    let var = (sumsq / n - mean * mean).max(0.0);
    McEstimate { value: mean, std_error: (var / n).sqrt() }
}

/// The power-convex integrand has bounded support `{g > 0}`; uniform
/// sampling over its bounding box is exact-in-expectation.
fn power_convex_box_mc(
    t: &MonotoneTransform<f64>,
    f: &MaxAffineFn,
    c: f64,
    mc_budget: usize,
    seed: u64,
) -> McEstimate {
    let d = f.dim();
    let mut r = vec![0.0f64; d];
    for p in f.pieces() {
        let b = p.b + c;
        if b > 0.0 {
            for j in 0..d {
                r[j] = r[j].max(-b / p.a[j]);
            }
        }
    }
    let box_vol: f64 = r.iter().product();
    if box_vol == 0.0 {
        return McEstimate { value: 0.0, std_error: 0.0 };
    }
    let mut stream = SeedStream::new(seed, "powerconvex-box");
    let mut sum = 0.0;
    let mut sumsq = 0.0;
    let mut x = vec![0.0; d];
    for _ in 0..mc_budget {
        for (j, xj) in x.iter_mut().enumerate() {
            *xj = r[j] * stream.next_f64();
        }
        let v = t.eval(f.eval(&x) + c);
        sum += v;
        sumsq += v * v;
    }
    let n = mc_budget as f64;
    let mean = sum / n;
    let var = (sumsq / n - mean * mean).max(0.0);
    McEstimate { value: box_vol * mean, std_error: box_vol * (var / n).sqrt() }
}

/// Layer-cake estimate with its standard error and a grid-resolution flag.
#[derive(Debug, Clone, Copy)]
pub struct LayerCakeEstimate {
    pub value: f64,
    pub std_error: f64,
    /// Set when `h'` varies by more than 10³ across an adjacent grid cell.
    pub grid_warning: bool,
}

/// Layer-cake evaluation of the region integral through sublevel-set
/// measures on a grid plus trapezoid quadrature; an independent cross-check
/// of the divided-difference route.
///
/// Decreasing transforms evaluate `∫_{(lev_a g)^c} h∘g dx`; increasing ones
/// evaluate `∫_{lev_a g} h∘g dx`.
pub fn layer_cake_integral(
    t: &MonotoneTransform<f64>,
    f: &ConvexFn,
    a: f64,
    mc_budget: usize,
    seed: u64,
) -> Result<LayerCakeEstimate, IntegrateError> {
    const GRID: usize = 160;
    match (t.direction(), f) {
        (Direction::Decreasing, ConvexFn::Polyhedral(p)) => {
            let y_max = p.max_value();
            if a >= y_max {
                return Ok(LayerCakeEstimate { value: 0.0, std_error: 0.0, grid_warning: false });
            }
            let lo = a.max(p.min_value());
            let budget = (mc_budget / (GRID + 1)).max(10_000);
            let mu_a = p.sublevel_measure(lo, LevelRegion::Sublevel, budget, seed)?;
            let mut integrand = Vec::with_capacity(GRID + 1);
            let mut ses = Vec::with_capacity(GRID + 1);
            let mut derivs = Vec::with_capacity(GRID + 1);
            let mut mu_top = mu_a;
            for i in 0..=GRID {
                let y = lo + (y_max - lo) * i as f64 / GRID as f64;
                let m = p.sublevel_measure(y, LevelRegion::Sublevel, budget, seed)?;
                let hp = t.deriv(y).unwrap_or(0.0);
                integrand.push(-hp * (m.value - mu_a.value).max(0.0));
                ses.push(hp.abs() * (m.std_error + mu_a.std_error));
                derivs.push(hp.abs());
                mu_top = m;
            }
            let mut est = trapezoid(&integrand, &ses, &derivs, (y_max - lo) / GRID as f64);
            // Beyond max g the sublevel measure saturates at μ[conv(X)],
            // so the remaining tail −∫_{y_max}^∞ h'(y)·(μ_tot − μ_a) dy is
            // exactly h(y_max)·(μ_tot − μ_a).
            let tail = t.eval(y_max) * (mu_top.value - mu_a.value).max(0.0);
            est.value += tail;
            est.std_error = (est.std_error.powi(2)
                + (t.eval(y_max) * (mu_top.std_error + mu_a.std_error)).powi(2))
            .sqrt();
            Ok(est)
        }
        (Direction::Increasing, ConvexFn::MaxAffine(m)) => {
            let y_lo = match t.kind() {
                TransformKind::PowerConvex(_) => 0.0,
                _ => a - 50.0,
            };
            if a <= y_lo {
                return Ok(LayerCakeEstimate { value: 0.0, std_error: 0.0, grid_warning: false });
            }
            let budget = (mc_budget / (GRID + 1)).max(10_000);
            let c_a = m.sublevel_measure(a, LevelRegion::Superlevel, budget, seed)?;
            let mut integrand = Vec::with_capacity(GRID + 1);
            let mut ses = Vec::with_capacity(GRID + 1);
            let mut derivs = Vec::with_capacity(GRID + 1);
            for i in 0..=GRID {
                let y = y_lo + (a - y_lo) * i as f64 / GRID as f64;
                let cm = m.sublevel_measure(y, LevelRegion::Superlevel, budget, seed)?;
                let hp = t.deriv(y).unwrap_or(0.0);
                integrand.push(hp * (cm.value - c_a.value).max(0.0));
                ses.push(hp.abs() * (cm.std_error + c_a.std_error));
                derivs.push(hp.abs());
            }
            Ok(trapezoid(&integrand, &ses, &derivs, (a - y_lo) / GRID as f64))
        }
        (expected, _) => Err(IntegrateError::InvalidDirection { expected }),
    }
}

fn trapezoid(vals: &[f64], ses: &[f64], derivs: &[f64], h: f64) -> LayerCakeEstimate {
    let n = vals.len();
    let mut acc = 0.0;
    let mut se2 = 0.0;
    let mut warn = false;
    for i in 0..n {
        let w = if i == 0 || i == n - 1 { 0.5 } else { 1.0 };
        acc += w * vals[i] * h;
        se2 += (w * ses[i] * h).powi(2);
        if i > 0 {
            let (a, b) = (derivs[i - 1].max(1e-300), derivs[i].max(1e-300));
            if a / b > 1e3 || b / a > 1e3 {
                warn = true;
            }
        }
    }
    LayerCakeEstimate { value: acc, std_error: se2.sqrt(), grid_warning: warn }
}

/// Solve `T(c) = ∫ h∘(f + c) dx = 1` for the shift `c` by geometric
/// bracketing plus bisection on the monotone map `T`, and return the
/// shifted function. Default tolerance `1e-10`.
pub fn normalize(
    t: &MonotoneTransform<f64>,
    f: &ConvexFn,
) -> Result<(ConvexFn, f64), IntegrateError> {
    normalize_with(t, f, 1e-10, 400_000, 0x6e6f726d)
}

/// [`normalize`] with explicit tolerance and Monte Carlo parameters (used
/// by the `d ≥ 2` increasing path, where `T` is itself a fixed-seed Monte
/// Carlo estimate and the result is normalized self-consistently).
pub fn normalize_with(
    t: &MonotoneTransform<f64>,
    f: &ConvexFn,
    tol: f64,
    mc_budget: usize,
    seed: u64,
) -> Result<(ConvexFn, f64), IntegrateError> {
    let eval_t = |c: f64| -> Result<f64, IntegrateError> {
        match f {
            ConvexFn::Polyhedral(p) => integrate_poly_shifted(t, p, c),
            ConvexFn::MaxAffine(m) => {
                Ok(integrate_max_affine_shifted(t, m, c, mc_budget, seed)?.value)
            }
        }
    };
    // h decreasing: T decreases in c; increasing: T increases.
    let rising = t.direction() == Direction::Increasing;
    let t0 = match eval_t(0.0) {
        Ok(v) => v,
        Err(IntegrateError::NonFinite { .. }) => f64::INFINITY,
        Err(e) => return Err(e),
    };
    if !t0.is_finite() && rising {
        return Err(IntegrateError::BracketFailure(
            "integral already divergent at c = 0 for an increasing transform".into(),
        ));
    }
    if (t0 - 1.0).abs() <= tol {
        return Ok((f.clone(), 0.0));
    }
    // Decide which side of 0 the root lies on.
    let need_larger_t = t0 < 1.0;
    let go_positive = need_larger_t == rising;
    let mut step = 1.0;
    let mut lo = 0.0;
    let mut hi = 0.0;
    let mut bracketed = false;
    for _ in 0..200 {
        let c = if go_positive { step } else { -step };
        let tc = match eval_t(c) {
            Ok(v) => v,
            // Hitting the divergent side still brackets the root.
            Err(IntegrateError::NonFinite { .. }) | Err(IntegrateError::Divergence(_)) => {
                f64::INFINITY
            }
            Err(e) => return Err(e),
        };
        let crossed = if need_larger_t { tc >= 1.0 } else { tc <= 1.0 };
        if crossed {
            if go_positive {
                lo = c - step;
                hi = c;
            } else {
                lo = c;
                hi = c + step;
            }
            bracketed = true;
            break;
        }
        step *= 2.0;
    }
    if !bracketed {
        return Err(IntegrateError::BracketFailure(format!(
            "T(c) never crossed 1 after 200 geometric expansions (T(0) = {t0})"
        )));
    }
    // lo/hi as stored bracket the crossing; orient by T value.
    let mut a = lo;
    let mut b = hi;
    let mut best_c = 0.0;
    let mut best_gap = (t0 - 1.0).abs();
    for _ in 0..200 {
        let mid = 0.5 * (a + b);
        let tm = match eval_t(mid) {
            Ok(v) => v,
            Err(IntegrateError::NonFinite { .. }) | Err(IntegrateError::Divergence(_)) => {
                f64::INFINITY
            }
            Err(e) => return Err(e),
        };
        let gap = (tm - 1.0).abs();
        if gap < best_gap {
            best_gap = gap;
            best_c = mid;
        }
        if gap <= tol {
            return Ok((f.shift(mid), mid));
        }
        let mid_high = tm > 1.0;
        // Keep the sub-interval containing the crossing.
        if mid_high == rising {
            // T(mid) > 1 and T rising (or < 1 and falling): root below mid.
            b = mid;
        } else {
            a = mid;
        }
        if (b - a).abs() < 1e-15 * (1.0 + mid.abs()) {
            break;
        }
    }
    if best_gap <= 1e-6 {
        // Monte Carlo T: accept the best self-consistent shift.
        return Ok((f.shift(best_c), best_c));
    }
    Err(IntegrateError::BracketFailure(format!(
        "bisection stalled with |T−1| = {best_gap:.3e}"
    )))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::convexgeom::AffinePiece;
    use ndarray::array;

    type T = MonotoneTransform<f64>;

    #[test]
    fn simplex_integral_1d_exponential() {
        let v = simplex_integral(&T::log_concave(), &[0.0, 1.0], 1.0).unwrap();
        assert!((v - (1.0 - (-1.0f64).exp())).abs() < 1e-14);
    }

    #[test]
    fn simplex_integral_2d_repeated_node() {
        // Iterated-integral oracle: ∫₀¹ t·e^{-t} dt = 1 − 2e⁻¹.
        let v = simplex_integral(&T::log_concave(), &[0.0, 1.0, 1.0], 0.5).unwrap();
        assert!((v - (1.0 - 2.0 * (-1.0f64).exp())).abs() < 1e-10, "got {v}");
    }

    #[test]
    fn simplex_integral_constant_values() {
        for t in [T::log_concave(), T::power_concave(4.0).unwrap()] {
            let v = simplex_integral(&t, &[1.3, 1.3, 1.3], 0.7).unwrap();
            assert!((v - 0.7 * t.eval(1.3)).abs() < 1e-14);
        }
    }

    #[test]
    fn simplex_integral_rejects_limit_values() {
        let t = T::power_concave(4.0).unwrap();
        assert!(matches!(
            simplex_integral(&t, &[0.0, 1.0], 1.0),
            Err(IntegrateError::NonFinite { .. })
        ));
        assert!(matches!(
            simplex_integral(&T::log_concave(), &[f64::INFINITY, 1.0], 1.0),
            Err(IntegrateError::NonFinite { .. })
        ));
    }

    #[test]
    fn power_convex_handles_negative_values_exactly() {
        // h(y) = y₊ over ℓ running linearly from −1 to 1 on a length-2
        // interval: only the positive half contributes, area 1/2.
        let t = T::power_convex(1.0).unwrap();
        let v = simplex_integral(&t, &[-1.0, 1.0], 2.0).unwrap();
        assert!((v - 0.5).abs() < 1e-12, "got {v}");
    }

    #[test]
    fn divided_difference_matches_mc() {
        let cases: Vec<(T, Vec<f64>)> = vec![
            (T::log_concave(), vec![0.2, 1.7]),
            (T::log_concave(), vec![0.0, 0.4, 2.0, 3.1]),
            (T::power_concave(5.0).unwrap(), vec![0.8, 1.1, 2.4]),
            (T::log_convex(), vec![-2.0, -0.5, 0.3]),
            (T::power_convex(2.5).unwrap(), vec![0.4, 1.9, 2.2, 3.0]),
            (T::power_convex(1.0).unwrap(), vec![-0.5, 0.7, 1.4]),
        ];
        for (t, vals) in cases {
            let exact = simplex_integral(&t, &vals, 1.0).unwrap();
            let mc = simplex_integral_mc(&t, &vals, 1.0, 400_000, 11);
            assert!(
                (exact - mc.value).abs() <= 4.0 * mc.std_error + 1e-3 * exact.abs(),
                "{t}: exact {exact} vs mc {} ± {}",
                mc.value,
                mc.std_error
            );
        }
    }

    /// No seam between the truncated and full expansions around the switch
    /// threshold.
    #[test]
    fn taylor_and_divided_difference_agree_at_seam() {
        for t in [
            T::log_concave(),
            T::power_concave(6.0).unwrap(),
            T::log_convex(),
            T::power_convex(1.7).unwrap(),
        ] {
            for scale in [0.5, 1.0, 2.0] {
                let sigma = scale * TAYLOR_SWITCH;
                for d in 1..=3usize {
                    let base = 1.25;
                    let vals: Vec<f64> =
                        (0..=d).map(|i| base + sigma * i as f64 / d as f64).collect();
                    let short = dd_series(&t, d, &vals, 8).unwrap();
                    let long = dd_eval(&t, d, &vals).unwrap();
                    assert!(
                        (short - long).abs() <= 1e-8 * long.abs().max(1e-300),
                        "{t} d={d} sigma={sigma}: {short} vs {long}"
                    );
                }
            }
        }
    }

    #[test]
    fn integrate_poly_v_shape() {
        let pts = array![[-2.0], [0.0], [2.0]];
        let f = PolyhedralFn::lower_convex_hull(pts.view(), &[2.0, 0.0, 2.0]).unwrap();
        let v = integrate_poly(&T::log_concave(), &f).unwrap();
        let expect = 2.0 * (1.0 - (-2.0f64).exp());
        assert!((v - expect).abs() < 1e-12, "got {v} want {expect}");
        // Quadrature oracle.
        let n = 200_000;
        let mut acc = 0.0;
        for i in 0..n {
            let x = -2.0 + 4.0 * (i as f64 + 0.5) / n as f64;
            acc += (-(x.abs())).exp() * 4.0 / n as f64;
        }
        assert!((v - acc).abs() < 1e-4);
    }

    #[test]
    fn integrate_poly_requires_decreasing() {
        let pts = array![[0.0], [1.0]];
        let f = PolyhedralFn::lower_convex_hull(pts.view(), &[0.0, 1.0]).unwrap();
        assert!(matches!(
            integrate_poly(&T::log_convex(), &f),
            Err(IntegrateError::InvalidDirection { .. })
        ));
    }

    #[test]
    fn integrate_poly_pole_height_errors() {
        let pts = array![[0.0], [1.0]];
        let f = PolyhedralFn::lower_convex_hull(pts.view(), &[0.0, 1.0]).unwrap();
        let t = T::power_concave(3.0).unwrap();
        let err = integrate_poly(&t, &f).unwrap_err();
        assert!(matches!(err, IntegrateError::Simplex { .. }), "{err}");
    }

    #[test]
    fn max_affine_exact_values() {
        let t = T::log_convex();
        let f = MaxAffineFn::new(vec![AffinePiece { a: vec![-1.0], b: 0.0 }]).unwrap();
        let est = integrate_max_affine(&t, &f, 0, 0).unwrap();
        assert!((est.value - 1.0).abs() < 1e-14);
        assert_eq!(est.std_error, 0.0);

        let t = T::power_convex(1.0).unwrap();
        let f = MaxAffineFn::new(vec![AffinePiece { a: vec![-1.0], b: 1.0 }]).unwrap();
        let est = integrate_max_affine(&t, &f, 0, 0).unwrap();
        assert!((est.value - 0.5).abs() < 1e-14);
    }

    #[test]
    fn max_affine_exact_with_kinks() {
        // g = max(−2x + 1, −x + 0.5): ∫ e^{g} dx matches fine quadrature.
        let t = T::log_convex();
        let f = MaxAffineFn::new(vec![
            AffinePiece { a: vec![-2.0], b: 1.0 },
            AffinePiece { a: vec![-1.0], b: 0.5 },
        ])
        .unwrap();
        let est = integrate_max_affine(&t, &f, 0, 0).unwrap();
        let n = 400_000;
        let width = 60.0;
        let mut acc = 0.0;
        for i in 0..n {
            let x = width * (i as f64 + 0.5) / n as f64;
            acc += ((-2.0 * x + 1.0f64).max(-x + 0.5)).exp() * width / n as f64;
        }
        assert!((est.value - acc).abs() < 1e-4, "exact {} vs quad {acc}", est.value);
    }

    #[test]
    fn max_affine_mc_2d_product_oracle() {
        let t = T::log_convex();
        let f = MaxAffineFn::new(vec![AffinePiece { a: vec![-1.0, -1.0], b: 0.0 }]).unwrap();
        let est = integrate_max_affine(&t, &f, 200_000, 5).unwrap();
        assert!((est.value - 1.0).abs() <= 3.0 * est.std_error.max(1e-12) + 5e-3);
    }

    #[test]
    fn max_affine_divergence_guard() {
        let t = T::log_convex();
        let f = MaxAffineFn::new(vec![AffinePiece { a: vec![0.5], b: 0.0 }]).unwrap();
        assert!(matches!(
            integrate_max_affine(&t, &f, 1000, 0),
            Err(IntegrateError::Divergence(_))
        ));
    }

    #[test]
    fn layer_cake_matches_exact_on_v_shape() {
        let pts = array![[-2.0], [0.0], [2.0]];
        let f = PolyhedralFn::lower_convex_hull(pts.view(), &[2.0, 0.0, 2.0]).unwrap();
        let t = T::log_concave();
        let exact = integrate_poly(&t, &f).unwrap();
        let lc =
            layer_cake_integral(&t, &ConvexFn::Polyhedral(f.clone()), 0.0, 4_000_000, 3).unwrap();
        assert!(
            (lc.value - exact).abs() <= 3.0 * lc.std_error + 0.01 * exact,
            "layer-cake {} ± {} vs exact {exact}",
            lc.value,
            lc.std_error
        );
        // Region empty when a exceeds the maximum.
        let empty =
            layer_cake_integral(&t, &ConvexFn::Polyhedral(f), 5.0, 1_000_000, 3).unwrap();
        assert_eq!(empty.value, 0.0);
    }

    #[test]
    fn layer_cake_max_affine_tail() {
        // Single log-convex piece, a = b: lev_a g is the whole orthant and
        // the layer cake reproduces the full exact integral.
        let t = T::log_convex();
        let f = MaxAffineFn::new(vec![AffinePiece { a: vec![-1.0], b: 0.3 }]).unwrap();
        let exact = integrate_max_affine(&t, &f, 0, 0).unwrap().value;
        let lc =
            layer_cake_integral(&t, &ConvexFn::MaxAffine(f), 0.3, 4_000_000, 9).unwrap();
        assert!(
            (lc.value - exact).abs() <= 3.0 * lc.std_error + 0.01 * exact,
            "layer-cake {} vs exact {exact}",
            lc.value
        );
    }

    #[test]
    fn normalize_v_shape_closed_form() {
        let pts = array![[-20.0], [0.0], [20.0]];
        let f = PolyhedralFn::lower_convex_hull(pts.view(), &[20.0, 0.0, 20.0]).unwrap();
        let t = T::log_concave();
        let (g, c) = normalize(&t, &ConvexFn::Polyhedral(f)).unwrap();
        let expect = (2.0 * (1.0 - (-20.0f64).exp())).ln();
        assert!((c - expect).abs() < 1e-8, "c = {c}, want {expect}");
        let total = integrate_poly(&t, g.as_polyhedral().unwrap()).unwrap();
        assert!((total - 1.0).abs() < 1e-10);
    }

    #[test]
    fn normalize_already_normalized() {
        let pts = array![[-20.0], [0.0], [20.0]];
        let f = PolyhedralFn::lower_convex_hull(pts.view(), &[20.0, 0.0, 20.0]).unwrap();
        let t = T::log_concave();
        let (g, _) = normalize(&t, &ConvexFn::Polyhedral(f)).unwrap();
        let (_, c2) = normalize(&t, &g).unwrap();
        assert!(c2.abs() < 1e-10);
    }

    #[test]
    fn normalize_constant_uniform() {
        // Constant y over a box of volume 4: c = h^{-1}(1/4) − y.
        let pts = array![[0.0, 0.0], [2.0, 0.0], [2.0, 2.0], [0.0, 2.0]];
        let y = 0.7;
        let f = PolyhedralFn::lower_convex_hull(pts.view(), &[y, y, y, y]).unwrap();
        let t = T::log_concave();
        let (_, c) = normalize(&t, &ConvexFn::Polyhedral(f)).unwrap();
        let expect = t.h_inverse(0.25) - y;
        assert!((c - expect).abs() < 1e-9, "c = {c}, want {expect}");
    }

    /// T(c) is monotone in c in the direction given by the transform.
    #[test]
    fn shift_covariance() {
        let pts = array![[-2.0], [0.0], [2.0]];
        let f = PolyhedralFn::lower_convex_hull(pts.view(), &[2.0, 0.0, 2.0]).unwrap();
        let t = T::log_concave();
        let mut prev = f64::INFINITY;
        for i in 0..10 {
            let c = -1.0 + 0.3 * i as f64;
            let v = integrate_poly_shifted(&t, &f, c).unwrap();
            assert!(v < prev, "T not decreasing in c for a decreasing transform");
            prev = v;
        }
    }

    #[test]
    fn plan_selects_methods() {
        let t = T::log_concave();
        let p = SimplexIntegralPlan::new(t, vec![0.0, 1e-5, 2e-5], 1.0).unwrap();
        assert_eq!(p.method, IntegralMethod::Taylor);
        let p = SimplexIntegralPlan::new(t, vec![0.0, 0.5, 1.0], 1.0).unwrap();
        assert_eq!(p.method, IntegralMethod::DividedDifference);
        // Power-concave with s ≤ d has no tail-vanishing A_d: plan must
        // fall back to Monte Carlo.
        let t = T::power_concave(1.5).unwrap();
        let p = SimplexIntegralPlan::new(t, vec![1.0, 2.0, 3.0], 1.0).unwrap();
        assert_eq!(p.method, IntegralMethod::MonteCarlo);
        let est = p.execute(200_000, 1).unwrap();
        let exact_ish = simplex_integral_mc(&t, &[1.0, 2.0, 3.0], 1.0, 400_000, 2);
        assert!((est.value - exact_ish.value).abs() <= 4.0 * (est.std_error + exact_ish.std_error));
    }
}
