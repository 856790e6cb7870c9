//! Density distances, reference samplers, and the consistency experiment
//! harness.

use ndarray::Array2;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;
use thiserror::Error;

use crate::convexgeom::{ConvexFn, PolyhedralFn};
use crate::mle::{fit_decreasing, fit_increasing, FitConfig, FitResult, MleError};
use crate::rng::{chacha, stream_seed, SeedStream};
use crate::transforms::Direction;
use crate::Transformation;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("parameter out of the supported domain: {0}")]
    Parameter(String),
    #[error("no sampler available for either density handle")]
    SamplerUnavailable,
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error(transparent)]
    Mle(#[from] MleError),
    #[error("rejection sampler stalled: {0}")]
    RejectionStalled(String),
}

/// Analytic reference densities with exact samplers.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum ReferenceDensity {
    Normal { mu: Vec<f64>, chol: Vec<Vec<f64>>, inv: Vec<Vec<f64>>, log_det: f64 },
    Gamma { r: f64, lambda: f64 },
    Beta { alpha: f64, beta: f64 },
    UniformPolytope { vertices: Vec<Vec<f64>>, volume: f64 },
    Pareto { theta: Vec<f64>, a: f64 },
    StudentT { dof: f64, mu: Vec<f64>, chol: Vec<Vec<f64>>, inv: Vec<Vec<f64>>, log_det: f64 },
}

fn cholesky(sigma: &[Vec<f64>]) -> Option<Vec<Vec<f64>>> {
    let d = sigma.len();
    let mut l = vec![vec![0.0; d]; d];
    for i in 0..d {
        for j in 0..=i {
            let mut s = sigma[i][j];
            for k in 0..j {
                s -= l[i][k] * l[j][k];
            }
            if i == j {
                if s <= 0.0 {
                    return None;
                }
                l[i][j] = s.sqrt();
            } else {
                l[i][j] = s / l[j][j];
            }
        }
    }
    Some(l)
}

fn spd_inverse(sigma: &[Vec<f64>]) -> Option<(Vec<Vec<f64>>, f64)> {
    let d = sigma.len();
    let l = cholesky(sigma)?;
    let log_det = 2.0 * (0..d).map(|i| l[i][i].ln()).sum::<f64>();
    // Invert through forward/back substitution on unit vectors.
    let mut inv = vec![vec![0.0; d]; d];
    for col in 0..d {
        let mut y = vec![0.0; d];
        for i in 0..d {
            let mut s = if i == col { 1.0 } else { 0.0 };
            for k in 0..i {
                s -= l[i][k] * y[k];
            }
            y[i] = s / l[i][i];
        }
        let mut x = vec![0.0; d];
        for i in (0..d).rev() {
            let mut s = y[i];
            for k in i + 1..d {
                s -= l[k][i] * x[k];
            }
            x[i] = s / l[i][i];
        }
        for r in 0..d {
            inv[r][col] = x[r];
        }
    }
    Some((inv, log_det))
}

impl ReferenceDensity {
    pub fn normal(mu: Vec<f64>, sigma: Vec<Vec<f64>>) -> Result<Self, EvalError> {
        let chol = cholesky(&sigma)
            .ok_or_else(|| EvalError::Parameter("covariance not positive definite".into()))?;
        let (inv, log_det) = spd_inverse(&sigma).unwrap();
        Ok(ReferenceDensity::Normal { mu, chol, inv, log_det })
    }

    pub fn standard_normal(d: usize) -> Self {
        let eye: Vec<Vec<f64>> =
            (0..d).map(|i| (0..d).map(|j| if i == j { 1.0 } else { 0.0 }).collect()).collect();
        Self::normal(vec![0.0; d], eye).unwrap()
    }

    /// Gamma(r, λ); the shape must exceed 1 or the density leaves the
    /// log-concave class.
    pub fn gamma(r: f64, lambda: f64) -> Result<Self, EvalError> {
        if !(r > 1.0) || !(lambda > 0.0) {
            return Err(EvalError::Parameter(format!(
                "gamma requires r > 1 and λ > 0, got r = {r}, λ = {lambda}"
            )));
        }
        Ok(ReferenceDensity::Gamma { r, lambda })
    }

    /// Beta(α, β) with α, β ≥ 1 (unbounded densities are refused).
    pub fn beta(alpha: f64, beta: f64) -> Result<Self, EvalError> {
        if !(alpha >= 1.0) || !(beta >= 1.0) {
            return Err(EvalError::Parameter(format!(
                "beta requires α, β ≥ 1, got ({alpha}, {beta})"
            )));
        }
        Ok(ReferenceDensity::Beta { alpha, beta })
    }

    pub fn uniform_polytope(vertices: Vec<Vec<f64>>) -> Result<Self, EvalError> {
        let n = vertices.len();
        if n == 0 {
            return Err(EvalError::Parameter("empty vertex list".into()));
        }
        let d = vertices[0].len();
        let flat: Vec<f64> = vertices.iter().flat_map(|v| v.iter().copied()).collect();
        let pts = Array2::from_shape_vec((n, d), flat)
            .map_err(|_| EvalError::Parameter("ragged vertex list".into()))?;
        let cells = crate::convexgeom::site_triangulation(pts.view())
            .map_err(|e| EvalError::Parameter(e.to_string()))?;
        let volume: f64 =
            cells.iter().map(|c| crate::convexgeom::simplex_volume(pts.view(), c)).sum();
        if volume <= 0.0 {
            return Err(EvalError::Parameter("polytope has zero volume".into()));
        }
        Ok(ReferenceDensity::UniformPolytope { vertices, volume })
    }

    pub fn pareto(theta: Vec<f64>, a: f64) -> Result<Self, EvalError> {
        if !(a > 0.0) || theta.iter().any(|&t| t <= 0.0) {
            return Err(EvalError::Parameter("pareto requires a > 0 and θ > 0".into()));
        }
        Ok(ReferenceDensity::Pareto { theta, a })
    }

    pub fn student_t(dof: f64, mu: Vec<f64>, sigma: Vec<Vec<f64>>) -> Result<Self, EvalError> {
        if !(dof > 0.0) {
            return Err(EvalError::Parameter("student-t requires positive dof".into()));
        }
        let chol = cholesky(&sigma)
            .ok_or_else(|| EvalError::Parameter("scale matrix not positive definite".into()))?;
        let (inv, log_det) = spd_inverse(&sigma).unwrap();
        Ok(ReferenceDensity::StudentT { dof, mu, chol, inv, log_det })
    }

    pub fn dim(&self) -> usize {
        match self {
            ReferenceDensity::Normal { mu, .. } => mu.len(),
            ReferenceDensity::Gamma { .. } | ReferenceDensity::Beta { .. } => 1,
            ReferenceDensity::UniformPolytope { vertices, .. } => vertices[0].len(),
            ReferenceDensity::Pareto { theta, .. } => theta.len(),
            ReferenceDensity::StudentT { mu, .. } => mu.len(),
        }
    }

    pub fn density(&self, x: &[f64]) -> f64 {
        match self {
            ReferenceDensity::Normal { mu, inv, log_det, .. } => {
                let d = mu.len();
                let q = quad_form(mu, inv, x);
                (-0.5 * (q + log_det + d as f64 * (2.0 * std::f64::consts::PI).ln())).exp()
            }
            ReferenceDensity::Gamma { r, lambda } => {
                let x = x[0];
                if x <= 0.0 {
                    0.0
                } else {
                    (r * lambda.ln() + (r - 1.0) * x.ln() - lambda * x - ln_gamma(*r)).exp()
                }
            }
            ReferenceDensity::Beta { alpha, beta } => {
                let x = x[0];
                if !(0.0..=1.0).contains(&x) {
                    0.0
                } else {
                    let log_b = ln_gamma(*alpha) + ln_gamma(*beta) - ln_gamma(alpha + beta);
                    let xl = if *alpha == 1.0 { 0.0 } else { (alpha - 1.0) * x.ln() };
                    let ol = if *beta == 1.0 { 0.0 } else { (beta - 1.0) * (1.0 - x).ln() };
                    (xl + ol - log_b).exp()
                }
            }
            ReferenceDensity::UniformPolytope { vertices, volume } => {
                if polytope_contains(vertices, x) {
                    1.0 / volume
                } else {
                    0.0
                }
            }
            ReferenceDensity::Pareto { theta, a } => {
                let d = theta.len() as f64;
                if x.iter().zip(theta).any(|(xi, ti)| xi <= ti) {
                    return 0.0;
                }
                let s: f64 = x.iter().zip(theta).map(|(xi, ti)| xi / ti).sum::<f64>() - d + 1.0;
                let log_coeff =
                    ln_gamma(a + d) - ln_gamma(*a) - theta.iter().map(|t| t.ln()).sum::<f64>();
                (log_coeff - (a + d) * s.ln()).exp()
            }
            ReferenceDensity::StudentT { dof, mu, inv, log_det, .. } => {
                let d = mu.len() as f64;
                let q = quad_form(mu, inv, x);
                let log_c = ln_gamma((dof + d) / 2.0)
                    - ln_gamma(dof / 2.0)
                    - 0.5 * d * (dof * std::f64::consts::PI).ln()
                    - 0.5 * log_det;
                (log_c - 0.5 * (dof + d) * (1.0 + q / dof).ln()).exp()
            }
        }
    }

    /// Draw `n` i.i.d. observations (rows).
    pub fn sample(&self, n: usize, seed: u64) -> Array2<f64> {
        let d = self.dim();
        let mut rng = chacha(seed, "reference-sampler");
        let mut out = Array2::zeros((n, d));
        match self {
            ReferenceDensity::Normal { mu, chol, .. } => {
                for i in 0..n {
                    let z: Vec<f64> =
                        (0..d).map(|_| rng.sample(rand_distr::StandardNormal)).collect();
                    for r in 0..d {
                        let mut v = mu[r];
                        for k in 0..=r {
                            v += chol[r][k] * z[k];
                        }
                        out[(i, r)] = v;
                    }
                }
            }
            ReferenceDensity::Gamma { r, lambda } => {
                let g = rand_distr::Gamma::new(*r, 1.0 / lambda).unwrap();
                for i in 0..n {
                    out[(i, 0)] = rng.sample(g);
                }
            }
            ReferenceDensity::Beta { alpha, beta } => {
                let b = rand_distr::Beta::new(*alpha, *beta).unwrap();
                for i in 0..n {
                    out[(i, 0)] = rng.sample(b);
                }
            }
            ReferenceDensity::UniformPolytope { vertices, .. } => {
                let (lo, hi) = vertex_bbox(vertices);
                let mut i = 0;
                let mut guard = 0usize;
                while i < n {
                    guard += 1;
                    if guard > n.saturating_mul(100_000) {
                        break; // pathological sliver; callers see zeros
                    }
                    let x: Vec<f64> = (0..d)
                        .map(|c| lo[c] + (hi[c] - lo[c]) * rng.random::<f64>())
                        .collect();
                    if polytope_contains(vertices, &x) {
                        for c in 0..d {
                            out[(i, c)] = x[c];
                        }
                        i += 1;
                    }
                }
            }
            ReferenceDensity::Pareto { theta, a } => {
                let g = rand_distr::Gamma::new(*a, 1.0).unwrap();
                for i in 0..n {
                    let y: f64 = rng.sample(g);
                    for c in 0..d {
                        let e: f64 = -(1.0f64 - rng.random::<f64>()).ln();
                        out[(i, c)] = theta[c] * (e / y + 1.0);
                    }
                }
            }
            ReferenceDensity::StudentT { dof, mu, chol, .. } => {
                let chi = rand_distr::Gamma::new(dof / 2.0, 2.0).unwrap();
                for i in 0..n {
                    let w: f64 = rng.sample(chi);
                    let scale = (dof / w).sqrt();
                    let z: Vec<f64> =
                        (0..d).map(|_| rng.sample(rand_distr::StandardNormal)).collect();
                    for r in 0..d {
                        let mut v = 0.0;
                        for k in 0..=r {
                            v += chol[r][k] * z[k];
                        }
                        out[(i, r)] = mu[r] + scale * v;
                    }
                }
            }
        }
        out
    }

    /// Axis-aligned central box holding roughly the requested mass, from
    /// per-coordinate quantiles of a fixed pilot sample.
    pub fn central_box(&self, mass: f64) -> (Vec<f64>, Vec<f64>) {
        let d = self.dim();
        let pilot = self.sample(20_000, 0xb0b0);
        let per_coord = mass.powf(1.0 / d as f64);
        let p_lo = (1.0 - per_coord) / 2.0;
        let mut lo = vec![0.0; d];
        let mut hi = vec![0.0; d];
        for c in 0..d {
            let mut col: Vec<f64> = pilot.column(c).to_vec();
            col.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let k_lo = ((col.len() as f64) * p_lo) as usize;
            let k_hi = ((col.len() as f64) * (1.0 - p_lo)) as usize;
            lo[c] = col[k_lo.min(col.len() - 1)];
            hi[c] = col[k_hi.min(col.len() - 1)];
        }
        (lo, hi)
    }
}

fn quad_form(mu: &[f64], inv: &[Vec<f64>], x: &[f64]) -> f64 {
    let d = mu.len();
    let diff: Vec<f64> = (0..d).map(|i| x[i] - mu[i]).collect();
    let mut q = 0.0;
    for i in 0..d {
        for j in 0..d {
            q += diff[i] * inv[i][j] * diff[j];
        }
    }
    q
}

fn vertex_bbox(vertices: &[Vec<f64>]) -> (Vec<f64>, Vec<f64>) {
    let d = vertices[0].len();
    let mut lo = vec![f64::INFINITY; d];
    let mut hi = vec![f64::NEG_INFINITY; d];
    for v in vertices {
        for c in 0..d {
            lo[c] = lo[c].min(v[c]);
            hi[c] = hi[c].max(v[c]);
        }
    }
    (lo, hi)
}

fn polytope_contains(vertices: &[Vec<f64>], x: &[f64]) -> bool {
    // Membership via the zero-height hull triangulation would be exact;
    // a barycentric scan over vertex simplices is enough at sampler
    // accuracy and avoids keeping the triangulation around.
    let n = vertices.len();
    let d = vertices[0].len();
    let flat: Vec<f64> = vertices.iter().flat_map(|v| v.iter().copied()).collect();
    let pts = Array2::from_shape_vec((n, d), flat).unwrap();
    match crate::convexgeom::site_triangulation(pts.view()) {
        Ok(cells) => cells.iter().any(|cell| {
            let m = d + 1;
            let mut aug = vec![vec![0.0; m + 1]; m];
            for (col, &v) in cell.iter().enumerate() {
                for r in 0..d {
                    aug[r][col] = pts[(v, r)];
                }
                aug[d][col] = 1.0;
            }
            for r in 0..d {
                aug[r][m] = x[r];
            }
            aug[d][m] = 1.0;
            crate::convexgeom::gauss_solve(&mut aug)
                .map(|lam| lam.iter().all(|&l| l >= -1e-9))
                .unwrap_or(false)
        }),
        Err(_) => false,
    }
}

/// A density that can be evaluated pointwise, and sampled when a sampler
/// exists (references always; fitted or deformed decreasing densities by
/// rejection over `conv(X)`).
#[derive(Debug, Clone)]
pub enum DensityHandle {
    Reference(ReferenceDensity),
    Fitted { transform: Transformation, fit: FitResult },
    /// A normalized polyhedral density `h∘g` (deformation experiments).
    Polyhedral { transform: Transformation, g: PolyhedralFn },
}

impl DensityHandle {
    pub fn dim(&self) -> usize {
        match self {
            DensityHandle::Reference(r) => r.dim(),
            DensityHandle::Fitted { fit, .. } => fit.estimate.dim(),
            DensityHandle::Polyhedral { g, .. } => g.dim(),
        }
    }

    pub fn density(&self, x: &[f64]) -> f64 {
        match self {
            DensityHandle::Reference(r) => r.density(x),
            DensityHandle::Fitted { transform, fit } => fit.density(transform, x),
            DensityHandle::Polyhedral { transform, g } => {
                let v = g.eval(x);
                if v.is_finite() {
                    transform.eval(v)
                } else {
                    0.0
                }
            }
        }
    }

    fn rejection_geometry(&self) -> Option<(&PolyhedralFn, &Transformation)> {
        match self {
            DensityHandle::Polyhedral { transform, g } => Some((g, transform)),
            DensityHandle::Fitted { transform, fit } => match &fit.estimate {
                ConvexFn::Polyhedral(g) if transform.direction() == Direction::Decreasing => {
                    Some((g, transform))
                }
                _ => None,
            },
            _ => None,
        }
    }

    pub fn can_sample(&self) -> bool {
        matches!(self, DensityHandle::Reference(_)) || self.rejection_geometry().is_some()
    }

    pub fn sample(&self, n: usize, seed: u64) -> Result<Array2<f64>, EvalError> {
        match self {
            DensityHandle::Reference(r) => Ok(r.sample(n, seed)),
            _ => {
                let (g, t) = self.rejection_geometry().ok_or(EvalError::SamplerUnavailable)?;
                let d = g.dim();
                let (lo, hi) = g.bounding_box();
                let bound = t.eval(g.min_value());
                if !bound.is_finite() || bound <= 0.0 {
                    return Err(EvalError::SamplerUnavailable);
                }
                let mut stream = SeedStream::new(seed, "rejection-sampler");
                let mut out = Array2::zeros((n, d));
                let mut got = 0usize;
                let mut tries = 0usize;
                let cap = 200_000usize.saturating_mul(n.max(1));
                let mut x = vec![0.0; d];
                while got < n {
                    tries += 1;
                    if tries > cap {
                        return Err(EvalError::RejectionStalled(format!(
                            "acceptance below 1/{}",
                            cap / n.max(1)
                        )));
                    }
                    for c in 0..d {
                        x[c] = lo[c] + (hi[c] - lo[c]) * stream.next_f64();
                    }
                    let v = g.eval(&x);
                    let p = if v.is_finite() { t.eval(v) } else { 0.0 };
                    if stream.next_f64() * bound < p {
                        for c in 0..d {
                            out[(got, c)] = x[c];
                        }
                        got += 1;
                    }
                }
                Ok(out)
            }
        }
    }
}

/// Squared and plain Hellinger distance estimates.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct HellingerEstimate {
    pub h2: f64,
    pub h: f64,
    /// Standard error of the `h²` estimate.
    pub std_error: f64,
    /// Whether clamping into `[0, 1]` was applied.
    pub clamped: bool,
}

/// Importance-sampling estimate of `H²(p, q) = 1 − E_q[√(p/q)]`, sampling
/// from whichever handle provides a sampler.
pub fn hellinger(
    p: &DensityHandle,
    q: &DensityHandle,
    mc_budget: usize,
    seed: u64,
) -> Result<HellingerEstimate, EvalError> {
    if p.dim() != q.dim() {
        return Err(EvalError::DimensionMismatch(format!("{} vs {}", p.dim(), q.dim())));
    }
    let (num, sampler) = if q.can_sample() {
        (p, q)
    } else if p.can_sample() {
        (q, p) // H is symmetric
    } else {
        return Err(EvalError::SamplerUnavailable);
    };
    let xs = sampler.sample(mc_budget, stream_seed(seed, "hellinger"))?;
    let mut sum = 0.0;
    let mut sumsq = 0.0;
    for row in xs.rows() {
        let x = row.as_slice().unwrap();
        let pd = num.density(x);
        let qd = sampler.density(x);
        let r = if qd > 0.0 { (pd / qd).sqrt() } else { 0.0 };
        sum += r;
        sumsq += r * r;
    }
    let n = mc_budget as f64;
    let mean = sum / n;
    let var = (sumsq / n - mean * mean).max(0.0);
    let raw = 1.0 - mean;
    let h2 = raw.clamp(0.0, 1.0);
    Ok(HellingerEstimate {
        h2,
        h: h2.sqrt(),
        std_error: (var / n).sqrt(),
        clamped: raw != h2,
    })
}

/// Max of `|p − q|` over a tensor grid on the box.
pub fn sup_norm_distance(
    p: &DensityHandle,
    q: &DensityHandle,
    lo: &[f64],
    hi: &[f64],
    grid_per_dim: usize,
) -> f64 {
    let d = lo.len();
    let mut idx = vec![0usize; d];
    let mut best = 0.0f64;
    let mut x = vec![0.0; d];
    loop {
        for c in 0..d {
            let t = if grid_per_dim > 1 { idx[c] as f64 / (grid_per_dim - 1) as f64 } else { 0.5 };
            x[c] = lo[c] + (hi[c] - lo[c]) * t;
        }
        best = best.max((p.density(&x) - q.density(&x)).abs());
        let mut carry = 0;
        loop {
            idx[carry] += 1;
            if idx[carry] < grid_per_dim {
                break;
            }
            idx[carry] = 0;
            carry += 1;
            if carry == d {
                return best;
            }
        }
    }
}

/// One sample-size row of an experiment report.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentCell {
    pub n: usize,
    /// Per-replication Hellinger distances (`None` marks a flagged cell).
    pub hellinger: Vec<Option<f64>>,
    pub sup_norm: Vec<Option<f64>>,
    pub flagged: usize,
    pub median_h: f64,
    pub q25_h: f64,
    pub q75_h: f64,
    pub median_sup: f64,
    /// Not part of the determinism contract.
    pub wall_time_secs: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub model: String,
    pub truth: String,
    pub sample_sizes: Vec<usize>,
    pub replications: usize,
    pub seed: u64,
    pub sup_box_lo: Vec<f64>,
    pub sup_box_hi: Vec<f64>,
    pub cells: Vec<ExperimentCell>,
}

impl ExperimentReport {
    /// Serialization with wall times stripped: byte-identical across reruns
    /// with the same seed.
    pub fn canonical_json(&self) -> String {
        let mut clone = self.clone();
        for c in &mut clone.cells {
            c.wall_time_secs = None;
        }
        serde_json::to_string_pretty(&clone).expect("report serializes")
    }

    /// `(n, median_H, q25, q75)` rows for plotting.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("n\tmedian_H\tq25\tq75\n");
        for c in &self.cells {
            out.push_str(&format!("{}\t{}\t{}\t{}\n", c.n, c.median_h, c.q25_h, c.q75_h));
        }
        out
    }
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] * (1.0 - frac) + sorted[hi] * frac
}

/// Run the Hellinger/sup-norm consistency experiment: for every sample
/// size and replication, draw from the truth, fit the model, and measure
/// distances to the truth. Failed replications are flagged, not fatal.
pub fn consistency_experiment(
    model: &Transformation,
    truth: &ReferenceDensity,
    sample_sizes: &[usize],
    replications: usize,
    seed: u64,
) -> Result<ExperimentReport, EvalError> {
    verify_truth_assumptions(model, truth)?;
    let (lo, hi) = truth.central_box(0.9);
    let truth_handle = DensityHandle::Reference(truth.clone());
    let grid = match truth.dim() {
        1 => 201,
        2 => 41,
        _ => 15,
    };

    let mut jobs: Vec<(usize, usize)> = Vec::new();
    for &n in sample_sizes {
        for rep in 0..replications {
            jobs.push((n, rep));
        }
    }
    let results: Vec<((usize, usize), Option<(f64, f64)>, f64)> = jobs
        .par_iter()
        .map(|&(n, rep)| {
            let t0 = std::time::Instant::now();
            let cell_seed = stream_seed(seed, &format!("cell-n{n}-rep{rep}"));
            let out = run_cell(model, truth, &truth_handle, n, cell_seed, &lo, &hi, grid);
            ((n, rep), out, t0.elapsed().as_secs_f64())
        })
        .collect();

    let mut cells = Vec::new();
    for &n in sample_sizes {
        let mut hs: Vec<Option<f64>> = vec![None; replications];
        let mut sups: Vec<Option<f64>> = vec![None; replications];
        let mut wall = 0.0;
        for ((cn, rep), out, secs) in &results {
            if *cn == n {
                wall += secs;
                if let Some((h, s)) = out {
                    hs[*rep] = Some(*h);
                    sups[*rep] = Some(*s);
                }
            }
        }
        let mut ok_h: Vec<f64> = hs.iter().flatten().copied().collect();
        ok_h.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let mut ok_s: Vec<f64> = sups.iter().flatten().copied().collect();
        ok_s.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let flagged = replications - ok_h.len();
        cells.push(ExperimentCell {
            n,
            flagged,
            median_h: quantile(&ok_h, 0.5),
            q25_h: quantile(&ok_h, 0.25),
            q75_h: quantile(&ok_h, 0.75),
            median_sup: quantile(&ok_s, 0.5),
            hellinger: hs,
            sup_norm: sups,
            wall_time_secs: Some(wall),
        });
    }
    Ok(ExperimentReport {
        model: model.to_string(),
        truth: format!("{truth:?}"),
        sample_sizes: sample_sizes.to_vec(),
        replications,
        seed,
        sup_box_lo: lo,
        sup_box_hi: hi,
        cells,
    })
}

#[allow(clippy::too_many_arguments)]
fn run_cell(
    model: &Transformation,
    truth: &ReferenceDensity,
    truth_handle: &DensityHandle,
    n: usize,
    cell_seed: u64,
    lo: &[f64],
    hi: &[f64],
    grid: usize,
) -> Option<(f64, f64)> {
    let xs = truth.sample(n, stream_seed(cell_seed, "sample"));
    let mut cfg = FitConfig::new(*model);
    cfg.seed = stream_seed(cell_seed, "fit");
    cfg.max_iters = 250;
    cfg.grad_tol = 1e-5;
    let fit = match model.direction() {
        Direction::Decreasing => fit_decreasing(model, xs.view(), &cfg),
        Direction::Increasing => fit_increasing(model, xs.view(), &cfg),
    }
    .ok()?;
    let handle = DensityHandle::Fitted { transform: *model, fit };
    let hell =
        hellinger(&handle, truth_handle, 120_000, stream_seed(cell_seed, "hellinger")).ok()?;
    let sup = sup_norm_distance(&handle, truth_handle, lo, hi, grid);
    Some((hell.h, sup))
}

/// Numeric audit of the truth-side assumptions for increasing models: the
/// near-zero log integrand must be integrable.
fn verify_truth_assumptions(
    model: &Transformation,
    truth: &ReferenceDensity,
) -> Result<(), EvalError> {
    if model.direction() != Direction::Increasing {
        return Ok(());
    }
    let xs = truth.sample(50_000, 0x7472_7574);
    let mut acc = 0.0;
    for row in xs.rows() {
        let prod: f64 = row.iter().product();
        if prod <= 0.0 {
            return Err(EvalError::Parameter(
                "increasing-model truth must live on the positive orthant".into(),
            ));
        }
        acc += (1.0 / prod.min(1.0)).ln();
    }
    let mean = acc / 50_000.0;
    if !mean.is_finite() {
        return Err(EvalError::Parameter(
            "truth violates the log-integrability assumption near the axes".into(),
        ));
    }
    Ok(())
}

/// Sample from a named reference distribution (CLI surface).
pub fn sample_reference(
    name: &str,
    params: &[f64],
    n: usize,
    seed: u64,
) -> Result<Array2<f64>, EvalError> {
    let r = reference_by_name(name, params)?;
    Ok(r.sample(n, seed))
}

/// Build a reference density from a short name and a flat parameter list.
///
/// * `normal`: `[d]` (standard) or `[mu..., sigma_flat...]`
/// * `gamma`: `[r, lambda]`
/// * `beta`: `[alpha, beta]`
/// * `pareto`: `[a, theta...]`
/// * `student-t`: `[dof, mu...]` (identity scale)
/// * `triangular`: `[]` (Beta(1, 2), the power-convex s = 1 member)
pub fn reference_by_name(name: &str, params: &[f64]) -> Result<ReferenceDensity, EvalError> {
    match name {
        "normal" => {
            if params.len() <= 1 {
                let d = params.first().copied().unwrap_or(1.0) as usize;
                Ok(ReferenceDensity::standard_normal(d.max(1)))
            } else {
                // mu followed by row-major covariance.
                let d = ((1.0 + (1.0 + 4.0 * params.len() as f64).sqrt()) / 2.0).floor() as usize;
                let d = (1..=8)
                    .find(|&k| k + k * k == params.len())
                    .unwrap_or(d.max(1));
                if d + d * d != params.len() {
                    return Err(EvalError::Parameter(
                        "normal expects [mu..., sigma_flat...] with d + d² entries".into(),
                    ));
                }
                let mu = params[..d].to_vec();
                let sigma: Vec<Vec<f64>> =
                    (0..d).map(|i| params[d + i * d..d + (i + 1) * d].to_vec()).collect();
                ReferenceDensity::normal(mu, sigma)
            }
        }
        "gamma" => {
            if params.len() != 2 {
                return Err(EvalError::Parameter("gamma expects [r, lambda]".into()));
            }
            ReferenceDensity::gamma(params[0], params[1])
        }
        "beta" => {
            if params.len() != 2 {
                return Err(EvalError::Parameter("beta expects [alpha, beta]".into()));
            }
            ReferenceDensity::beta(params[0], params[1])
        }
        "pareto" => {
            if params.len() < 2 {
                return Err(EvalError::Parameter("pareto expects [a, theta...]".into()));
            }
            ReferenceDensity::pareto(params[1..].to_vec(), params[0])
        }
        "student-t" => {
            if params.is_empty() {
                return Err(EvalError::Parameter("student-t expects [dof, mu...]".into()));
            }
            let dof = params[0];
            let mu = if params.len() > 1 { params[1..].to_vec() } else { vec![0.0] };
            let d = mu.len();
            let eye: Vec<Vec<f64>> = (0..d)
                .map(|i| (0..d).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
                .collect();
            ReferenceDensity::student_t(dof, mu, eye)
        }
        "triangular" => ReferenceDensity::beta(1.0, 2.0),
        other => Err(EvalError::Parameter(format!("unknown reference density {other:?}"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use statrs::distribution::{ContinuousCDF, StudentsT};

    #[test]
    fn hellinger_identical_densities() {
        let p = DensityHandle::Reference(ReferenceDensity::standard_normal(1));
        let est = hellinger(&p, &p, 50_000, 1).unwrap();
        assert!(est.h2 <= 3.0 * est.std_error + 1e-12, "h2 = {}", est.h2);
    }

    #[test]
    fn hellinger_shifted_normals_closed_form() {
        let p = DensityHandle::Reference(ReferenceDensity::standard_normal(1));
        let q = DensityHandle::Reference(
            ReferenceDensity::normal(vec![1.0], vec![vec![1.0]]).unwrap(),
        );
        let est = hellinger(&p, &q, 400_000, 2).unwrap();
        let expect_h2 = 1.0 - (-0.125f64).exp();
        assert!(
            (est.h2 - expect_h2).abs() <= 4.0 * est.std_error + 1e-4,
            "h² = {} want {expect_h2}",
            est.h2
        );
        assert!((est.h - 0.342787).abs() < 5e-3);
    }

    #[test]
    fn hellinger_disjoint_uniforms() {
        let p = DensityHandle::Reference(
            ReferenceDensity::uniform_polytope(vec![vec![0.0], vec![1.0]]).unwrap(),
        );
        let q = DensityHandle::Reference(
            ReferenceDensity::uniform_polytope(vec![vec![2.0], vec![3.0]]).unwrap(),
        );
        let est = hellinger(&p, &q, 20_000, 3).unwrap();
        assert_eq!(est.h2, 1.0);
    }

    #[test]
    fn hellinger_symmetric_within_noise() {
        let p = DensityHandle::Reference(ReferenceDensity::standard_normal(1));
        let q = DensityHandle::Reference(
            ReferenceDensity::normal(vec![0.5], vec![vec![1.44]]).unwrap(),
        );
        let a = hellinger(&p, &q, 200_000, 4).unwrap();
        let b = hellinger(&q, &p, 200_000, 5).unwrap();
        assert!((a.h2 - b.h2).abs() <= 3.0 * (a.std_error + b.std_error));
    }

    #[test]
    fn sup_norm_examples() {
        let p = DensityHandle::Reference(
            ReferenceDensity::uniform_polytope(vec![vec![0.0], vec![1.0]]).unwrap(),
        );
        assert_eq!(sup_norm_distance(&p, &p, &[0.1], &[0.9], 51), 0.0);
        let q = DensityHandle::Reference(
            ReferenceDensity::uniform_polytope(vec![vec![0.0], vec![2.0]]).unwrap(),
        );
        let s = sup_norm_distance(&p, &q, &[0.1], &[0.9], 51);
        assert!((s - 0.5).abs() < 1e-12);
    }

    #[test]
    fn normal_sampler_clt_band() {
        let r = ReferenceDensity::normal(vec![1.0, -2.0], vec![vec![2.0, 0.3], vec![0.3, 1.0]])
            .unwrap();
        let n = 100_000;
        let xs = r.sample(n, 11);
        for (c, (mu, var)) in [(1.0, 2.0), (-2.0, 1.0)].iter().enumerate() {
            let mean: f64 = xs.column(c).sum() / n as f64;
            let band = 4.0 * (var / n as f64).sqrt();
            assert!((mean - mu).abs() < band, "coord {c}: {mean} vs {mu}");
        }
    }

    #[test]
    fn uniform_triangle_stays_inside() {
        let tri = vec![vec![0.0, 0.0], vec![1.0, 0.0], vec![0.0, 1.0]];
        let r = ReferenceDensity::uniform_polytope(tri.clone()).unwrap();
        let xs = r.sample(2_000, 5);
        for row in xs.rows() {
            assert!(row[0] >= -1e-12 && row[1] >= -1e-12 && row[0] + row[1] <= 1.0 + 1e-9);
        }
        assert!((r.density(&[0.1, 0.1]) - 2.0).abs() < 1e-9);
    }

    #[test]
    fn student_tail_matches_analytic() {
        let r = ReferenceDensity::student_t(3.0, vec![0.0], vec![vec![1.0]]).unwrap();
        let n = 200_000;
        let xs = r.sample(n, 17);
        let hits = xs.column(0).iter().filter(|&&v| v.abs() > 10.0).count();
        let t = StudentsT::new(0.0, 1.0, 3.0).unwrap();
        let p = 2.0 * (1.0 - t.cdf(10.0));
        let sd = (p * (1.0 - p) * n as f64).sqrt();
        assert!(
            ((hits as f64) - p * n as f64).abs() <= 3.0 * sd + 3.0,
            "tail hits {hits} vs expected {}",
            p * n as f64
        );
    }

    #[test]
    fn gamma_parameter_gate() {
        assert!(ReferenceDensity::gamma(0.7, 1.0).is_err());
        assert!(ReferenceDensity::gamma(2.0, 1.0).is_ok());
        assert!(ReferenceDensity::beta(0.5, 2.0).is_err());
    }

    #[test]
    fn experiment_smoke_and_determinism() {
        let t = Transformation::log_concave();
        let truth = ReferenceDensity::standard_normal(1);
        let a = consistency_experiment(&t, &truth, &[12, 20], 3, 99).unwrap();
        let b = consistency_experiment(&t, &truth, &[12, 20], 3, 99).unwrap();
        assert_eq!(a.canonical_json(), b.canonical_json());
        assert_eq!(a.cells.len(), 2);
        for c in &a.cells {
            assert_eq!(c.hellinger.len(), 3);
        }
        let tsv = a.to_tsv();
        assert!(tsv.starts_with("n\tmedian_H"));
        assert_eq!(tsv.lines().count(), 3);
    }

    #[test]
    fn degenerate_replication_is_flagged_not_fatal() {
        // n = 2 < n_d for a 2-dimensional log-concave model: every cell
        // fails existence but the run completes.
        let t = Transformation::log_concave();
        let truth = ReferenceDensity::standard_normal(2);
        let rep = consistency_experiment(&t, &truth, &[2], 2, 7).unwrap();
        assert_eq!(rep.cells[0].flagged, 2);
    }
}
