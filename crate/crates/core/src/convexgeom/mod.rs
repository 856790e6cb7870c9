//! Polyhedral convex geometry: lower convex hulls, maximal convex
//! minorants, max-affine functions, subgradients, sublevel measures, and
//! general-position checks.

mod hull;
mod maxaffine;
mod poly;
mod predicates;

pub use maxaffine::{AffinePiece, MaxAffineFn};
pub use poly::{hull_value_bruteforce, PolyhedralFn, SimplexCell, Subgradient};

pub(crate) use hull::site_triangulation;
pub(crate) use poly::{gauss_solve, simplex_volume};

use ndarray::ArrayView2;
use thiserror::Error;

use crate::rng::SeedStream;

#[derive(Debug, Error, Clone)]
pub enum GeomError {
    #[error("degenerate input: {0}")]
    DegenerateInput(String),
    #[error("dimension {0} is not supported (exact hulls cover d ∈ {{1, 2, 3}})")]
    UnsupportedDimension(usize),
    #[error("query outside the function domain: {0}")]
    OutsideDomain(String),
    #[error("heights are not consistent with a nonincreasing convex function: {0}")]
    InfeasibleHeights(String),
    #[error("unbounded level set: {0}")]
    UnboundedLevelSet(String),
    #[error("Monte Carlo budget {0} below the minimum of 10000")]
    BudgetTooSmall(usize),
}

/// Either polyhedral representation of a convex estimate: a lower hull
/// over `conv(X)` (decreasing models) or a max-affine function on the
/// orthant (increasing models).
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ConvexFn {
    Polyhedral(PolyhedralFn),
    MaxAffine(MaxAffineFn),
}

impl ConvexFn {
    pub fn dim(&self) -> usize {
        match self {
            ConvexFn::Polyhedral(f) => f.dim(),
            ConvexFn::MaxAffine(f) => f.dim(),
        }
    }

    /// Evaluate the convex function (`+∞` outside its domain).
    pub fn eval(&self, x: &[f64]) -> f64 {
        match self {
            ConvexFn::Polyhedral(f) => f.eval(x),
            ConvexFn::MaxAffine(f) => f.eval(x),
        }
    }

    pub fn shift(&self, c: f64) -> Self {
        match self {
            ConvexFn::Polyhedral(f) => ConvexFn::Polyhedral(f.shift(c)),
            ConvexFn::MaxAffine(f) => ConvexFn::MaxAffine(f.shift(c)),
        }
    }

    pub fn as_polyhedral(&self) -> Option<&PolyhedralFn> {
        match self {
            ConvexFn::Polyhedral(f) => Some(f),
            _ => None,
        }
    }

    pub fn as_max_affine(&self) -> Option<&MaxAffineFn> {
        match self {
            ConvexFn::MaxAffine(f) => Some(f),
            _ => None,
        }
    }
}

/// Which side of the level `y` a measure query refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LevelRegion {
    /// `{g ≤ y}` (bounded for decreasing-model polyhedral functions).
    Sublevel,
    /// `{g > y}` intersected with the domain (bounded for negative-slope
    /// max-affine functions on the orthant).
    Superlevel,
}

/// A Monte Carlo estimate with its standard error.
#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct McEstimate {
    pub value: f64,
    pub std_error: f64,
}

/// Numeric general-position check: every `d+1`-subset of the sites spans a
/// simplex of volume above `tol·scaleᵈ` with `tol = 1e-10` and `scale` the
/// largest pairwise distance. Exhaustive for `n ≤ 64`; above that, 10⁴
/// deterministic random subsets.
pub fn general_position(points: ArrayView2<'_, f64>) -> bool {
    let n = points.nrows();
    let d = points.ncols();
    if n < d + 1 {
        return false;
    }
    const TOL: f64 = 1e-10;

    if n <= 64 {
        let mut scale = 0.0f64;
        for i in 0..n {
            for j in i + 1..n {
                let dist2: f64 =
                    (0..d).map(|c| (points[(i, c)] - points[(j, c)]).powi(2)).sum();
                scale = scale.max(dist2.sqrt());
            }
        }
        if scale == 0.0 {
            return false;
        }
        let thresh = TOL * scale.powi(d as i32);
        let mut subset = vec![0usize; d + 1];
        subset_volumes_ok(points, &mut subset, 0, 0, thresh)
    } else {
        // Bounding-box diagonal as the scale surrogate.
        let mut lo = vec![f64::INFINITY; d];
        let mut hi = vec![f64::NEG_INFINITY; d];
        for r in points.rows() {
            for c in 0..d {
                lo[c] = lo[c].min(r[c]);
                hi[c] = hi[c].max(r[c]);
            }
        }
        let scale: f64 = lo.iter().zip(&hi).map(|(l, h)| (h - l).powi(2)).sum::<f64>().sqrt();
        if scale == 0.0 {
            return false;
        }
        let thresh = TOL * scale.powi(d as i32);
        let mut stream = SeedStream::new(0x6765_6e70_6f73, "general-position");
        let mut subset = vec![0usize; d + 1];
        'outer: for _ in 0..10_000 {
            for slot in subset.iter_mut() {
                *slot = (stream.next_f64() * n as f64) as usize % n;
            }
            subset.sort_unstable();
            for w in subset.windows(2) {
                if w[0] == w[1] {
                    continue 'outer;
                }
            }
            if simplex_volume(points, &subset) <= thresh {
                return false;
            }
        }
        true
    }
}

fn subset_volumes_ok(
    points: ArrayView2<'_, f64>,
    subset: &mut Vec<usize>,
    depth: usize,
    start: usize,
    thresh: f64,
) -> bool {
    let d = points.ncols();
    if depth == d + 1 {
        return simplex_volume(points, subset) > thresh;
    }
    for i in start..points.nrows() {
        subset[depth] = i;
        if !subset_volumes_ok(points, subset, depth + 1, i + 1, thresh) {
            return false;
        }
    }
    true
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array2};
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn collinear_points_fail() {
        let pts = array![[0.0, 0.0], [1.0, 1.0], [2.0, 2.0]];
        assert!(!general_position(pts.view()));
    }

    #[test]
    fn regular_simplex_passes() {
        let pts = array![[0.0, 0.0], [1.0, 0.0], [0.5, 0.8660254037844386]];
        assert!(general_position(pts.view()));
    }

    #[test]
    fn random_normal_samples_pass() {
        for seed in 0..100u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut flat = Vec::with_capacity(40);
            for _ in 0..40 {
                flat.push(rng.sample::<f64, _>(rand_distr::StandardNormal));
            }
            let pts = Array2::from_shape_vec((20, 2), flat).unwrap();
            assert!(general_position(pts.view()), "seed {seed}");
        }
    }

    /// Sublevel-set growth: μ[lev_{y3}] ≤ ((y3−y1)/(y2−y1))^d μ[lev_{y2}]
    /// for y1 < y2 < y3, checked on fuzzed hulls within MC error bands.
    #[test]
    fn sublevel_growth_inequality() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for iter in 0..8 {
            let n = 12;
            let mut flat = Vec::new();
            let mut heights = Vec::new();
            for _ in 0..n {
                flat.push(rng.random_range(-2.0..2.0));
                flat.push(rng.random_range(-2.0..2.0));
            }
            for _ in 0..n {
                heights.push(rng.random_range(-1.0..2.0));
            }
            let pts = Array2::from_shape_vec((n, 2), flat).unwrap();
            let Ok(f) = PolyhedralFn::lower_convex_hull(pts.view(), &heights) else {
                continue;
            };
            let lo = f.min_value();
            let hi = f.max_value();
            if hi - lo < 0.3 {
                continue;
            }
            let y1 = lo + 0.05 * (hi - lo);
            let y2 = lo + rng.random_range(0.3..0.6) * (hi - lo);
            let y3 = lo + rng.random_range(0.65..0.95) * (hi - lo);
            let m2 = f.sublevel_measure(y2, LevelRegion::Sublevel, 120_000, iter).unwrap();
            let m3 = f.sublevel_measure(y3, LevelRegion::Sublevel, 120_000, iter + 1).unwrap();
            let factor = ((y3 - y1) / (y2 - y1)).powi(2);
            let slack = 3.0 * (factor * m2.std_error + m3.std_error);
            assert!(
                m3.value <= factor * m2.value + slack,
                "growth bound violated: {} > {} (iter {iter})",
                m3.value,
                factor * m2.value
            );
        }
    }

    /// Hull maximality: the hull dominates any convex function that sits
    /// below the heights at the sites.
    #[test]
    fn hull_dominates_feasible_convex_functions() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let n = 10;
        let mut flat = Vec::new();
        for _ in 0..n {
            flat.push(rng.random_range(-1.5..1.5));
            flat.push(rng.random_range(-1.5..1.5));
        }
        let pts = Array2::from_shape_vec((n, 2), flat).unwrap();
        let heights: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let hull = PolyhedralFn::lower_convex_hull(pts.view(), &heights).unwrap();

        for _ in 0..100 {
            // φ = max of affine pieces, shifted to satisfy φ(X_i) ≤ h_i.
            let k = rng.random_range(1..4usize);
            let pieces: Vec<(Vec<f64>, f64)> = (0..k)
                .map(|_| {
                    (
                        vec![rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)],
                        rng.random_range(-1.0..1.0),
                    )
                })
                .collect();
            let phi = |x: &[f64]| -> f64 {
                pieces
                    .iter()
                    .map(|(a, b)| a[0] * x[0] + a[1] * x[1] + b)
                    .fold(f64::NEG_INFINITY, f64::max)
            };
            let violation = (0..n)
                .map(|i| phi(pts.row(i).as_slice().unwrap()) - heights[i])
                .fold(f64::NEG_INFINITY, f64::max);
            for _ in 0..100 {
                let x = [rng.random_range(-1.5..1.5), rng.random_range(-1.5..1.5)];
                let hv = hull.eval(&x);
                if hv.is_finite() {
                    assert!(
                        phi(&x) - violation <= hv + 1e-9,
                        "feasible convex function exceeds the hull at {x:?}"
                    );
                }
            }
        }
    }
}
