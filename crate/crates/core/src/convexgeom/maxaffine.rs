//! Max-affine convex functions on the nonnegative orthant.

use ndarray::ArrayView2;
use serde::{Deserialize, Serialize};

use super::{GeomError, LevelRegion, McEstimate};
use crate::rng::SeedStream;

/// One affine piece `a·x + b`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AffinePiece {
    pub a: Vec<f64>,
    pub b: f64,
}

/// `g(x) = max_i aᵢ·x + bᵢ` on the nonnegative orthant, `+∞` outside.
///
/// Increasing-model fits require every slope coordinate to be negative;
/// [`MaxAffineFn::minimal_through`] enforces that.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MaxAffineFn {
    pieces: Vec<AffinePiece>,
}

impl MaxAffineFn {
    pub fn new(pieces: Vec<AffinePiece>) -> Result<Self, GeomError> {
        if pieces.is_empty() {
            return Err(GeomError::DegenerateInput("no affine pieces".into()));
        }
        let d = pieces[0].a.len();
        if pieces.iter().any(|p| p.a.len() != d) {
            return Err(GeomError::DegenerateInput("mixed piece dimensions".into()));
        }
        Ok(MaxAffineFn { pieces })
    }

    /// Minimal polyhedral convex extension of `(x_i, q_i)` to the whole
    /// nonnegative axis (`d = 1`): the max of the secant lines through
    /// consecutive points, which continues the first slope left of the
    /// first point and the last slope to the right.
    ///
    /// Heights must be consistent with a nonincreasing convex function:
    /// secant slopes nondecreasing and strictly negative.
    pub fn minimal_through(points: ArrayView2<'_, f64>, heights: &[f64]) -> Result<Self, GeomError> {
        if points.ncols() != 1 {
            return Err(GeomError::UnsupportedDimension(points.ncols()));
        }
        let n = points.nrows();
        if n != heights.len() || n < 2 {
            return Err(GeomError::DegenerateInput(format!(
                "need at least two sites with matching heights, got {n}"
            )));
        }
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&i, &j| points[(i, 0)].partial_cmp(&points[(j, 0)]).unwrap());
        let xs: Vec<f64> = order.iter().map(|&i| points[(i, 0)]).collect();
        let qs: Vec<f64> = order.iter().map(|&i| heights[i]).collect();
        if xs[0] <= 0.0 {
            return Err(GeomError::DegenerateInput(format!(
                "sites must be strictly positive, got {}",
                xs[0]
            )));
        }
        let scale = qs.iter().fold(1.0f64, |m, q| m.max(q.abs()));
        let mut slopes = Vec::with_capacity(n - 1);
        for w in 0..n - 1 {
            let dx = xs[w + 1] - xs[w];
            if dx <= 0.0 {
                return Err(GeomError::DegenerateInput("duplicate abscissae".into()));
            }
            slopes.push((qs[w + 1] - qs[w]) / dx);
        }
        for w in 0..n - 1 {
            if slopes[w] >= 0.0 {
                return Err(GeomError::InfeasibleHeights(format!(
                    "secant slope {} at segment {w} is not negative",
                    slopes[w]
                )));
            }
            if w > 0 && slopes[w] < slopes[w - 1] - 1e-12 * scale {
                return Err(GeomError::InfeasibleHeights(format!(
                    "secant slopes decrease at segment {w}: {} after {}",
                    slopes[w],
                    slopes[w - 1]
                )));
            }
        }
        let mut pieces: Vec<AffinePiece> = Vec::new();
        for w in 0..n - 1 {
            let a = slopes[w];
            let b = qs[w] - a * xs[w];
            match pieces.last() {
                Some(last) if (last.a[0] - a).abs() <= 1e-12 * (1.0 + a.abs()) => {}
                _ => pieces.push(AffinePiece { a: vec![a], b }),
            }
        }
        Ok(MaxAffineFn { pieces })
    }

    pub fn dim(&self) -> usize {
        self.pieces[0].a.len()
    }

    pub fn pieces(&self) -> &[AffinePiece] {
        &self.pieces
    }

    /// Drop pieces that are nowhere active on a probe set (the remaining
    /// pieces' upper envelope is unchanged on the probes).
    pub fn simplified(&self, probes: &[Vec<f64>]) -> Self {
        let mut keep = vec![false; self.pieces.len()];
        for x in probes {
            if let Some(i) = self.argmax_piece(x) {
                keep[i] = true;
            }
        }
        let pieces: Vec<AffinePiece> = self
            .pieces
            .iter()
            .zip(&keep)
            .filter(|(_, &k)| k)
            .map(|(p, _)| p.clone())
            .collect();
        if pieces.is_empty() {
            self.clone()
        } else {
            MaxAffineFn { pieces }
        }
    }

    fn argmax_piece(&self, x: &[f64]) -> Option<usize> {
        let mut best = None;
        let mut bv = f64::NEG_INFINITY;
        for (i, p) in self.pieces.iter().enumerate() {
            let v = p.a.iter().zip(x).map(|(a, xi)| a * xi).sum::<f64>() + p.b;
            if v > bv {
                bv = v;
                best = Some(i);
            }
        }
        best
    }

    /// Evaluate; `+∞` outside the nonnegative orthant.
    pub fn eval(&self, x: &[f64]) -> f64 {
        if x.iter().any(|&c| c < 0.0) {
            return f64::INFINITY;
        }
        self.pieces
            .iter()
            .map(|p| p.a.iter().zip(x).map(|(a, xi)| a * xi).sum::<f64>() + p.b)
            .fold(f64::NEG_INFINITY, f64::max)
    }

    /// Value at the origin, `g(0) = max b_i`, the supremum over the orthant
    /// when all slopes are negative.
    pub fn value_at_origin(&self) -> f64 {
        self.pieces.iter().map(|p| p.b).fold(f64::NEG_INFINITY, f64::max)
    }

    /// All slope coordinates strictly negative?
    pub fn slopes_negative(&self) -> bool {
        self.pieces.iter().all(|p| p.a.iter().all(|&c| c < 0.0))
    }

    /// Translate by a constant.
    pub fn shift(&self, c: f64) -> Self {
        MaxAffineFn {
            pieces: self
                .pieces
                .iter()
                .map(|p| AffinePiece { a: p.a.clone(), b: p.b + c })
                .collect(),
        }
    }

    /// Monte Carlo measure of the *superlevel* region `{g > y} ∩ R₊^d`,
    /// which is bounded whenever all slopes are negative. The sublevel set
    /// itself is unbounded and is refused.
    pub fn sublevel_measure(
        &self,
        y: f64,
        region: LevelRegion,
        mc_budget: usize,
        seed: u64,
    ) -> Result<McEstimate, GeomError> {
        if let LevelRegion::Sublevel = region {
            return Err(GeomError::UnboundedLevelSet(
                "sublevel sets of a negative-slope max-affine function are unbounded; \
                 measure the superlevel complement instead"
                    .into(),
            ));
        }
        if mc_budget < 10_000 {
            return Err(GeomError::BudgetTooSmall(mc_budget));
        }
        if !self.slopes_negative() {
            return Err(GeomError::UnboundedLevelSet(
                "nonnegative slope coordinate makes the superlevel region unbounded".into(),
            ));
        }
        let d = self.dim();
        // {g > y} ⊆ ∪_i {a_i·x + b_i > y}, each a corner simplex reaching
        // x_j ≤ (y − b_i)/a_{ij}; box those.
        let mut r = vec![0.0f64; d];
        for p in &self.pieces {
            if p.b > y {
                for j in 0..d {
                    r[j] = r[j].max((y - p.b) / p.a[j]);
                }
            }
        }
        let box_vol: f64 = r.iter().product();
        if box_vol == 0.0 {
            return Ok(McEstimate { value: 0.0, std_error: 0.0 });
        }
        let mut stream = SeedStream::new(seed, "maxaffine-superlevel");
        let mut hits = 0usize;
        let mut x = vec![0.0; d];
        for _ in 0..mc_budget {
            for (j, xj) in x.iter_mut().enumerate() {
                *xj = r[j] * stream.next_f64();
            }
            if self.eval(&x) > y {
                hits += 1;
            }
        }
        let p = hits as f64 / mc_budget as f64;
        Ok(McEstimate {
            value: box_vol * p,
            std_error: box_vol * (p * (1.0 - p) / mc_budget as f64).sqrt(),
        })
    }
}
