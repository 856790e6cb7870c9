//! Polyhedral convex functions on `conv(X)`.

use ndarray::{Array2, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

use super::hull::lower_hull_triangulation;
use super::{GeomError, LevelRegion, McEstimate};
use crate::rng::SeedStream;

/// One cell of the triangulation: the function equals `a·x + b` on the
/// simplex spanned by `vertices`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimplexCell {
    pub vertices: Vec<usize>,
    pub a: Vec<f64>,
    pub b: f64,
    pub volume: f64,
}

/// A convex function represented as the lower convex hull of
/// `(site, height)` pairs, stored as a simplicial triangulation of
/// `conv(X)` with per-cell affine coefficients. Outside `conv(X)` the
/// function is `+∞`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(try_from = "PolyhedralRepr", into = "PolyhedralRepr")]
pub struct PolyhedralFn {
    points: Array2<f64>,
    heights: Vec<f64>,
    simplices: Vec<SimplexCell>,
    active: Vec<bool>,
    #[serde(skip)]
    locator: Locator,
    #[serde(skip)]
    boundary: Vec<HalfSpace>,
}

#[derive(Serialize, Deserialize)]
struct PolyhedralRepr {
    points: Vec<Vec<f64>>,
    heights: Vec<f64>,
    simplices: Vec<SimplexCell>,
    active: Vec<bool>,
}

impl From<PolyhedralFn> for PolyhedralRepr {
    fn from(f: PolyhedralFn) -> Self {
        PolyhedralRepr {
            points: f.points.rows().into_iter().map(|r| r.to_vec()).collect(),
            heights: f.heights,
            simplices: f.simplices,
            active: f.active,
        }
    }
}

impl TryFrom<PolyhedralRepr> for PolyhedralFn {
    type Error = GeomError;

    fn try_from(r: PolyhedralRepr) -> Result<Self, GeomError> {
        let n = r.points.len();
        if n == 0 {
            return Err(GeomError::DegenerateInput("empty site list".into()));
        }
        let d = r.points[0].len();
        let flat: Vec<f64> = r.points.iter().flat_map(|p| p.iter().copied()).collect();
        let points = Array2::from_shape_vec((n, d), flat)
            .map_err(|_| GeomError::DegenerateInput("ragged point rows".into()))?;
        let locator = Locator::build(points.view(), &r.simplices);
        let boundary = boundary_halfspaces(points.view(), &r.simplices);
        Ok(PolyhedralFn {
            points,
            heights: r.heights,
            simplices: r.simplices,
            active: r.active,
            locator,
            boundary,
        })
    }
}

/// Subgradient query result: the affine slope of the containing cell plus
/// a flag telling whether that cell was unique (interior query) or the
/// point sat on a shared face.
#[derive(Debug, Clone)]
pub struct Subgradient {
    pub vector: Vec<f64>,
    pub unique: bool,
}

impl PolyhedralFn {
    /// The pointwise-maximal convex function `U` with `U(X_i) ≤ heights[i]`,
    /// equal to the heights on hull-active sites, with domain `conv(X)`.
    ///
    /// Full dimensionality of the sites is required; local degeneracies are
    /// absorbed by the symbolic tie-breaking of the hull.
    pub fn lower_convex_hull(
        points: ArrayView2<'_, f64>,
        heights: &[f64],
    ) -> Result<Self, GeomError> {
        let n = points.nrows();
        if heights.len() != n {
            return Err(GeomError::DegenerateInput(format!(
                "{} heights for {} sites",
                heights.len(),
                n
            )));
        }
        let cells = lower_hull_triangulation(points, heights)?;
        let d = points.ncols();
        let mut simplices = Vec::with_capacity(cells.len());
        for cell in cells {
            let (a, b) = solve_affine(points, heights, &cell)
                .unwrap_or((vec![0.0; d], f64::NAN));
            let volume = simplex_volume(points, &cell);
            simplices.push(SimplexCell { vertices: cell, a, b, volume });
        }

        let mut active = vec![false; n];
        for s in &simplices {
            for &v in &s.vertices {
                active[v] = true;
            }
        }
        let locator = Locator::build(points, &simplices);

        // Hull value at non-vertex sites comes from the containing cell.
        let mut hull_heights = heights.to_vec();
        for i in 0..n {
            if active[i] {
                continue;
            }
            let x = points.row(i);
            if let Some(cell) = locator.locate(points, &simplices, x.as_slice().unwrap()) {
                let s = &simplices[cell];
                let v = dot(&s.a, x) + s.b;
                hull_heights[i] = v.min(heights[i]);
            }
        }

        let boundary = boundary_halfspaces(points, &simplices);
        Ok(PolyhedralFn {
            points: points.to_owned(),
            heights: hull_heights,
            simplices,
            active,
            locator,
            boundary,
        })
    }

    /// Assemble a polyhedral function from a triangulation known to carry
    /// hull-consistent heights (the cells must be affine pieces of the
    /// convex function). Skips the hull construction; callers are
    /// responsible for convex consistency.
    pub(crate) fn from_triangulation(
        points: Array2<f64>,
        heights: Vec<f64>,
        cells: Vec<Vec<usize>>,
    ) -> Result<Self, GeomError> {
        let d = points.ncols();
        let mut simplices = Vec::with_capacity(cells.len());
        for cell in cells {
            let (a, b) = solve_affine(points.view(), &heights, &cell)
                .unwrap_or((vec![0.0; d], f64::NAN));
            let volume = simplex_volume(points.view(), &cell);
            simplices.push(SimplexCell { vertices: cell, a, b, volume });
        }
        let mut active = vec![false; points.nrows()];
        for s in &simplices {
            for &v in &s.vertices {
                active[v] = true;
            }
        }
        let locator = Locator::build(points.view(), &simplices);
        let boundary = boundary_halfspaces(points.view(), &simplices);
        Ok(PolyhedralFn { points, heights, simplices, active, locator, boundary })
    }

    /// Maximal convex minorant after dipping the value at `x0` by `eps`:
    /// the lower hull of the sites augmented with `(x0, f(x0) − eps)`.
    /// Requires `x0` in the interior of the domain.
    pub fn with_dip(&self, x0: &[f64], eps: f64) -> Result<Self, GeomError> {
        if !(eps >= 0.0) {
            return Err(GeomError::DegenerateInput(format!("negative dip {eps}")));
        }
        if !self.contains_interior(x0) {
            return Err(GeomError::OutsideDomain(format!("{x0:?} not interior to conv(X)")));
        }
        let existing = self
            .points
            .rows()
            .into_iter()
            .position(|r| r.as_slice().unwrap() == x0);
        let (points, heights) = match existing {
            Some(i) => {
                let mut h = self.heights.clone();
                h[i] -= eps;
                (self.points.clone(), h)
            }
            None => {
                let value = self.eval(x0);
                let n = self.points.nrows();
                let d = self.points.ncols();
                let mut flat = self.points.iter().copied().collect::<Vec<f64>>();
                flat.extend_from_slice(x0);
                let pts = Array2::from_shape_vec((n + 1, d), flat).unwrap();
                let mut h = self.heights.clone();
                h.push(value - eps);
                (pts, h)
            }
        };
        Self::lower_convex_hull(points.view(), &heights)
    }

    pub fn dim(&self) -> usize {
        self.points.ncols()
    }

    pub fn sites(&self) -> ArrayView2<'_, f64> {
        self.points.view()
    }

    pub fn heights(&self) -> &[f64] {
        &self.heights
    }

    pub fn simplices(&self) -> &[SimplexCell] {
        &self.simplices
    }

    pub fn active(&self) -> &[bool] {
        &self.active
    }

    /// Sites that are vertices of the lower hull.
    pub fn knots(&self) -> Vec<usize> {
        (0..self.active.len()).filter(|&i| self.active[i]).collect()
    }

    /// Evaluate the function; `+∞` outside `conv(X)`.
    pub fn eval(&self, x: &[f64]) -> f64 {
        match self.locator.locate(self.points.view(), &self.simplices, x) {
            Some(cell) => {
                let s = &self.simplices[cell];
                s.a.iter().zip(x).map(|(ai, xi)| ai * xi).sum::<f64>() + s.b
            }
            None => f64::INFINITY,
        }
    }

    /// Minimum over the domain (attained at a knot).
    pub fn min_value(&self) -> f64 {
        self.knots().iter().map(|&i| self.heights[i]).fold(f64::INFINITY, f64::min)
    }

    /// Maximum over the domain (attained at a hull vertex of the sites).
    pub fn max_value(&self) -> f64 {
        self.knots().iter().map(|&i| self.heights[i]).fold(f64::NEG_INFINITY, f64::max)
    }

    /// Site index attaining the minimum.
    pub fn argmin_site(&self) -> usize {
        let mut best = 0;
        for i in 1..self.heights.len() {
            if self.heights[i] < self.heights[best] {
                best = i;
            }
        }
        best
    }

    /// Translate the function by a constant.
    pub fn shift(&self, c: f64) -> Self {
        let mut out = self.clone();
        for h in &mut out.heights {
            *h += c;
        }
        for s in &mut out.simplices {
            s.b += c;
        }
        out
    }

    /// Axis-aligned bounding box of the sites as `(lo, hi)` vectors.
    pub fn bounding_box(&self) -> (Vec<f64>, Vec<f64>) {
        let d = self.dim();
        let mut lo = vec![f64::INFINITY; d];
        let mut hi = vec![f64::NEG_INFINITY; d];
        for row in self.points.rows() {
            for c in 0..d {
                lo[c] = lo[c].min(row[c]);
                hi[c] = hi[c].max(row[c]);
            }
        }
        (lo, hi)
    }

    /// Strict interiority in `conv(X)` with a relative margin.
    pub fn contains_interior(&self, x: &[f64]) -> bool {
        let (lo, hi) = self.bounding_box();
        let scale: f64 = lo
            .iter()
            .zip(&hi)
            .map(|(l, h)| (h - l).abs())
            .fold(0.0f64, f64::max)
            .max(1.0);
        self.boundary.iter().all(|hs| hs.margin(x) > 1e-12 * scale)
    }

    /// Containing cell and its barycentric coordinates for `x`, if any.
    pub fn locate_cell(&self, x: &[f64]) -> Option<(usize, Vec<f64>)> {
        let cell = self.locator.locate(self.points.view(), &self.simplices, x)?;
        let lam = self.locator.barycentric(self.points.view(), &self.simplices, cell, x)?;
        Some((cell, lam))
    }

    /// Unique subgradient on a cell interior; on shared faces returns one
    /// active slope with `unique = false`.
    pub fn subgradient(&self, x: &[f64]) -> Result<Subgradient, GeomError> {
        let candidates = self.locator.locate_all(self.points.view(), &self.simplices, x);
        if candidates.is_empty() {
            return Err(GeomError::OutsideDomain(format!("{x:?} outside conv(X)")));
        }
        let strict: Vec<usize> = candidates
            .iter()
            .copied()
            .filter(|&c| {
                self.locator
                    .barycentric(self.points.view(), &self.simplices, c, x)
                    .map(|l| l.iter().all(|&v| v > 1e-9))
                    .unwrap_or(false)
            })
            .collect();
        if strict.len() == 1 {
            return Ok(Subgradient { vector: self.simplices[strict[0]].a.clone(), unique: true });
        }
        Ok(Subgradient { vector: self.simplices[candidates[0]].a.clone(), unique: false })
    }

    /// Minimal-norm vector in the convex hull of the slopes of every cell
    /// containing `x`. Equals the usual subgradient on cell interiors and
    /// gives the natural supporting slope at kinks and minima.
    pub fn min_norm_subgradient(&self, x: &[f64]) -> Result<Vec<f64>, GeomError> {
        let cells = self.locator.locate_all(self.points.view(), &self.simplices, x);
        if cells.is_empty() {
            return Err(GeomError::OutsideDomain(format!("{x:?} outside conv(X)")));
        }
        let slopes: Vec<&[f64]> = cells.iter().map(|&c| self.simplices[c].a.as_slice()).collect();
        Ok(min_norm_combination(&slopes))
    }

    /// Monte Carlo Lebesgue measure of `{g ≤ y}` (or its complement inside
    /// `conv(X)`) by uniform sampling over the bounding box.
    pub fn sublevel_measure(
        &self,
        y: f64,
        region: LevelRegion,
        mc_budget: usize,
        seed: u64,
    ) -> Result<McEstimate, GeomError> {
        if mc_budget < 10_000 {
            return Err(GeomError::BudgetTooSmall(mc_budget));
        }
        let (lo, hi) = self.bounding_box();
        let box_vol: f64 = lo.iter().zip(&hi).map(|(l, h)| h - l).product();
        let mut stream = SeedStream::new(seed, "sublevel-measure");
        let mut hits = 0usize;
        let mut x = vec![0.0; self.dim()];
        for _ in 0..mc_budget {
            for c in 0..self.dim() {
                x[c] = lo[c] + (hi[c] - lo[c]) * stream.next_f64();
            }
            let v = self.eval(&x);
            let inside = match region {
                LevelRegion::Sublevel => v <= y,
                LevelRegion::Superlevel => v.is_finite() && v > y,
            };
            if inside {
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

fn dot(a: &[f64], x: ArrayView1<'_, f64>) -> f64 {
    a.iter().zip(x.iter()).map(|(ai, xi)| ai * xi).sum()
}

/// Solve `a·X_v + b = q_v` over the cell vertices.
fn solve_affine(
    points: ArrayView2<'_, f64>,
    heights: &[f64],
    cell: &[usize],
) -> Option<(Vec<f64>, f64)> {
    let d = points.ncols();
    let m = d + 1;
    let mut a = vec![vec![0.0; m + 1]; m];
    for (r, &v) in cell.iter().enumerate() {
        for c in 0..d {
            a[r][c] = points[(v, c)];
        }
        a[r][d] = 1.0;
        a[r][m] = heights[v];
    }
    gauss_solve(&mut a).map(|sol| {
        let b = sol[d];
        (sol[..d].to_vec(), b)
    })
}

/// Partial-pivot Gaussian elimination on an augmented `m×(m+1)` system.
pub(crate) fn gauss_solve(a: &mut [Vec<f64>]) -> Option<Vec<f64>> {
    let m = a.len();
    for k in 0..m {
        let piv = (k..m).max_by(|&i, &j| a[i][k].abs().partial_cmp(&a[j][k].abs()).unwrap())?;
        if a[piv][k].abs() < 1e-300 {
            return None;
        }
        a.swap(piv, k);
        for i in k + 1..m {
            let f = a[i][k] / a[k][k];
            for j in k..=m {
                a[i][j] -= f * a[k][j];
            }
        }
    }
    let mut x = vec![0.0; m];
    for k in (0..m).rev() {
        let mut s = a[k][m];
        for j in k + 1..m {
            s -= a[k][j] * x[j];
        }
        x[k] = s / a[k][k];
    }
    Some(x)
}

pub(crate) fn simplex_volume(points: ArrayView2<'_, f64>, cell: &[usize]) -> f64 {
    let d = points.ncols();
    let mut m = vec![vec![0.0; d]; d];
    for i in 1..=d {
        for c in 0..d {
            m[i - 1][c] = points[(cell[i], c)] - points[(cell[0], c)];
        }
    }
    let mut det = 1.0;
    // Plain elimination; the magnitude is tolerance-checked by callers.
    for k in 0..d {
        let piv = (k..d).max_by(|&i, &j| m[i][k].abs().partial_cmp(&m[j][k].abs()).unwrap());
        let piv = piv.unwrap();
        if m[piv][k] == 0.0 {
            return 0.0;
        }
        if piv != k {
            m.swap(piv, k);
            det = -det;
        }
        det *= m[k][k];
        for i in k + 1..d {
            let f = m[i][k] / m[k][k];
            for j in k..d {
                m[i][j] -= f * m[k][j];
            }
        }
    }
    let mut fact = 1.0;
    for i in 2..=d {
        fact *= i as f64;
    }
    det.abs() / fact
}

/// Minimal-norm point in the convex hull of the given vectors, by
/// projected-gradient iterations on the simplex of mixture weights.
pub(crate) fn min_norm_combination(vecs: &[&[f64]]) -> Vec<f64> {
    let k = vecs.len();
    let d = vecs[0].len();
    if k == 1 {
        return vecs[0].to_vec();
    }
    let mut lambda = vec![1.0 / k as f64; k];
    let gram: Vec<Vec<f64>> = (0..k)
        .map(|i| (0..k).map(|j| vecs[i].iter().zip(vecs[j]).map(|(a, b)| a * b).sum()).collect())
        .collect();
    let lip: f64 = (0..k).map(|i| gram[i][i]).sum::<f64>().max(1e-12);
    let step = 1.0 / lip;
    for _ in 0..500 {
        let grad: Vec<f64> =
            (0..k).map(|i| 2.0 * (0..k).map(|j| gram[i][j] * lambda[j]).sum::<f64>()).collect();
        for i in 0..k {
            lambda[i] -= step * grad[i];
        }
        project_simplex(&mut lambda);
    }
    let mut out = vec![0.0; d];
    for i in 0..k {
        for c in 0..d {
            out[c] += lambda[i] * vecs[i][c];
        }
    }
    out
}

fn project_simplex(v: &mut [f64]) {
    let k = v.len();
    let mut u: Vec<f64> = v.to_vec();
    u.sort_by(|a, b| b.partial_cmp(a).unwrap());
    let mut css = 0.0;
    let mut rho = 0;
    let mut theta = 0.0;
    for (i, &ui) in u.iter().enumerate() {
        css += ui;
        let t = (css - 1.0) / (i + 1) as f64;
        if ui - t > 0.0 {
            rho = i;
            theta = t;
        }
    }
    let _ = rho;
    for vi in v.iter_mut().take(k) {
        *vi = (*vi - theta).max(0.0);
    }
}

#[derive(Debug, Clone)]
struct HalfSpace {
    normal: Vec<f64>,
    offset: f64,
}

impl HalfSpace {
    /// Positive inside the domain.
    fn margin(&self, x: &[f64]) -> f64 {
        self.offset - self.normal.iter().zip(x).map(|(n, xi)| n * xi).sum::<f64>()
    }
}

/// Outer half-space description of `conv(X)` from the faces of the
/// triangulation that belong to a single cell.
fn boundary_halfspaces(points: ArrayView2<'_, f64>, cells: &[SimplexCell]) -> Vec<HalfSpace> {
    use std::collections::HashMap;
    let d = points.ncols();
    let mut face_count: HashMap<Vec<usize>, (usize, usize)> = HashMap::new();
    for (ci, cell) in cells.iter().enumerate() {
        for k in 0..cell.vertices.len() {
            let mut face: Vec<usize> = cell
                .vertices
                .iter()
                .enumerate()
                .filter(|(j, _)| *j != k)
                .map(|(_, &v)| v)
                .collect();
            face.sort_unstable();
            face_count
                .entry(face)
                .and_modify(|e| e.0 += 1)
                .or_insert((1, ci * (d + 1) + k));
        }
    }
    let mut out = Vec::new();
    for (face, (count, code)) in face_count {
        if count != 1 {
            continue;
        }
        let (ci, k) = (code / (d + 1), code % (d + 1));
        let opposite = cells[ci].vertices[k];
        // Hyperplane through the face, oriented so the opposite vertex of
        // the owning cell (an interior witness) has positive margin.
        if let Some((normal, offset)) = face_hyperplane(points, &face) {
            let hs = HalfSpace { normal, offset };
            let w: Vec<f64> = points.row(opposite).to_vec();
            if hs.margin(&w) >= 0.0 {
                out.push(hs);
            } else {
                out.push(HalfSpace {
                    normal: hs.normal.iter().map(|v| -v).collect(),
                    offset: -hs.offset,
                });
            }
        }
    }
    out
}

/// Unit-free hyperplane `n·x = c` through `d` affinely independent points.
fn face_hyperplane(points: ArrayView2<'_, f64>, face: &[usize]) -> Option<(Vec<f64>, f64)> {
    let d = points.ncols();
    match d {
        1 => Some((vec![1.0], points[(face[0], 0)])),
        2 => {
            let (p, q) = (points.row(face[0]), points.row(face[1]));
            let n = vec![q[1] - p[1], p[0] - q[0]];
            let c = n[0] * p[0] + n[1] * p[1];
            Some((n, c))
        }
        3 => {
            let p = points.row(face[0]);
            let u: Vec<f64> = (0..3).map(|c| points[(face[1], c)] - p[c]).collect();
            let v: Vec<f64> = (0..3).map(|c| points[(face[2], c)] - p[c]).collect();
            let n = vec![
                u[1] * v[2] - u[2] * v[1],
                u[2] * v[0] - u[0] * v[2],
                u[0] * v[1] - u[1] * v[0],
            ];
            let c = n.iter().zip(p.iter()).map(|(ni, pi)| ni * pi).sum();
            Some((n, c))
        }
        _ => None,
    }
}

/// Uniform-bucket point locator over the triangulation.
#[derive(Debug, Clone, Default)]
struct Locator {
    lo: Vec<f64>,
    hi: Vec<f64>,
    res: Vec<usize>,
    buckets: Vec<Vec<u32>>,
    /// Per-cell inverse barycentric matrices, row-major `(d+1)²` blocks;
    /// NaN block marks an unlocatable sliver.
    inv: Vec<f64>,
    dim: usize,
}

impl Locator {
    fn build(points: ArrayView2<'_, f64>, cells: &[SimplexCell]) -> Self {
        let d = points.ncols();
        let m = d + 1;
        let mut lo = vec![f64::INFINITY; d];
        let mut hi = vec![f64::NEG_INFINITY; d];
        for row in points.rows() {
            for c in 0..d {
                lo[c] = lo[c].min(row[c]);
                hi[c] = hi[c].max(row[c]);
            }
        }
        for c in 0..d {
            if hi[c] - lo[c] < 1e-300 {
                hi[c] = lo[c] + 1e-300;
            }
        }
        let per_dim = ((cells.len() as f64).powf(1.0 / d as f64).ceil() as usize).clamp(1, 64);
        let res = vec![per_dim; d];
        let total: usize = res.iter().product();
        let mut buckets = vec![Vec::new(); total];

        let mut inv = Vec::with_capacity(cells.len() * m * m);
        for cell in cells {
            // Invert [[X_v],[1]] columns to get barycentric coordinates.
            let mut aug = vec![vec![0.0; 2 * m]; m];
            for (col, &v) in cell.vertices.iter().enumerate() {
                for r in 0..d {
                    aug[r][col] = points[(v, r)];
                }
                aug[d][col] = 1.0;
            }
            for r in 0..m {
                aug[r][m + r] = 1.0;
            }
            let ok = invert_in_place(&mut aug, m);
            for r in 0..m {
                for c in 0..m {
                    inv.push(if ok { aug[r][m + c] } else { f64::NAN });
                }
            }
        }

        for (ci, cell) in cells.iter().enumerate() {
            let mut clo = vec![f64::INFINITY; d];
            let mut chi = vec![f64::NEG_INFINITY; d];
            for &v in &cell.vertices {
                for c in 0..d {
                    clo[c] = clo[c].min(points[(v, c)]);
                    chi[c] = chi[c].max(points[(v, c)]);
                }
            }
            let idx_lo: Vec<usize> =
                (0..d).map(|c| bucket_index(clo[c], lo[c], hi[c], res[c])).collect();
            let idx_hi: Vec<usize> =
                (0..d).map(|c| bucket_index(chi[c], lo[c], hi[c], res[c])).collect();
            let mut cursor = idx_lo.clone();
            loop {
                let flat = flatten(&cursor, &res);
                buckets[flat].push(ci as u32);
                // Advance the multi-index.
                let mut carry = 0;
                loop {
                    if cursor[carry] < idx_hi[carry] {
                        cursor[carry] += 1;
                        break;
                    }
                    cursor[carry] = idx_lo[carry];
                    carry += 1;
                    if carry == d {
                        break;
                    }
                }
                if carry == d {
                    break;
                }
            }
        }
        Locator { lo, hi, res, buckets, inv, dim: d }
    }

    fn barycentric(
        &self,
        _points: ArrayView2<'_, f64>,
        _cells: &[SimplexCell],
        cell: usize,
        x: &[f64],
    ) -> Option<Vec<f64>> {
        let d = self.dim;
        let m = d + 1;
        let block = &self.inv[cell * m * m..(cell + 1) * m * m];
        if block[0].is_nan() {
            return None;
        }
        let mut lam = vec![0.0; m];
        for (r, l) in lam.iter_mut().enumerate() {
            let mut s = block[r * m + d]; // times homogeneous 1
            for c in 0..d {
                s += block[r * m + c] * x[c];
            }
            *l = s;
        }
        Some(lam)
    }

    fn candidates(&self, x: &[f64]) -> Option<&[u32]> {
        let d = self.dim;
        for c in 0..d {
            let pad = 1e-9 * (self.hi[c] - self.lo[c]).max(1.0);
            if x[c] < self.lo[c] - pad || x[c] > self.hi[c] + pad {
                return None;
            }
        }
        let idx: Vec<usize> =
            (0..d).map(|c| bucket_index(x[c], self.lo[c], self.hi[c], self.res[c])).collect();
        Some(&self.buckets[flatten(&idx, &self.res)])
    }

    fn locate(
        &self,
        points: ArrayView2<'_, f64>,
        cells: &[SimplexCell],
        x: &[f64],
    ) -> Option<usize> {
        let cand = self.candidates(x)?;
        let mut best: Option<(usize, f64)> = None;
        for &ci in cand {
            if let Some(lam) = self.barycentric(points, cells, ci as usize, x) {
                let m = lam.iter().copied().fold(f64::INFINITY, f64::min);
                if best.map(|(_, bm)| m > bm).unwrap_or(true) {
                    best = Some((ci as usize, m));
                }
            }
        }
        match best {
            Some((ci, m)) if m >= -1e-9 => Some(ci),
            _ => {
                // Bucket miss (sliver boundaries): fall back to a scan.
                let mut best: Option<(usize, f64)> = None;
                for ci in 0..cells.len() {
                    if let Some(lam) = self.barycentric(points, cells, ci, x) {
                        let m = lam.iter().copied().fold(f64::INFINITY, f64::min);
                        if best.map(|(_, bm)| m > bm).unwrap_or(true) {
                            best = Some((ci, m));
                        }
                    }
                }
                best.filter(|&(_, m)| m >= -1e-7).map(|(ci, _)| ci)
            }
        }
    }

    fn locate_all(
        &self,
        points: ArrayView2<'_, f64>,
        cells: &[SimplexCell],
        x: &[f64],
    ) -> Vec<usize> {
        let Some(cand) = self.candidates(x) else { return Vec::new() };
        let mut out = Vec::new();
        for &ci in cand {
            if let Some(lam) = self.barycentric(points, cells, ci as usize, x) {
                if lam.iter().all(|&v| v >= -1e-9) {
                    out.push(ci as usize);
                }
            }
        }
        if out.is_empty() {
            if let Some(ci) = self.locate(points, cells, x) {
                out.push(ci);
            }
        }
        out
    }
}

fn bucket_index(x: f64, lo: f64, hi: f64, res: usize) -> usize {
    let t = ((x - lo) / (hi - lo) * res as f64).floor();
    (t.max(0.0) as usize).min(res - 1)
}

fn flatten(idx: &[usize], res: &[usize]) -> usize {
    let mut flat = 0;
    for (i, &v) in idx.iter().enumerate() {
        flat = flat * res[i] + v;
    }
    flat
}

fn invert_in_place(aug: &mut [Vec<f64>], m: usize) -> bool {
    for k in 0..m {
        let piv = (k..m).max_by(|&i, &j| aug[i][k].abs().partial_cmp(&aug[j][k].abs()).unwrap());
        let piv = piv.unwrap();
        if aug[piv][k].abs() < 1e-250 {
            return false;
        }
        aug.swap(piv, k);
        let p = aug[k][k];
        for j in 0..2 * m {
            aug[k][j] /= p;
        }
        for i in 0..m {
            if i != k {
                let f = aug[i][k];
                if f != 0.0 {
                    for j in 0..2 * m {
                        aug[i][j] -= f * aug[k][j];
                    }
                }
            }
        }
    }
    true
}

/// Value of the lower hull at a query point computed from first principles:
/// minimize `Σ λ_i h_i` over convex combinations of sites reproducing the
/// query. Exponential in the site count; test oracle only.
pub fn hull_value_bruteforce(
    points: ArrayView2<'_, f64>,
    heights: &[f64],
    x: &[f64],
) -> Option<f64> {
    let n = points.nrows();
    let d = points.ncols();
    let mut best: Option<f64> = None;
    let mut subset = vec![0usize; d + 1];
    fn rec(
        points: ArrayView2<'_, f64>,
        heights: &[f64],
        x: &[f64],
        subset: &mut Vec<usize>,
        depth: usize,
        start: usize,
        best: &mut Option<f64>,
    ) {
        let d = points.ncols();
        if depth == d + 1 {
            // Solve for barycentric coordinates of x in this subset.
            let m = d + 1;
            let mut aug = vec![vec![0.0; m + 1]; m];
            for (col, &v) in subset.iter().enumerate() {
                for r in 0..d {
                    aug[r][col] = points[(v, r)];
                }
                aug[d][col] = 1.0;
            }
            for r in 0..d {
                aug[r][m] = x[r];
            }
            aug[d][m] = 1.0;
            if let Some(lam) = gauss_solve(&mut aug) {
                if lam.iter().all(|&l| l >= -1e-9) {
                    let v: f64 =
                        lam.iter().zip(subset.iter()).map(|(l, &s)| l * heights[s]).sum();
                    if best.map(|b| v < b).unwrap_or(true) {
                        *best = Some(v);
                    }
                }
            }
            return;
        }
        for i in start..points.nrows() {
            subset[depth] = i;
            rec(points, heights, x, subset, depth + 1, i + 1, best);
        }
    }
    rec(points, heights, x, &mut subset, 0, 0, &mut best);
    let _ = n;
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn vshape() -> PolyhedralFn {
        let pts = array![[-2.0], [0.0], [2.0]];
        PolyhedralFn::lower_convex_hull(pts.view(), &[2.0, 0.0, 2.0]).unwrap()
    }

    #[test]
    fn hull_1d_examples() {
        let pts = array![[0.0], [1.0], [2.0]];
        let f = PolyhedralFn::lower_convex_hull(pts.view(), &[0.0, 1.0, 0.0]).unwrap();
        assert_eq!(f.heights(), &[0.0, 0.0, 0.0]);
        assert_eq!(f.active(), &[true, false, true]);

        let f = PolyhedralFn::lower_convex_hull(pts.view(), &[0.0, -1.0, 0.0]).unwrap();
        assert_eq!(f.heights(), &[0.0, -1.0, 0.0]);
        assert_eq!(f.active(), &[true, true, true]);
        assert_eq!(f.simplices().len(), 2);
        let mut slopes: Vec<f64> = f.simplices().iter().map(|s| s.a[0]).collect();
        slopes.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert_eq!(slopes, vec![-1.0, 1.0]);
        assert_eq!(f.eval(&[0.5]), -0.5);
    }

    #[test]
    fn hull_2d_square_with_center() {
        let pts = array![[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0], [0.5, 0.5]];
        let heights = [1.0, 1.0, 1.0, 1.0, 0.0];
        let f = PolyhedralFn::lower_convex_hull(pts.view(), &heights).unwrap();
        assert!(f.active().iter().all(|&a| a));
        assert_eq!(f.simplices().len(), 4);
        let q = [0.25, 0.25];
        let direct = f.eval(&q);
        let oracle = hull_value_bruteforce(pts.view(), &heights, &q).unwrap();
        assert!((direct - 0.5).abs() < 1e-12);
        assert!((direct - oracle).abs() < 1e-9);
    }

    #[test]
    fn eval_outside_is_infinite() {
        let f = vshape();
        assert_eq!(f.eval(&[5.0]), f64::INFINITY);
        assert_eq!(f.eval(&[-2.0]), 2.0);
    }

    #[test]
    fn subgradient_on_pieces() {
        let f = vshape();
        let s = f.subgradient(&[-0.5]).unwrap();
        assert!(s.unique);
        assert!((s.vector[0] + 1.0).abs() < 1e-12);
        let kink = f.subgradient(&[0.0]).unwrap();
        assert!(!kink.unique);
        let mn = f.min_norm_subgradient(&[0.0]).unwrap();
        assert!(mn[0].abs() < 1e-6);
    }

    #[test]
    fn sublevel_measure_interval() {
        let f = vshape();
        let est = f.sublevel_measure(1.0, LevelRegion::Sublevel, 200_000, 7).unwrap();
        assert!((est.value - 2.0).abs() < 3.0 * est.std_error + 0.02);
        let empty = f.sublevel_measure(-0.5, LevelRegion::Sublevel, 10_000, 7).unwrap();
        assert_eq!(empty.value, 0.0);
    }

    #[test]
    fn dip_creates_v_shape() {
        let pts = array![[0.0], [2.0]];
        let f = PolyhedralFn::lower_convex_hull(pts.view(), &[0.0, 0.0]).unwrap();
        let dipped = f.with_dip(&[1.0], 1.0).unwrap();
        assert!((dipped.eval(&[1.0]) + 1.0).abs() < 1e-12);
        assert!((dipped.eval(&[0.5]) + 0.5).abs() < 1e-12);
        let same = f.with_dip(&[1.0], 0.0).unwrap();
        assert_eq!(same.eval(&[0.7]), 0.0);
        assert!(f.with_dip(&[0.0], 0.5).is_err(), "boundary dip refused");
    }

    #[test]
    fn hull_idempotent() {
        let pts = array![[0.0, 0.0], [1.3, 0.2], [0.4, 1.1], [0.9, 0.9], [0.5, 0.4]];
        let heights = [0.3, 0.9, 1.2, 2.0, -0.4];
        let f = PolyhedralFn::lower_convex_hull(pts.view(), &heights).unwrap();
        let g = PolyhedralFn::lower_convex_hull(pts.view(), f.heights()).unwrap();
        assert_eq!(f.heights(), g.heights());
        assert_eq!(f.active(), g.active());
    }

    #[test]
    fn serde_round_trip_schema() {
        let f = vshape();
        let js = serde_json::to_value(&f).unwrap();
        assert!(js.get("points").is_some());
        assert!(js.get("heights").is_some());
        assert!(js["simplices"][0].get("vertices").is_some());
        assert!(js["simplices"][0].get("volume").is_some());
        let back: PolyhedralFn = serde_json::from_value(js).unwrap();
        assert_eq!(back.eval(&[0.5]), f.eval(&[0.5]));
    }
}
