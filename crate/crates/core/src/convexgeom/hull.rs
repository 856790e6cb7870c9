//! Incremental convex hull in the lifted space `R^{d+1}`.
//!
//! The lower convex hull of sites `(X_i, q_i)` is computed by a
//! beneath-beyond incremental insertion with per-facet conflict lists,
//! supported dimensions `d ∈ {1, 2, 3}` (`d = 1` via a monotone chain).
//! Orientation queries go through the exact-sign predicates; coplanar ties
//! are broken by the lexicographic height perturbation, so the produced
//! triangulation is deterministic for a fixed input order.

use ndarray::ArrayView2;

use super::predicates::{affinely_independent, orient, orient_lifted};
use super::GeomError;

/// Simplicial cells (vertex index tuples of size `d+1`) of the lower hull,
/// projected to site space. Together they partition `conv(X)`.
pub(crate) fn lower_hull_triangulation(
    points: ArrayView2<'_, f64>,
    heights: &[f64],
) -> Result<Vec<Vec<usize>>, GeomError> {
    let n = points.nrows();
    let d = points.ncols();
    assert_eq!(heights.len(), n, "one height per site");
    if d == 0 || d > 3 {
        return Err(GeomError::UnsupportedDimension(d));
    }
    if n < d + 1 {
        return Err(GeomError::DegenerateInput(format!(
            "need at least {} sites in dimension {d}, got {n}",
            d + 1
        )));
    }
    for i in 0..n {
        if !heights[i].is_finite() || points.row(i).iter().any(|c| !c.is_finite()) {
            return Err(GeomError::DegenerateInput(format!("site {i} is not finite")));
        }
    }
    if d == 1 {
        return lower_chain_1d(points, heights);
    }
    if n == d + 1 {
        // A single full-dimensional simplex is its own triangulation.
        let rows: Vec<_> = (0..n).map(|i| points.row(i)).collect();
        let refs: Vec<&[f64]> = rows.iter().map(|r| r.as_slice().unwrap()).collect();
        return if affinely_independent(&refs) {
            Ok(vec![(0..n).collect()])
        } else {
            Err(GeomError::DegenerateInput(
                "sites do not span the ambient dimension".into(),
            ))
        };
    }

    let lifted = LiftedPoints { xs: points.view(), qs: heights };
    match IncrementalHull::build(&lifted) {
        Ok(hull) => Ok(hull.lower_facets(&lifted)),
        Err(HullDegeneracy::NotFullDimensional) => Err(GeomError::DegenerateInput(
            "sites do not span the ambient dimension".into(),
        )),
    }
}

/// Triangulation of the convex hull of the sites themselves (heights
/// ignored). Used for uniform sampling over polytopes and as an
/// independent volume oracle.
pub(crate) fn site_triangulation(
    points: ArrayView2<'_, f64>,
) -> Result<Vec<Vec<usize>>, GeomError> {
    let zeros = vec![0.0; points.nrows()];
    lower_hull_triangulation(points, &zeros)
}

fn lower_chain_1d(
    points: ArrayView2<'_, f64>,
    heights: &[f64],
) -> Result<Vec<Vec<usize>>, GeomError> {
    let n = points.nrows();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| {
        points[(i, 0)]
            .partial_cmp(&points[(j, 0)])
            .unwrap()
            .then(heights[i].partial_cmp(&heights[j]).unwrap())
            .then(i.cmp(&j))
    });
    if points[(order[0], 0)] == points[(*order.last().unwrap(), 0)] {
        return Err(GeomError::DegenerateInput("all sites coincide".into()));
    }
    // Andrew scan keeping the lower chain; ties resolved by the height
    // perturbation so collinear middles drop deterministically.
    let mut chain: Vec<usize> = Vec::new();
    for &i in &order {
        if let Some(&last) = chain.last() {
            if points[(last, 0)] == points[(i, 0)] {
                continue; // higher lifted point at the same abscissa
            }
        }
        while chain.len() >= 2 {
            let a = chain[chain.len() - 2];
            let b = chain[chain.len() - 1];
            let pa = [points[(a, 0)]];
            let pb = [points[(b, 0)]];
            let pi = [points[(i, 0)]];
            let sign = orient_lifted(
                &[&pa, &pb, &pi],
                &[heights[a], heights[b], heights[i]],
                &[Some(a), Some(b), Some(i)],
            );
            // Positive orientation = counterclockwise = b below chord a-i.
            if sign > 0 {
                break;
            }
            chain.pop();
        }
        chain.push(i);
    }
    Ok(chain.windows(2).map(|w| vec![w[0], w[1]]).collect())
}

struct LiftedPoints<'a> {
    xs: ArrayView2<'a, f64>,
    qs: &'a [f64],
}

impl LiftedPoints<'_> {
    fn len(&self) -> usize {
        self.xs.nrows()
    }

    fn dim(&self) -> usize {
        self.xs.ncols()
    }

    /// Orientation of the lifted points `ids` (of size `d+2`), with height
    /// perturbation by site index.
    fn orient(&self, ids: &[usize]) -> i8 {
        let rows: Vec<_> = ids.iter().map(|&i| self.xs.row(i)).collect();
        let refs: Vec<&[f64]> = rows.iter().map(|r| r.as_slice().unwrap()).collect();
        let qs: Vec<f64> = ids.iter().map(|&i| self.qs[i]).collect();
        let idx: Vec<Option<usize>> = ids.iter().map(|&i| Some(i)).collect();
        orient_lifted(&refs, &qs, &idx)
    }

    /// Float-only orientation magnitude used to pick the furthest conflict
    /// point; correctness does not depend on it.
    fn rough_height_above(&self, facet: &[usize], p: usize) -> f64 {
        let d = self.dim();
        let mut m = vec![vec![0.0; d + 1]; d + 1];
        for (r, &v) in facet.iter().skip(1).enumerate() {
            for c in 0..d {
                m[r][c] = self.xs[(v, c)] - self.xs[(facet[0], c)];
            }
            m[r][d] = self.qs[v] - self.qs[facet[0]];
        }
        for c in 0..d {
            m[d][c] = self.xs[(p, c)] - self.xs[(facet[0], c)];
        }
        m[d][d] = self.qs[p] - self.qs[facet[0]];
        det_float(&m).abs()
    }
}

fn det_float(m: &[Vec<f64>]) -> f64 {
    let n = m.len();
    let mut a: Vec<Vec<f64>> = m.to_vec();
    let mut det = 1.0;
    for k in 0..n {
        let piv = (k..n).max_by(|&i, &j| a[i][k].abs().partial_cmp(&a[j][k].abs()).unwrap());
        let piv = piv.unwrap();
        if a[piv][k] == 0.0 {
            return 0.0;
        }
        if piv != k {
            a.swap(piv, k);
            det = -det;
        }
        det *= a[k][k];
        for i in k + 1..n {
            let f = a[i][k] / a[k][k];
            for j in k..n {
                a[i][j] -= f * a[k][j];
            }
        }
    }
    det
}

enum HullDegeneracy {
    /// The sites themselves do not span `R^d`.
    NotFullDimensional,
}

struct Facet {
    /// Ordered so that `orient(verts ∪ {p}) > 0` means `p` is outside.
    verts: Vec<usize>,
    /// `neigh[k]` lies across the ridge omitting `verts[k]`.
    neigh: Vec<usize>,
    /// Unprocessed points assigned to this facet (each point lives in at
    /// most one conflict list).
    conflicts: Vec<usize>,
    alive: bool,
    /// Facets whose witness degenerated treat every query as not visible.
    opaque: bool,
}

struct IncrementalHull {
    facets: Vec<Facet>,
}

impl IncrementalHull {
    fn build(pts: &LiftedPoints<'_>) -> Result<Self, HullDegeneracy> {
        let n = pts.len();
        let dim = pts.dim() + 1; // lifted ambient dimension

        // Seed: d+1 sites with affinely independent projections plus any
        // further point. The projection independence guarantees a nonzero
        // height cofactor, so the symbolic perturbation always resolves
        // the final orientation even for exactly coaffine lifted points.
        let mut seed: Vec<usize> = vec![0];
        for cand in 1..n {
            if seed.len() == pts.dim() + 1 {
                break;
            }
            let rows: Vec<_> =
                seed.iter().chain(std::iter::once(&cand)).map(|&i| pts.xs.row(i)).collect();
            let refs: Vec<&[f64]> = rows.iter().map(|r| r.as_slice().unwrap()).collect();
            if affinely_independent(&refs) {
                seed.push(cand);
            }
        }
        if seed.len() < pts.dim() + 1 {
            return Err(HullDegeneracy::NotFullDimensional);
        }
        let extra = (0..n).find(|i| !seed.contains(i)).expect("n ≥ d+2 checked by the caller");
        seed.push(extra);

        let mut hull = IncrementalHull { facets: Vec::new() };

        // Initial simplex: facet k omits seed[k]; the omitted vertex is the
        // inside witness fixing the orientation.
        for k in 0..=dim {
            let verts: Vec<usize> =
                seed.iter().enumerate().filter(|(j, _)| *j != k).map(|(_, &v)| v).collect();
            let facet = hull.new_facet(verts, seed[k], pts);
            debug_assert_eq!(facet, k);
        }
        for k in 0..=dim {
            // Neighbor across the ridge omitting verts[j]: the facet that
            // omits that same seed vertex.
            let verts = hull.facets[k].verts.clone();
            hull.facets[k].neigh = verts
                .iter()
                .map(|&v| seed.iter().position(|&s| s == v).unwrap())
                .collect();
        }

        // Initial conflict assignment.
        let in_seed = |i: usize| seed.contains(&i);
        for p in 0..n {
            if in_seed(p) {
                continue;
            }
            let target = (0..hull.facets.len()).find(|&f| hull.visible(f, p, pts));
            if let Some(f) = target {
                hull.facets[f].conflicts.push(p);
            }
        }

        // Main loop: grab any live facet with conflicts, insert its
        // furthest point.
        let mut cursor = 0;
        loop {
            while cursor < hull.facets.len()
                && (!hull.facets[cursor].alive || hull.facets[cursor].conflicts.is_empty())
            {
                cursor += 1;
            }
            if cursor == hull.facets.len() {
                break;
            }
            let fseed = cursor;
            let p = {
                let f = &hull.facets[fseed];
                *f.conflicts
                    .iter()
                    .max_by(|&&a, &&b| {
                        pts.rough_height_above(&f.verts, a)
                            .partial_cmp(&pts.rough_height_above(&f.verts, b))
                            .unwrap()
                            .then(b.cmp(&a))
                    })
                    .unwrap()
            };
            hull.insert(p, fseed, pts);
        }
        Ok(hull)
    }

    fn new_facet(&mut self, mut verts: Vec<usize>, inside_witness: usize, pts: &LiftedPoints<'_>) -> usize {
        let mut ids = verts.clone();
        ids.push(inside_witness);
        let s = pts.orient(&ids);
        let opaque = s == 0;
        if s > 0 {
            verts.swap(0, 1);
        }
        self.facets.push(Facet {
            neigh: vec![usize::MAX; verts.len()],
            verts,
            conflicts: Vec::new(),
            alive: true,
            opaque,
        });
        self.facets.len() - 1
    }

    fn visible(&self, f: usize, p: usize, pts: &LiftedPoints<'_>) -> bool {
        let facet = &self.facets[f];
        if facet.opaque {
            return false;
        }
        let mut ids = facet.verts.clone();
        ids.push(p);
        pts.orient(&ids) > 0
    }

    fn insert(&mut self, p: usize, seed_facet: usize, pts: &LiftedPoints<'_>) {
        // Flood the visible region.
        let mut visible = vec![seed_facet];
        let mut seen = std::collections::HashSet::new();
        seen.insert(seed_facet);
        let mut stack = vec![seed_facet];
        while let Some(f) = stack.pop() {
            let neigh = self.facets[f].neigh.clone();
            for g in neigh {
                if g != usize::MAX && seen.insert(g) && self.facets[g].alive && self.visible(g, p, pts)
                {
                    visible.push(g);
                    stack.push(g);
                }
            }
        }
        let visible_set: std::collections::HashSet<usize> = visible.iter().copied().collect();

        // Horizon ridges → cone facets from p.
        let mut new_facets: Vec<usize> = Vec::new();
        let mut ridge_map: std::collections::HashMap<Vec<usize>, (usize, usize)> =
            std::collections::HashMap::new();
        for &f in &visible {
            for k in 0..self.facets[f].verts.len() {
                let outside = self.facets[f].neigh[k];
                if outside != usize::MAX && visible_set.contains(&outside) {
                    continue;
                }
                let dying_vert = self.facets[f].verts[k];
                let mut verts = self.facets[f].verts.clone();
                verts[k] = p;
                let nf = self.new_facet(verts, dying_vert, pts);
                new_facets.push(nf);
                // Wire the outside neighbor across the horizon ridge.
                let slot = self.facets[nf].verts.iter().position(|&v| v == p).unwrap();
                self.facets[nf].neigh[slot] = outside;
                if outside != usize::MAX {
                    let back = self.facets[outside].neigh.iter().position(|&g| g == f).unwrap();
                    self.facets[outside].neigh[back] = nf;
                }
                // Remaining ridges (those containing p) pair up among the
                // new facets.
                let nverts = self.facets[nf].verts.clone();
                for (j, _) in nverts.iter().enumerate() {
                    if j == slot {
                        continue;
                    }
                    let mut key: Vec<usize> =
                        nverts.iter().enumerate().filter(|(c, _)| *c != j).map(|(_, &v)| v).collect();
                    key.sort_unstable();
                    match ridge_map.remove(&key) {
                        None => {
                            ridge_map.insert(key, (nf, j));
                        }
                        Some((of, oj)) => {
                            self.facets[nf].neigh[j] = of;
                            self.facets[of].neigh[oj] = nf;
                        }
                    }
                }
            }
        }
        debug_assert!(ridge_map.is_empty(), "unmatched cone ridges");

        // Retire the visible region and repartition its conflict points.
        let mut orphans: Vec<usize> = Vec::new();
        for &f in &visible {
            self.facets[f].alive = false;
            orphans.append(&mut self.facets[f].conflicts);
        }
        for q in orphans {
            if q == p {
                continue;
            }
            if let Some(&nf) = new_facets.iter().find(|&&nf| self.visible(nf, q, pts)) {
                self.facets[nf].conflicts.push(q);
            }
        }
    }

    /// Extract the facets of the lower envelope, as site-index tuples.
    ///
    /// A facet is lower iff it is visible from far below, whose limit sign
    /// is the negated orientation of the facet's site projections.
    fn lower_facets(&self, pts: &LiftedPoints<'_>) -> Vec<Vec<usize>> {
        let mut out = Vec::new();
        for facet in self.facets.iter().filter(|f| f.alive && !f.opaque) {
            let rows: Vec<_> = facet.verts.iter().map(|&v| pts.xs.row(v)).collect();
            let refs: Vec<&[f64]> = rows.iter().map(|r| r.as_slice().unwrap()).collect();
            let po = orient(&refs);
            if po == 0 {
                continue; // vertical or sliver facet
            }
            // The witness kept during construction means "inside on the
            // negative side": a synthetic point far below the facet sees it
            // iff its orientation sign (-po) is positive.
            if -po > 0 {
                out.push(facet.verts.clone());
            }
        }
        // Deterministic output order regardless of construction history.
        let mut out: Vec<Vec<usize>> = out
            .into_iter()
            .map(|mut v| {
                v.sort_unstable();
                v
            })
            .collect();
        out.sort();
        out
    }
}
