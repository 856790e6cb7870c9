//! Local deformation families and minimax-rate experiments.
//!
//! The computable content of the local asymptotic minimax lower bounds is
//! the Hellinger scaling of two-sided deformations of a base density
//! `p = h∘g`: an upward bump `max(g, l₀ + ε)` from a lifted support plane,
//! a downward dip through the maximal convex minorant, and a mode-shifting
//! dip at `x₀ + εu`. Each deformation is mixed with a fixed opposite
//! deformation at a second site `x₁` and the mixture weight `θ` is solved
//! so the result is a density again. On a strongly convex base:
//!
//! * `H(p_ε, p) ≍ ε^{(d+4)/4}` for the point deformations,
//! * `θ(ε) = O(ε^{1+d/2})`,
//! * the mode variant scales in `ξ(ε) = g(x₀+εu) − g(x₀) + ε^{γ+1}`.
//!
//! Everything is polyhedral-exact: deformed functions are lower hulls over
//! the base sites plus crease crossings, so mixtures share one refined
//! triangulation for all `θ` and the mixture integral is evaluated in
//! closed form per cell.

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::convexgeom::{ConvexFn, GeomError, PolyhedralFn};
use crate::evalsim::DensityHandle;
use crate::integrate::{normalize, simplex_integral, IntegrateError};
use crate::rng::SeedStream;
use crate::transforms::{Direction, TransformKind};
use crate::Transformation;

#[derive(Debug, Error)]
pub enum LowerBoundError {
    #[error(transparent)]
    Geometry(#[from] GeomError),
    #[error(transparent)]
    Integrate(#[from] IntegrateError),
    #[error("deformation amplitude {eps} exceeds the interference bound {eps_max}")]
    SupportOverlap { eps: f64, eps_max: f64 },
    #[error("mixing-weight root not bracketed: {0}")]
    RootBracketing(String),
    #[error("curvature matrix is not usable: {0}")]
    Curvature(String),
    #[error("{0}")]
    Invalid(String),
}

/// Direction of the primary deformation at `x0`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum DeformationKind {
    /// `D_ε`: pointwise max with the lifted support plane.
    Up,
    /// `D*_ε`: maximal convex minorant of the dipped function.
    Down,
    /// Mode shift along `u` with Hölder exponent `gamma` and constant `l`.
    Mode { u: Vec<f64>, gamma: f64, l: f64 },
}

/// A parameterized family `p_ε` of valid densities deforming a normalized
/// polyhedral base around an interior site `x0`, compensated at `x1`.
#[derive(Debug, Clone)]
pub struct DeformationFamily {
    transform: Transformation,
    base: PolyhedralFn,
    x0: Vec<f64>,
    x1: Vec<f64>,
    delta: f64,
    kind: DeformationKind,
    curvature: Vec<Vec<f64>>,
    lambda_min: f64,
    eps_max: f64,
}

impl DeformationFamily {
    /// Validate geometry and record the interference bound
    /// `ε_max = max dyadic ε with √(2ε/λ_min(G)) < dist(x0, x1)/3`.
    pub fn new(
        transform: Transformation,
        base: PolyhedralFn,
        x0: Vec<f64>,
        x1: Vec<f64>,
        delta: f64,
        kind: DeformationKind,
        curvature: Vec<Vec<f64>>,
    ) -> Result<Self, LowerBoundError> {
        if transform.direction() != Direction::Decreasing {
            return Err(LowerBoundError::Invalid(
                "deformation experiments run on decreasing models".into(),
            ));
        }
        if !base.contains_interior(&x0) || !base.contains_interior(&x1) {
            return Err(LowerBoundError::Invalid(
                "x0 and x1 must be interior to conv(X)".into(),
            ));
        }
        if !(delta > 0.0) {
            return Err(LowerBoundError::Invalid("compensator amplitude must be positive".into()));
        }
        let d = base.dim();
        if curvature.len() != d || curvature.iter().any(|r| r.len() != d) {
            return Err(LowerBoundError::Curvature(format!("G must be {d}×{d}")));
        }
        let eigs = symmetric_eigenvalues(&curvature);
        let lambda_min = eigs.iter().cloned().fold(f64::INFINITY, f64::min);
        if !(lambda_min > 0.0) {
            return Err(LowerBoundError::Curvature(format!(
                "G must be positive definite (λ_min = {lambda_min})"
            )));
        }
        let dist: f64 = x0
            .iter()
            .zip(&x1)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        let mut eps_max = 1.0f64;
        while (2.0 * eps_max / lambda_min).sqrt() >= dist / 3.0 {
            eps_max /= 2.0;
            if eps_max < 1e-12 {
                return Err(LowerBoundError::Invalid(
                    "x1 too close to x0 for any usable ε".into(),
                ));
            }
        }
        let fam = DeformationFamily {
            transform,
            base,
            x0,
            x1,
            delta,
            kind,
            curvature,
            lambda_min,
            eps_max,
        };
        fam.check_strong_convexity()?;
        Ok(fam)
    }

    pub fn base(&self) -> &PolyhedralFn {
        &self.base
    }

    pub fn transform(&self) -> &Transformation {
        &self.transform
    }

    pub fn eps_max(&self) -> f64 {
        self.eps_max
    }

    pub fn x0(&self) -> &[f64] {
        &self.x0
    }

    /// Dyadic grid of the `count` largest admissible ε values.
    pub fn dyadic_eps_grid(&self, count: usize) -> Vec<f64> {
        (0..count).map(|i| self.eps_max / (1u64 << (count - 1 - i)) as f64).collect()
    }

    /// `G ∈ SC(g; x0)` numerically: `g − ½(x−x0)ᵀG(x−x0)` must be convex
    /// over the sites near `x0` (its lower hull reproduces the values).
    fn check_strong_convexity(&self) -> Result<(), LowerBoundError> {
        let d = self.base.dim();
        let radius = (2.0 * self.eps_max / self.lambda_min).sqrt() * 1.5;
        let sites = self.base.sites();
        let mut local: Vec<usize> = Vec::new();
        for (i, row) in sites.rows().into_iter().enumerate() {
            let dist2: f64 =
                row.iter().zip(&self.x0).map(|(a, b)| (a - b) * (a - b)).sum();
            if dist2.sqrt() <= radius {
                local.push(i);
            }
        }
        if local.len() < d + 2 {
            return Ok(()); // not enough local sites to witness a violation
        }
        let flat: Vec<f64> = local
            .iter()
            .flat_map(|&i| sites.row(i).to_vec())
            .collect();
        let pts = Array2::from_shape_vec((local.len(), d), flat).unwrap();
        let vals: Vec<f64> = local
            .iter()
            .map(|&i| {
                let x = sites.row(i);
                let mut quad = 0.0;
                for a in 0..d {
                    for b in 0..d {
                        quad += 0.5
                            * (x[a] - self.x0[a])
                            * self.curvature[a][b]
                            * (x[b] - self.x0[b]);
                    }
                }
                self.base.heights()[i] - quad
            })
            .collect();
        let hull = PolyhedralFn::lower_convex_hull(pts.view(), &vals)?;
        let scale = vals.iter().fold(1.0f64, |m, v| m.max(v.abs()));
        for (h, v) in hull.heights().iter().zip(&vals) {
            if v - h > 1e-7 * scale {
                return Err(LowerBoundError::Curvature(format!(
                    "g − ½(x−x0)ᵀG(x−x0) fails convexity near x0 by {}",
                    v - h
                )));
            }
        }
        Ok(())
    }

    /// Upward deformation `max(g, l₀ + ε)` with `l₀` the support plane at
    /// `x0`, rebuilt exactly on the base sites plus crease crossings.
    pub fn deform_up(&self, eps: f64) -> Result<PolyhedralFn, LowerBoundError> {
        self.deform_up_at(&self.x0, eps)
    }

    fn deform_up_at(&self, site: &[f64], eps: f64) -> Result<PolyhedralFn, LowerBoundError> {
        if !(0.0..=self.eps_max).contains(&eps) {
            return Err(LowerBoundError::SupportOverlap { eps, eps_max: self.eps_max });
        }
        let g = &self.base;
        if eps == 0.0 {
            return Ok(g.clone());
        }
        let v0 = g.min_norm_subgradient(site)?;
        let g0 = g.eval(site);
        let cap = |x: &[f64]| -> f64 {
            g0 + eps + v0.iter().zip(x.iter().zip(site)).map(|(v, (xi, si))| v * (xi - si)).sum::<f64>()
        };

        let d = g.dim();
        let sites = g.sites();
        let mut coords: Vec<f64> = sites.iter().copied().collect();
        let mut heights: Vec<f64> = Vec::with_capacity(g.heights().len() + 16);
        for (i, row) in sites.rows().into_iter().enumerate() {
            heights.push(g.heights()[i].max(cap(row.as_slice().unwrap())));
        }

        // Crease crossings on cell edges: where the cell's affine form
        // meets the lifted plane.
        let mut seen: std::collections::HashSet<[i64; 3]> = std::collections::HashSet::new();
        for cell in g.simplices() {
            for i in 0..cell.vertices.len() {
                for j in i + 1..cell.vertices.len() {
                    let p = sites.row(cell.vertices[i]);
                    let q = sites.row(cell.vertices[j]);
                    let fp = g.heights()[cell.vertices[i]] - cap(p.as_slice().unwrap());
                    let fq = g.heights()[cell.vertices[j]] - cap(q.as_slice().unwrap());
                    if (fp > 0.0) == (fq > 0.0) || fp == fq {
                        continue;
                    }
                    let t = fp / (fp - fq);
                    if !(1e-9..=1.0 - 1e-9).contains(&t) {
                        continue;
                    }
                    let x: Vec<f64> =
                        (0..d).map(|c| p[c] + t * (q[c] - p[c])).collect();
                    let mut key = [0i64; 3];
                    for c in 0..d {
                        key[c] = (x[c] * 1e10).round() as i64;
                    }
                    if seen.insert(key) {
                        coords.extend_from_slice(&x);
                        heights.push(g.eval(&x).max(cap(&x)));
                    }
                }
            }
        }
        let n = heights.len();
        let pts = Array2::from_shape_vec((n, d), coords).unwrap();
        Ok(PolyhedralFn::lower_convex_hull(pts.view(), &heights)?)
    }

    /// Downward deformation: maximal convex minorant with the value at
    /// `x0` dipped by `eps`.
    pub fn deform_down(&self, eps: f64) -> Result<PolyhedralFn, LowerBoundError> {
        if !(0.0..=self.eps_max).contains(&eps) {
            return Err(LowerBoundError::SupportOverlap { eps, eps_max: self.eps_max });
        }
        if eps == 0.0 {
            return Ok(self.base.clone());
        }
        Ok(self.base.with_dip(&self.x0, eps)?)
    }

    fn compensator(&self, primary_up: bool) -> Result<PolyhedralFn, LowerBoundError> {
        if primary_up {
            Ok(self.base.with_dip(&self.x1, self.delta)?)
        } else {
            self.deform_up_at(&self.x1, self.delta)
        }
    }

    /// Mix the primary deformation with the opposite fixed deformation at
    /// `x1` and solve the mixing weight so the result integrates to one.
    pub fn make_valid_density(&self, eps: f64) -> Result<(DensityHandle, f64), LowerBoundError> {
        let primary_up = match self.kind {
            DeformationKind::Up => true,
            DeformationKind::Down | DeformationKind::Mode { .. } => false,
        };
        let primary = match &self.kind {
            DeformationKind::Up => self.deform_up(eps)?,
            DeformationKind::Down => self.deform_down(eps)?,
            DeformationKind::Mode { .. } => return Err(LowerBoundError::Invalid(
                "mode families build densities through deform_mode".into(),
            )),
        };
        let comp = self.compensator(primary_up)?;
        let (g_theta, theta) = self.mix_to_density(&primary, &comp)?;
        Ok((
            DensityHandle::Polyhedral { transform: self.transform, g: g_theta },
            theta,
        ))
    }

    /// Mode deformation: dip the minorant at the shifted site `x0 + εu`
    /// with depth `ξ(ε) = g(x0+εu) − g(x0) + ε^{γ+1}`, mix with the
    /// compensator, and verify the new argmin.
    pub fn deform_mode(&self, eps: f64) -> Result<ModeDeformation, LowerBoundError> {
        let DeformationKind::Mode { u, gamma, l } = &self.kind else {
            return Err(LowerBoundError::Invalid("family is not a mode deformation".into()));
        };
        let d = self.base.dim();
        // Base must attain its unique minimum at x0.
        let argmin = self.base.argmin_site();
        let xmin = self.base.sites().row(argmin).to_vec();
        let dist: f64 =
            xmin.iter().zip(&self.x0).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        if dist > 1e-9 {
            return Err(LowerBoundError::Invalid(format!(
                "base argmin {xmin:?} is not the deformation site {:?}",
                self.x0
            )));
        }
        if eps == 0.0 {
            return Ok(ModeDeformation {
                handle: DensityHandle::Polyhedral {
                    transform: self.transform,
                    g: self.base.clone(),
                },
                new_argmin: self.x0.clone(),
                theta: 0.0,
                xi: 0.0,
            });
        }
        let shifted: Vec<f64> = (0..d).map(|c| self.x0[c] + eps * u[c]).collect();
        let g_shift = self.base.eval(&shifted);
        let g0 = self.base.eval(&self.x0);
        let xi = (g_shift - g0) + eps.powf(gamma + 1.0);
        if !(xi > 0.0) {
            return Err(LowerBoundError::Invalid(format!("ξ(ε) = {xi} must be positive")));
        }
        if xi > l * eps.powf(*gamma) + eps.powf(gamma + 1.0) + 1e-12 {
            return Err(LowerBoundError::Invalid(format!(
                "ξ(ε) = {xi} violates the Hölder bound with L = {l}"
            )));
        }
        if (2.0 * xi / self.lambda_min).sqrt() >= self.eps_max_radius() {
            return Err(LowerBoundError::SupportOverlap { eps: xi, eps_max: self.eps_max });
        }
        let primary = self.base.with_dip(&shifted, xi)?;
        let comp = self.deform_up_at(&self.x1, self.delta)?;
        let (g_theta, theta) = self.mix_to_density(&primary, &comp)?;
        // The dipped site must be the unique vertex-level minimum.
        let am = g_theta.argmin_site();
        let am_x = g_theta.sites().row(am).to_vec();
        let err: f64 =
            am_x.iter().zip(&shifted).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        if err > 1e-9 {
            return Err(LowerBoundError::Invalid(format!(
                "mode construction lost its argmin: {am_x:?} vs {shifted:?}"
            )));
        }
        Ok(ModeDeformation {
            handle: DensityHandle::Polyhedral { transform: self.transform, g: g_theta },
            new_argmin: shifted,
            theta,
            xi,
        })
    }

    fn eps_max_radius(&self) -> f64 {
        let dist: f64 = self
            .x0
            .iter()
            .zip(&self.x1)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        dist / 3.0
    }

    /// Refined mixture machinery: union sites of both deformations carry
    /// values affine in θ, and one triangulation (taken at θ = ½, where
    /// every crease of either bump is present) is exact for all θ because
    /// convex kinks cannot cancel.
    fn mix_to_density(
        &self,
        primary: &PolyhedralFn,
        comp: &PolyhedralFn,
    ) -> Result<(PolyhedralFn, f64), LowerBoundError> {
        let d = self.base.dim();
        let mut coords: Vec<f64> = Vec::new();
        let mut seen: std::collections::HashSet<[i64; 3]> = std::collections::HashSet::new();
        let mut push = |x: &[f64], coords: &mut Vec<f64>| {
            let mut key = [0i64; 3];
            for c in 0..d {
                key[c] = (x[c] * 1e10).round() as i64;
            }
            if seen.insert(key) {
                coords.extend_from_slice(x);
            }
        };
        for row in self.base.sites().rows() {
            push(row.as_slice().unwrap(), &mut coords);
        }
        for row in primary.sites().rows() {
            push(row.as_slice().unwrap(), &mut coords);
        }
        for row in comp.sites().rows() {
            push(row.as_slice().unwrap(), &mut coords);
        }
        let n = coords.len() / d;
        let pts = Array2::from_shape_vec((n, d), coords).unwrap();

        let mut v_base = Vec::with_capacity(n);
        let mut bump1 = Vec::with_capacity(n);
        let mut bump2 = Vec::with_capacity(n);
        for row in pts.rows() {
            let x = row.as_slice().unwrap();
            let b = self.base.eval(x);
            v_base.push(b);
            bump1.push(primary.eval(x) - b);
            bump2.push(comp.eval(x) - b);
        }

        // Monotone interference guard: the two bumps never touch the same
        // site.
        let scale = v_base.iter().fold(1.0f64, |m, v| m.max(v.abs()));
        for i in 0..n {
            if bump1[i].abs() > 1e-11 * scale && bump2[i].abs() > 1e-11 * scale {
                return Err(LowerBoundError::SupportOverlap {
                    eps: bump1[i].abs(),
                    eps_max: self.eps_max,
                });
            }
        }

        let values = |theta: f64| -> Vec<f64> {
            (0..n)
                .map(|i| v_base[i] + (1.0 - theta) * bump1[i] + theta * bump2[i])
                .collect()
        };
        let skeleton = PolyhedralFn::lower_convex_hull(pts.view(), &values(0.5))?;
        let integral = |theta: f64| -> Result<f64, IntegrateError> {
            let v = values(theta);
            let mut parts = Vec::with_capacity(skeleton.simplices().len());
            for s in skeleton.simplices() {
                if s.volume == 0.0 {
                    parts.push(0.0);
                    continue;
                }
                let vals: Vec<f64> = s.vertices.iter().map(|&ix| v[ix]).collect();
                parts.push(simplex_integral(&self.transform, &vals, s.volume)?);
            }
            Ok(crate::integrate::pairwise_sum(&parts))
        };

        let f0 = integral(0.0)?;
        let f1 = integral(1.0)?;
        if (f0 - 1.0) * (f1 - 1.0) > 0.0 {
            return Err(LowerBoundError::RootBracketing(format!(
                "F(0) = {f0}, F(1) = {f1} on the same side of 1 (ε too large for this base?)"
            )));
        }
        let rising = f1 > f0;
        let (mut a, mut b) = (0.0f64, 1.0f64);
        let mut theta = 0.5;
        for _ in 0..200 {
            theta = 0.5 * (a + b);
            let fm = integral(theta)?;
            if (fm - 1.0).abs() <= 1e-10 {
                break;
            }
            if (fm > 1.0) == rising {
                b = theta;
            } else {
                a = theta;
            }
        }
        let final_values = values(theta);
        let cells: Vec<Vec<usize>> =
            skeleton.simplices().iter().map(|s| s.vertices.clone()).collect();
        let g_theta = PolyhedralFn::from_triangulation(pts, final_values, cells)?;
        Ok((g_theta, theta))
    }

    /// Hellinger distance between the deformed density and the base,
    /// restricted to the changed cells.
    ///
    /// For the log-concave transform the three per-cell terms of
    /// `(√p_ε − √p)²` are themselves exponentials of affine functions and
    /// integrate in closed form; other transforms use volume-weighted Monte
    /// Carlo over the changed cells (plain importance sampling from the
    /// base cannot resolve the small-ε cells of a dyadic grid).
    pub fn deformation_hellinger(
        &self,
        deformed: &PolyhedralFn,
        mc_budget: usize,
        seed: u64,
    ) -> Result<crate::evalsim::HellingerEstimate, LowerBoundError> {
        let d = self.base.dim();
        let scale = self
            .base
            .heights()
            .iter()
            .fold(1.0f64, |m, v| m.max(v.abs()));
        // Common refinement: the deformed site set contains every base
        // site by construction, and the hull of the midpoint function
        // ½(D + g) carries the union of both kink sets (convex kinks
        // cannot cancel), so its cells are affine pieces of both.
        let sites = deformed.sites();
        let base_vals: Vec<f64> = sites
            .rows()
            .into_iter()
            .map(|r| self.base.eval(r.as_slice().unwrap()))
            .collect();
        let def_vals = deformed.heights();
        let mid_vals: Vec<f64> =
            def_vals.iter().zip(&base_vals).map(|(a, b)| 0.5 * (a + b)).collect();
        let skeleton = PolyhedralFn::lower_convex_hull(sites, &mid_vals)?;

        // A cell is changed iff the functions differ somewhere on it; the
        // vertices alone cannot decide that (an upward cap's vertices sit
        // exactly on the crease), but each refined cell lies inside one
        // agreement/disagreement region, so the centroid is decisive.
        let mut changed_cells: Vec<usize> = Vec::new();
        for (ci, cell) in skeleton.simplices().iter().enumerate() {
            if cell.volume <= 0.0 {
                continue;
            }
            let mut centroid = vec![0.0; d];
            for &v in &cell.vertices {
                for (k, c) in centroid.iter_mut().enumerate() {
                    *c += sites[(v, k)] / (d + 1) as f64;
                }
            }
            let vertex_touched = cell
                .vertices
                .iter()
                .any(|&v| (def_vals[v] - base_vals[v]).abs() > 1e-13 * scale);
            let mid_touched = (deformed.eval(&centroid) - self.base.eval(&centroid)).abs()
                > 1e-13 * scale;
            if vertex_touched || mid_touched {
                changed_cells.push(ci);
            }
        }
        if changed_cells.is_empty() {
            return Ok(crate::evalsim::HellingerEstimate {
                h2: 0.0,
                h: 0.0,
                std_error: 0.0,
                clamped: false,
            });
        }

        if matches!(self.transform.kind(), TransformKind::LogConcave) {
            // ½∫(√pε−√p)² = ½Σ [I(vε) + I(v) − 2·I((vε+v)/2)] per cell.
            let mut parts = Vec::with_capacity(changed_cells.len());
            for &ci in &changed_cells {
                let cell = &skeleton.simplices()[ci];
                let ve: Vec<f64> = cell.vertices.iter().map(|&v| def_vals[v]).collect();
                let vb: Vec<f64> = cell.vertices.iter().map(|&v| base_vals[v]).collect();
                let vm: Vec<f64> =
                    ve.iter().zip(&vb).map(|(a, b)| 0.5 * (a + b)).collect();
                let ie = simplex_integral(&self.transform, &ve, cell.volume)?;
                let ib = simplex_integral(&self.transform, &vb, cell.volume)?;
                let im = simplex_integral(&self.transform, &vm, cell.volume)?;
                parts.push(0.5 * (ie + ib - 2.0 * im));
            }
            let h2 = crate::integrate::pairwise_sum(&parts).max(0.0).min(1.0);
            return Ok(crate::evalsim::HellingerEstimate {
                h2,
                h: h2.sqrt(),
                std_error: 0.0,
                clamped: false,
            });
        }

        // Volume-weighted Monte Carlo over the changed region.
        let vols: Vec<f64> =
            changed_cells.iter().map(|&ci| skeleton.simplices()[ci].volume).collect();
        let total_vol: f64 = vols.iter().sum();
        let mut stream = SeedStream::new(seed, "deformation-hellinger");
        let mut sum = 0.0;
        let mut sumsq = 0.0;
        let mut e = vec![0.0; d + 1];
        for _ in 0..mc_budget.max(10_000) {
            // Pick a cell proportional to volume.
            let mut r = stream.next_f64() * total_vol;
            let mut pick = 0;
            for (i, v) in vols.iter().enumerate() {
                if r < *v {
                    pick = i;
                    break;
                }
                r -= v;
                pick = i;
            }
            let cell = &skeleton.simplices()[changed_cells[pick]];
            let mut tot = 0.0;
            for ei in e.iter_mut() {
                *ei = -(1.0 - stream.next_f64()).ln();
                tot += *ei;
            }
            let mut x = vec![0.0; d];
            for (j, &v) in cell.vertices.iter().enumerate() {
                let w = e[j] / tot;
                for c in 0..d {
                    x[c] += w * sites[(v, c)];
                }
            }
            let pe = self.transform.eval(deformed.eval(&x));
            let pb = self.transform.eval(self.base.eval(&x));
            let val = 0.5 * (pe.sqrt() - pb.sqrt()).powi(2);
            sum += val;
            sumsq += val * val;
        }
        let nn = mc_budget.max(10_000) as f64;
        let mean = sum / nn;
        let var = (sumsq / nn - mean * mean).max(0.0);
        let h2 = (total_vol * mean).clamp(0.0, 1.0);
        Ok(crate::evalsim::HellingerEstimate {
            h2,
            h: h2.sqrt(),
            std_error: total_vol * (var / nn).sqrt(),
            clamped: false,
        })
    }

    /// Sweep a dyadic ε grid, measure `H(p_ε, p)`, and regress `log H`
    /// against `log ε` (point deformations) or `log ξ(ε)` (mode).
    pub fn rate_experiment(
        &self,
        eps_grid: &[f64],
        mc_budget: usize,
        seed: u64,
    ) -> Result<RateExperiment, LowerBoundError> {
        if eps_grid.len() < 6 {
            return Err(LowerBoundError::Invalid(
                "rate regression needs at least 6 ε points".into(),
            ));
        }
        let mut cells = Vec::with_capacity(eps_grid.len());
        for (i, &eps) in eps_grid.iter().enumerate() {
            let cell_seed = crate::rng::stream_seed(seed, &format!("rate-{i}"));
            let (handle, theta, xi) = match &self.kind {
                DeformationKind::Mode { .. } => {
                    let m = self.deform_mode(eps)?;
                    (m.handle, m.theta, Some(m.xi))
                }
                _ => {
                    let (h, th) = self.make_valid_density(eps)?;
                    (h, th, None)
                }
            };
            let DensityHandle::Polyhedral { g, .. } = &handle else { unreachable!() };
            let est = self.deformation_hellinger(g, mc_budget, cell_seed)?;
            let near_zero = est.h2 <= 3.0 * est.std_error;
            cells.push(RateCell {
                eps,
                xi,
                theta,
                h: est.h,
                h2: est.h2,
                std_error: est.std_error,
                near_zero,
            });
        }
        let xs: Vec<f64> = cells
            .iter()
            .map(|c| c.xi.unwrap_or(c.eps).ln())
            .collect();
        let ys: Vec<f64> = cells.iter().map(|c| c.h.max(1e-300).ln()).collect();
        let (slope, intercept) = least_squares(&xs, &ys);
        Ok(RateExperiment { slope, intercept, cells })
    }
}

/// Result of a mode deformation at one ε.
#[derive(Debug, Clone)]
pub struct ModeDeformation {
    pub handle: DensityHandle,
    pub new_argmin: Vec<f64>,
    pub theta: f64,
    pub xi: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RateCell {
    pub eps: f64,
    /// Mode families record the dip depth `ξ(ε)` the scaling runs in.
    pub xi: Option<f64>,
    pub theta: f64,
    pub h: f64,
    pub h2: f64,
    pub std_error: f64,
    pub near_zero: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RateExperiment {
    pub slope: f64,
    pub intercept: f64,
    pub cells: Vec<RateCell>,
}

impl RateExperiment {
    /// `(eps, H, stderr)` rows for plotting.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("eps\tH\tstderr\n");
        for c in &self.cells {
            out.push_str(&format!("{}\t{}\t{}\n", c.eps, c.h, c.std_error));
        }
        out
    }
}

fn least_squares(xs: &[f64], ys: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let mut sxx = 0.0;
    let mut sxy = 0.0;
    for (x, y) in xs.iter().zip(ys) {
        sxx += (x - mx) * (x - mx);
        sxy += (x - mx) * (y - my);
    }
    let slope = sxy / sxx;
    (slope, my - slope * mx)
}

/// Least-squares quadratic fit of a convex function on a local grid around
/// `x0`; returns the determinant of the fitted Hessian.
pub fn curvature_estimate(
    g: &dyn Fn(&[f64]) -> f64,
    d: usize,
    x0: &[f64],
    probe_radius: f64,
) -> Result<f64, LowerBoundError> {
    if !(probe_radius > 0.0) {
        return Err(LowerBoundError::Invalid("probe radius must be positive".into()));
    }
    let per_dim = 7usize;
    let mut offsets: Vec<Vec<f64>> = vec![Vec::new()];
    for _ in 0..d {
        let mut next = Vec::new();
        for base in &offsets {
            for k in 0..per_dim {
                let t = -probe_radius + 2.0 * probe_radius * k as f64 / (per_dim - 1) as f64;
                let mut o = base.clone();
                o.push(t);
                next.push(o);
            }
        }
        offsets = next;
    }
    // Model: c + b·u + ½ uᵀHu with H symmetric.
    let nh = d * (d + 1) / 2;
    let np = 1 + d + nh;
    let mut ata = vec![vec![0.0; np + 1]; np];
    let mut samples = Vec::with_capacity(offsets.len());
    for off in &offsets {
        let x: Vec<f64> = (0..d).map(|c| x0[c] + off[c]).collect();
        let v = g(&x);
        if !v.is_finite() {
            return Err(LowerBoundError::Invalid(
                "probe grid leaves the function domain".into(),
            ));
        }
        let mut row = Vec::with_capacity(np);
        row.push(1.0);
        row.extend_from_slice(off);
        for a in 0..d {
            for b in a..d {
                let f = if a == b { 0.5 } else { 1.0 };
                row.push(f * off[a] * off[b]);
            }
        }
        for i in 0..np {
            for j in 0..np {
                ata[i][j] += row[i] * row[j];
            }
            ata[i][np] += row[i] * v;
        }
        samples.push((row, v));
    }
    let sol = {
        let mut sys = ata.clone();
        crate::convexgeom::gauss_solve(&mut sys)
            .ok_or_else(|| LowerBoundError::Invalid("singular quadratic fit".into()))?
    };
    let mut hess = vec![vec![0.0; d]; d];
    let mut idx = 1 + d;
    for a in 0..d {
        for b in a..d {
            hess[a][b] = sol[idx];
            hess[b][a] = sol[idx];
            idx += 1;
        }
    }
    // Residual magnitude against the quadratic term's own scale.
    let mut resid_max = 0.0f64;
    let mut quad_scale = 0.0f64;
    for (row, v) in &samples {
        let fit: f64 = row.iter().zip(&sol).map(|(r, s)| r * s).sum();
        resid_max = resid_max.max((v - fit).abs());
        let q: f64 = row[1 + d..].iter().zip(&sol[1 + d..]).map(|(r, s)| r * s).sum();
        quad_scale = quad_scale.max(q.abs());
    }
    let eigs = symmetric_eigenvalues(&hess);
    let det: f64 = eigs.iter().product();
    let scale = eigs.iter().fold(0.0f64, |m, e| m.max(e.abs()));
    if eigs.iter().any(|&e| e < -1e-6 * scale.max(1e-12)) {
        return Err(LowerBoundError::Curvature(format!(
            "fitted Hessian has a negative eigenvalue: {eigs:?}"
        )));
    }
    if quad_scale > 0.0 && resid_max > 0.1 * quad_scale {
        if det.abs() < 1e-6 * scale.max(1e-12).powi(d as i32) {
            return Ok(0.0);
        }
        return Err(LowerBoundError::Curvature(format!(
            "quadratic fit residual {resid_max:.3e} exceeds 10% of the quadratic term \
             {quad_scale:.3e}; shrink the probe radius"
        )));
    }
    Ok(det)
}

/// Eigenvalues of a small symmetric matrix by cyclic Jacobi rotations.
pub(crate) fn symmetric_eigenvalues(m: &[Vec<f64>]) -> Vec<f64> {
    let d = m.len();
    let mut a: Vec<Vec<f64>> = m.to_vec();
    for _ in 0..60 {
        let mut off = 0.0;
        for i in 0..d {
            for j in i + 1..d {
                off += a[i][j] * a[i][j];
            }
        }
        if off < 1e-28 {
            break;
        }
        for p in 0..d {
            for q in p + 1..d {
                if a[p][q].abs() < 1e-300 {
                    continue;
                }
                let theta = 0.5 * (a[q][q] - a[p][p]) / a[p][q];
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..d {
                    let akp = a[k][p];
                    let akq = a[k][q];
                    a[k][p] = c * akp - s * akq;
                    a[k][q] = s * akp + c * akq;
                }
                for k in 0..d {
                    let apk = a[p][k];
                    let aqk = a[q][k];
                    a[p][k] = c * apk - s * aqk;
                    a[q][k] = s * apk + c * aqk;
                }
            }
        }
    }
    (0..d).map(|i| a[i][i]).collect()
}

/// Grid-discretized quadratic bowl `½ xᵀ G x` on `[−half_width, half_width]^d`,
/// normalized to a density for the transform. Returns the base function and
/// the normalization shift. An optional refinement patch adds a fine
/// regular sub-grid around a point so that small deformation caps stay
/// resolved.
pub fn quadratic_bowl_base(
    t: &Transformation,
    d: usize,
    half_width: f64,
    grid_per_axis: usize,
    g_diag: &[f64],
) -> Result<(PolyhedralFn, f64), LowerBoundError> {
    quadratic_bowl_base_refined(t, d, half_width, grid_per_axis, g_diag, None)
}

/// Refinement patch: a regular sub-grid of `axis` points per dimension on
/// `[center − halfwidth, center + halfwidth]^d`.
#[derive(Debug, Clone)]
pub struct RefinePatch {
    pub center: Vec<f64>,
    pub halfwidth: f64,
    pub axis: usize,
}

pub fn quadratic_bowl_base_refined(
    t: &Transformation,
    d: usize,
    half_width: f64,
    grid_per_axis: usize,
    g_diag: &[f64],
    patch: Option<&RefinePatch>,
) -> Result<(PolyhedralFn, f64), LowerBoundError> {
    let mut coords: Vec<f64> = Vec::new();
    push_grid(&mut coords, d, &vec![-half_width; d], 2.0 * half_width, grid_per_axis, "base");
    if let Some(p) = patch {
        let lo: Vec<f64> = p.center.iter().map(|c| c - p.halfwidth).collect();
        push_grid(&mut coords, d, &lo, 2.0 * p.halfwidth, p.axis, "patch");
        // Snap the site nearest the patch center onto it exactly, so the
        // deformation anchor is a true grid site.
        let mut best = (0usize, f64::INFINITY);
        for (i, chunk) in coords.chunks(d).enumerate() {
            let dist: f64 =
                chunk.iter().zip(&p.center).map(|(a, b)| (a - b) * (a - b)).sum();
            if dist < best.1 {
                best = (i, dist);
            }
        }
        for c in 0..d {
            coords[best.0 * d + c] = p.center[c];
        }
    }
    // Deduplicate coincident sites (patch corners can land on the grid).
    let mut seen: std::collections::HashSet<Vec<i64>> = std::collections::HashSet::new();
    let mut dedup: Vec<f64> = Vec::with_capacity(coords.len());
    for chunk in coords.chunks(d) {
        let key: Vec<i64> = chunk.iter().map(|c| (c * 1e12).round() as i64).collect();
        if seen.insert(key) {
            dedup.extend_from_slice(chunk);
        }
    }
    let n = dedup.len() / d;
    let pts = Array2::from_shape_vec((n, d), dedup).unwrap();
    let heights: Vec<f64> = pts
        .rows()
        .into_iter()
        .map(|r| 0.5 * r.iter().zip(g_diag).map(|(x, g)| g * x * x).sum::<f64>())
        .collect();
    let bowl = PolyhedralFn::lower_convex_hull(pts.view(), &heights)?;
    let (normalized, c) = normalize(t, &ConvexFn::Polyhedral(bowl))?;
    let ConvexFn::Polyhedral(base) = normalized else { unreachable!() };
    Ok((base, c))
}

/// Regular grid with a deterministic sub-discretization jitter: exactly
/// regular grids are the degenerate worst case for the hull predicates
/// (every axis-aligned subset is affinely dependent, forcing the exact
/// fallback), while a 1e-6-of-spacing jitter leaves the float filter
/// decisive and is far below any measured quantity.
fn push_grid(coords: &mut Vec<f64>, d: usize, lo: &[f64], width: f64, axis: usize, tag: &str) {
    let spacing = width / (axis - 1) as f64;
    let mut stream = SeedStream::new(0x6a69_7474, tag);
    let mut idx = vec![0usize; d];
    loop {
        for c in 0..d {
            let jitter = (stream.next_f64() - 0.5) * 1e-6 * spacing;
            coords.push(lo[c] + width * idx[c] as f64 / (axis - 1) as f64 + jitter);
        }
        let mut carry = 0;
        loop {
            idx[carry] += 1;
            if idx[carry] < axis {
                break;
            }
            idx[carry] = 0;
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

/// Ready-made point-deformation family on a quadratic bowl base: the
/// deformation sits at the origin with a refinement patch sized for the
/// `count`-point dyadic grid below `ε_hi`, and a wide fixed dip compensates
/// at `x1`. The window is placed low enough that the compensator's mixing
/// term stays negligible against the primary Hellinger scaling.
pub fn bowl_point_family(
    t: &Transformation,
    d: usize,
    kind: DeformationKind,
    grid_per_axis: usize,
) -> Result<(DeformationFamily, Vec<f64>), LowerBoundError> {
    let half_width = 1.5;
    let lam = 1.0;
    let g_diag = vec![lam; d];
    // Dyadic window; d = 1 suffers compensator contamination ∝ ε^{1/4}
    // and needs a lower window than d = 2 (∝ ε^{1/2}).
    let (eps_hi, count) = match d {
        1 => (2.0e-4, 6usize),
        _ => (4.0e-3, 6usize),
    };
    let grid: Vec<f64> =
        (0..count).map(|i| eps_hi / (1u64 << (count - 1 - i)) as f64).collect();
    let r_hi = (2.0 * eps_hi / lam).sqrt();
    let r_lo = (2.0 * grid[0] / lam).sqrt();
    let (span, per_radius) = if d == 1 { (1.5, 8.0) } else { (1.25, 6.0) };
    let patch_axis = ((2.0 * span * r_hi) / (r_lo / per_radius)).ceil() as usize + 1;
    let patch = RefinePatch {
        center: vec![0.0; d],
        halfwidth: span * r_hi,
        axis: patch_axis.min(if d == 1 { 4000 } else { 96 }),
    };
    let (base, _) =
        quadratic_bowl_base_refined(t, d, half_width, grid_per_axis, &g_diag, Some(&patch))?;
    let x0 = vec![0.0; d];
    let mut x1 = vec![0.0; d];
    x1[0] = 0.9;
    let curvature: Vec<Vec<f64>> = (0..d)
        .map(|i| (0..d).map(|j| if i == j { g_diag[i] } else { 0.0 }).collect())
        .collect();
    // Wide compensator: depth chosen so its support reaches most of the
    // way toward x0 without interfering.
    let delta = lam * (0.62f64).powi(2) / 2.0;
    let fam = DeformationFamily::new(*t, base, x0, x1, delta, kind, curvature)?;
    Ok((fam, grid))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evalsim::hellinger;
    use crate::integrate::integrate_poly;
    use ndarray::array;

    fn v_family(kind: DeformationKind) -> DeformationFamily {
        // V-shape base |x| on [−20, 20], normalized (c = ln 2 - tail).
        let pts = array![[-20.0], [0.0], [20.0], [6.0], [-6.0]];
        let t = Transformation::log_concave();
        let hull =
            PolyhedralFn::lower_convex_hull(pts.view(), &[20.0, 0.0, 20.0, 6.0, 6.0]).unwrap();
        let (normalized, _) = normalize(&t, &ConvexFn::Polyhedral(hull)).unwrap();
        let ConvexFn::Polyhedral(base) = normalized else { unreachable!() };
        DeformationFamily::new(
            t,
            base,
            vec![0.0],
            vec![6.0],
            0.05,
            kind,
            vec![vec![1.0]],
        )
        .unwrap()
    }

    #[test]
    fn deform_up_flat_cap() {
        let fam = v_family(DeformationKind::Up);
        let base_at_0 = fam.base().eval(&[0.0]);
        let d = fam.deform_up(0.5).unwrap();
        // Flat cap of height 0.5 over [−0.5, 0.5] around the kink.
        assert!((d.eval(&[0.0]) - (base_at_0 + 0.5)).abs() < 1e-10);
        assert!((d.eval(&[0.25]) - (base_at_0 + 0.5)).abs() < 1e-10);
        assert!((d.eval(&[0.5]) - (base_at_0 + 0.5)).abs() < 1e-9);
        assert!((d.eval(&[1.0]) - fam.base().eval(&[1.0])).abs() < 1e-10);
        // Ordering g ≤ D ≤ g + ε at every site.
        for (i, row) in d.sites().rows().into_iter().enumerate() {
            let b = fam.base().eval(row.as_slice().unwrap());
            let v = d.heights()[i];
            assert!(v >= b - 1e-10 && v <= b + 0.5 + 1e-10);
        }
        let same = fam.deform_up(0.0).unwrap();
        assert_eq!(same.eval(&[0.3]), fam.base().eval(&[0.3]));
    }

    #[test]
    fn deform_down_deepens_minimum() {
        let fam = v_family(DeformationKind::Down);
        let base_min = fam.base().min_value();
        let d = fam.deform_down(0.5).unwrap();
        assert!((d.min_value() - (base_min - 0.5)).abs() < 1e-10);
        let same = fam.deform_down(0.0).unwrap();
        assert_eq!(same.eval(&[1.0]), fam.base().eval(&[1.0]));
        // g − ε ≤ D* ≤ g.
        for (i, row) in d.sites().rows().into_iter().enumerate() {
            let b = fam.base().eval(row.as_slice().unwrap());
            let v = d.heights()[i];
            assert!(v <= b + 1e-10 && v >= b - 0.5 - 1e-10);
        }
    }

    /// On a parabola-like base (g = x²/2, curvature 1) the deformation
    /// masses have closed forms: the upward cap max(g, ε) − g integrates
    /// (ε − x²/2)₊ to (4√2/3)ε^{3/2}, while the minorant dip rejoins g
    /// along tangents, g − D*_ε = ½(|x| − √(2ε))²₊, with half that mass.
    #[test]
    fn dip_mass_matches_analytic() {
        let t = Transformation::log_concave();
        let n = 1601;
        let xs: Vec<f64> = (0..n).map(|i| -4.0 + 8.0 * i as f64 / (n - 1) as f64).collect();
        let pts = Array2::from_shape_vec((n, 1), xs.clone()).unwrap();
        let hs: Vec<f64> = xs.iter().map(|x| 0.5 * x * x).collect();
        let bowl = PolyhedralFn::lower_convex_hull(pts.view(), &hs).unwrap();
        let fam = DeformationFamily::new(
            t,
            bowl.clone(),
            vec![0.0],
            vec![2.0],
            0.05,
            DeformationKind::Down,
            vec![vec![1.0]],
        )
        .unwrap();
        let eps = 0.05;
        let riemann = |f: &PolyhedralFn, sign: f64| {
            let m = 400_000;
            let mut acc = 0.0;
            for i in 0..m {
                let x = [-1.0 + 2.0 * (i as f64 + 0.5) / m as f64];
                acc += (sign * (f.eval(&x) - bowl.eval(&x))).max(0.0) * 2.0 / m as f64;
            }
            acc
        };
        let grid_err = 3.0 * (8.0 / (n as f64 - 1.0)).powi(2);

        let dip = fam.deform_down(eps).unwrap();
        let dip_mass = riemann(&dip, -1.0);
        let expect_dip = 2.0 * (2.0f64).sqrt() / 3.0 * eps.powf(1.5);
        assert!(
            (dip_mass - expect_dip).abs() < 0.05 * expect_dip + grid_err,
            "dip mass {dip_mass} vs analytic {expect_dip}"
        );

        let cap = fam.deform_up(eps).unwrap();
        let cap_mass = riemann(&cap, 1.0);
        let expect_cap = 4.0 * (2.0f64).sqrt() / 3.0 * eps.powf(1.5);
        assert!(
            (cap_mass - expect_cap).abs() < 0.05 * expect_cap + grid_err,
            "cap mass {cap_mass} vs analytic {expect_cap}"
        );
    }

    #[test]
    fn valid_density_integrates_to_one() {
        let fam = v_family(DeformationKind::Up);
        for eps in [0.01, 0.1, 0.4] {
            let (handle, theta) = fam.make_valid_density(eps).unwrap();
            assert!(theta > 0.0 && theta < 1.0);
            let DensityHandle::Polyhedral { g, .. } = &handle else { panic!() };
            let total = integrate_poly(fam.transform(), g).unwrap();
            assert!((total - 1.0).abs() < 1e-8, "∫p_ε = {total}");
        }
        // θ → 0 with ε.
        let (_, th_small) = fam.make_valid_density(1e-4).unwrap();
        let (_, th_big) = fam.make_valid_density(0.4).unwrap();
        assert!(th_small < th_big && th_small < 1e-3);
    }

    /// The functional change at x0 is (1−θ)·ε for the Up family.
    #[test]
    fn functional_change_limit() {
        let fam = v_family(DeformationKind::Up);
        let eps = 1e-3;
        let (handle, theta) = fam.make_valid_density(eps).unwrap();
        let DensityHandle::Polyhedral { g, .. } = &handle else { panic!() };
        let change = g.eval(&[0.0]) - fam.base().eval(&[0.0]);
        assert!(
            (change / eps - 1.0).abs() < 0.02,
            "ε⁻¹(g_ε(x0) − g(x0)) = {}",
            change / eps
        );
        assert!((change / eps - (1.0 - theta)).abs() < 1e-9);
    }

    #[test]
    fn mode_deformation_moves_argmin() {
        let t = Transformation::log_concave();
        let n = 801;
        let xs: Vec<f64> = (0..n).map(|i| -3.0 + 6.0 * i as f64 / (n - 1) as f64).collect();
        let pts = Array2::from_shape_vec((n, 1), xs.clone()).unwrap();
        let hs: Vec<f64> = xs.iter().map(|x| 0.5 * x * x).collect();
        let bowl = PolyhedralFn::lower_convex_hull(pts.view(), &hs).unwrap();
        let (normalized, _) = normalize(&t, &ConvexFn::Polyhedral(bowl)).unwrap();
        let ConvexFn::Polyhedral(base) = normalized else { unreachable!() };
        let fam = DeformationFamily::new(
            t,
            base,
            vec![0.0],
            vec![1.5],
            0.02,
            DeformationKind::Mode { u: vec![1.0], gamma: 2.0, l: 1.5 },
            vec![vec![1.0]],
        )
        .unwrap();
        let eps = 0.05;
        let m = fam.deform_mode(eps).unwrap();
        assert!((m.new_argmin[0] - eps).abs() < 1e-12);
        assert!(m.xi > 0.0);
        let DensityHandle::Polyhedral { g, .. } = &m.handle else { panic!() };
        let total = integrate_poly(&t, g).unwrap();
        assert!((total - 1.0).abs() < 1e-8);
        // ε = 0 keeps the argmin at x0.
        let m0 = fam.deform_mode(0.0).unwrap();
        assert_eq!(m0.new_argmin, vec![0.0]);
    }

    #[test]
    fn exact_hellinger_matches_importance_sampling() {
        let fam = v_family(DeformationKind::Up);
        let (handle, _) = fam.make_valid_density(0.4).unwrap();
        let DensityHandle::Polyhedral { g, .. } = &handle else { panic!() };
        let exact = fam.deformation_hellinger(g, 0, 0).unwrap();
        let base_handle = DensityHandle::Polyhedral {
            transform: *fam.transform(),
            g: fam.base().clone(),
        };
        let mc = hellinger(&handle, &base_handle, 2_000_000, 7).unwrap();
        assert!(
            (exact.h2 - mc.h2).abs() <= 4.0 * mc.std_error + 1e-6,
            "exact {} vs mc {} ± {}",
            exact.h2,
            mc.h2,
            mc.std_error
        );
    }

    #[test]
    fn curvature_estimate_examples() {
        let id = |x: &[f64]| 0.5 * x.iter().map(|v| v * v).sum::<f64>();
        let c = curvature_estimate(&id, 2, &[0.3, -0.2], 0.1).unwrap();
        assert!((c - 1.0).abs() < 1e-8, "identity Hessian det: {c}");

        let diag = |x: &[f64]| 0.5 * (x[0] * x[0] + 4.0 * x[1] * x[1]);
        let c = curvature_estimate(&diag, 2, &[0.0, 0.0], 0.1).unwrap();
        assert!((c - 4.0).abs() < 1e-8, "diag(1,4) det: {c}");

        // V-shape kink: no strong convexity.
        let vee = |x: &[f64]| x[0].abs();
        match curvature_estimate(&vee, 1, &[0.0], 0.1) {
            Err(LowerBoundError::Curvature(_)) => {}
            Ok(c) => assert!(c.abs() < 1e-9, "kink curvature should be 0 or error, got {c}"),
            Err(e) => panic!("unexpected error {e}"),
        }
    }

    #[test]
    fn theta_scaling_slope_1d() {
        let t = Transformation::log_concave();
        let (fam, grid) = bowl_point_family(&t, 1, DeformationKind::Up, 401).unwrap();
        let mut ls_x = Vec::new();
        let mut ls_y = Vec::new();
        for &eps in &grid {
            let (_, theta) = fam.make_valid_density(eps).unwrap();
            ls_x.push(eps.ln());
            ls_y.push(theta.ln());
        }
        let (slope, _) = least_squares(&ls_x, &ls_y);
        assert!(
            (slope - 1.5).abs() < 0.15,
            "θ(ε) slope {slope} should be within 10% of 1.5"
        );
    }
}
