//! Orientation predicates with exact-sign fallback.
//!
//! Floating-point determinants are trusted only when they clear a forward
//! error bound computed alongside; otherwise the sign is recomputed in exact
//! rational arithmetic (every finite `f64` is a dyadic rational). Hull ties
//! are broken by a symbolic perturbation of the lifted heights,
//! `q_j ↦ q_j − ε^{j+1}` in the original site index `j`, which is linear in
//! the heights and therefore resolvable through exact cofactors.

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{Signed, Zero};

/// Conservative relative rounding bound for recursive determinant
/// expansion of orders up to 5.
const DET_ERR_COEFF: f64 = 1e-14;

fn det_and_absperm(m: &[Vec<f64>]) -> (f64, f64) {
    let n = m.len();
    if n == 1 {
        return (m[0][0], m[0][0].abs());
    }
    let mut det = 0.0;
    let mut perm = 0.0;
    for j in 0..n {
        let minor: Vec<Vec<f64>> = m[1..]
            .iter()
            .map(|row| {
                row.iter().enumerate().filter(|(c, _)| *c != j).map(|(_, v)| *v).collect()
            })
            .collect();
        let (dm, pm) = det_and_absperm(&minor);
        let sign = if j % 2 == 0 { 1.0 } else { -1.0 };
        det += sign * m[0][j] * dm;
        perm += m[0][j].abs() * pm;
    }
    (det, perm)
}

fn to_rational(x: f64) -> BigRational {
    BigRational::from_float(x).expect("finite coordinate")
}

fn exact_det(m: &[Vec<BigRational>]) -> BigRational {
    let n = m.len();
    if n == 1 {
        return m[0][0].clone();
    }
    let mut det = BigRational::from_integer(BigInt::from(0));
    for j in 0..n {
        if m[0][j].is_zero() {
            continue;
        }
        let minor: Vec<Vec<BigRational>> = m[1..]
            .iter()
            .map(|row| {
                row.iter()
                    .enumerate()
                    .filter(|(c, _)| *c != j)
                    .map(|(_, v)| v.clone())
                    .collect()
            })
            .collect();
        let term = &m[0][j] * exact_det(&minor);
        if j % 2 == 0 {
            det += term;
        } else {
            det -= term;
        }
    }
    det
}

fn rational_sign(r: &BigRational) -> i8 {
    if r.is_zero() {
        0
    } else if r.is_positive() {
        1
    } else {
        -1
    }
}

// Subtracting row 0 of det[[p_i, 1]] from the other rows and expanding along
// the trailing column shows det[[p_i, 1]] = (-1)^D · det[p_i − p_0], D the
// ambient dimension. All exact results are mapped back to the
// difference-matrix convention through this parity.
fn homogeneous_parity(ambient_dim: usize) -> i8 {
    if ambient_dim % 2 == 0 {
        1
    } else {
        -1
    }
}

/// Sign of the orientation determinant of `D+1` points in `R^D`
/// (rows `p_i − p_0` for `i = 1..=D`). Zero means affinely dependent.
pub(crate) fn orient(points: &[&[f64]]) -> i8 {
    let d = points.len() - 1;
    let diff: Vec<Vec<f64>> =
        (1..=d).map(|i| (0..d).map(|c| points[i][c] - points[0][c]).collect()).collect();
    let (det, perm) = det_and_absperm(&diff);
    if det.abs() > DET_ERR_COEFF * perm {
        return if det > 0.0 { 1 } else { -1 };
    }
    // Exact fallback on the raw homogeneous matrix (differences of floats
    // can round; the raw coordinates cannot).
    let hom: Vec<Vec<BigRational>> = points
        .iter()
        .map(|p| {
            let mut row: Vec<BigRational> = p.iter().map(|&c| to_rational(c)).collect();
            row.push(BigRational::from_integer(BigInt::from(1)));
            row
        })
        .collect();
    rational_sign(&exact_det(&hom)) * homogeneous_parity(d)
}

/// Orientation of `d+2` lifted points `(x_i, q_i)` in `R^{d+1}`, with
/// symbolic perturbation of heights by original index. Entries with
/// `idx = None` (synthetic reference points) are never perturbed.
///
/// Returns 0 only if the configuration stays degenerate under the height
/// perturbation, i.e. the projections themselves are affinely dependent.
pub(crate) fn orient_lifted(xs: &[&[f64]], qs: &[f64], idx: &[Option<usize>]) -> i8 {
    let m = xs.len();
    let d = m - 2;
    // Difference matrix rows (x_i - x_0, q_i - q_0), i = 1..m-1.
    let diff: Vec<Vec<f64>> = (1..m)
        .map(|i| {
            let mut row: Vec<f64> = (0..d).map(|c| xs[i][c] - xs[0][c]).collect();
            row.push(qs[i] - qs[0]);
            row
        })
        .collect();
    let (det, perm) = det_and_absperm(&diff);
    if det.abs() > DET_ERR_COEFF * perm {
        return if det > 0.0 { 1 } else { -1 };
    }

    let parity = homogeneous_parity(d + 1);
    let hom: Vec<Vec<BigRational>> = (0..m)
        .map(|i| {
            let mut row: Vec<BigRational> = xs[i].iter().map(|&c| to_rational(c)).collect();
            row.push(to_rational(qs[i]));
            row.push(BigRational::from_integer(BigInt::from(1)));
            row
        })
        .collect();
    let s = rational_sign(&exact_det(&hom));
    if s != 0 {
        return s * parity;
    }

    // Exact determinant vanished: resolve by the height perturbation.
    // The determinant is linear in the height column, so the perturbed
    // value is det0 − Σ_i C_{i,q}·ε^{idx_i + 1} with exact cofactor
    // coefficients; the smallest participating index dominates.
    let mut order: Vec<usize> = (0..m).filter(|&i| idx[i].is_some()).collect();
    order.sort_by_key(|&i| idx[i].unwrap());
    for &i in &order {
        // Cofactor of entry (row i, height column d) in the homogeneous
        // matrix: strike row i and the height column.
        let minor: Vec<Vec<BigRational>> = (0..m)
            .filter(|&r| r != i)
            .map(|r| {
                let mut row: Vec<BigRational> =
                    xs[r].iter().map(|&c| to_rational(c)).collect();
                row.push(BigRational::from_integer(BigInt::from(1)));
                row
            })
            .collect();
        let cof_parity = if (i + d) % 2 == 0 { 1 } else { -1 };
        let cof = rational_sign(&exact_det(&minor)) * cof_parity;
        if cof != 0 {
            return -cof * parity;
        }
    }
    0
}

/// Squared `k`-volume test: are the points affinely independent? Uses a
/// float Gram determinant with an exact fallback near zero.
pub(crate) fn affinely_independent(points: &[&[f64]]) -> bool {
    let k = points.len() - 1;
    if k == 0 {
        return true;
    }
    let dim = points[0].len();
    let grams: Vec<Vec<f64>> = (1..=k)
        .map(|i| {
            (1..=k)
                .map(|j| {
                    (0..dim)
                        .map(|c| (points[i][c] - points[0][c]) * (points[j][c] - points[0][c]))
                        .sum()
                })
                .collect()
        })
        .collect();
    let (det, perm) = det_and_absperm(&grams);
    if det.abs() > DET_ERR_COEFF * perm * 16.0 {
        return det > 0.0;
    }
    // Exact Gram determinant.
    let diff: Vec<Vec<BigRational>> = (1..=k)
        .map(|i| {
            (0..dim).map(|c| to_rational(points[i][c]) - to_rational(points[0][c])).collect()
        })
        .collect();
    let gram: Vec<Vec<BigRational>> = (0..k)
        .map(|i| {
            (0..k)
                .map(|j| (0..dim).map(|c| &diff[i][c] * &diff[j][c]).sum::<BigRational>())
                .collect()
        })
        .collect();
    !exact_det(&gram).is_zero()
}
