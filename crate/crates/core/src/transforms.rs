//! Monotone transformations `h` and their analytic machinery.
//!
//! A convex-transformed density has the form `p = h∘g` where `h` is a fixed
//! monotone transformation and `g` is convex. Four catalog kinds are
//! supported:
//!
//! * `LogConcave`: `h(y) = e^{-y}` (decreasing), densities `e^{-g}`;
//! * `PowerConcave(s)`: `h(y) = y₊^{-s}` (decreasing), requires `s > d`
//!   when bound to a model in dimension `d`;
//! * `LogConvex`: `h(y) = e^{y}` (increasing), densities on the orthant;
//! * `PowerConvex(s)`: `h(y) = y₊^{s}` (increasing).
//!
//! Besides pointwise evaluation the transform layer provides derivatives of
//! every order and *repeated antiderivatives* `A_k` chosen so that `A_k` and
//! its derivatives vanish in the tail where `h → 0`. Those antiderivatives
//! are what make exact simplex integration of `h∘g` possible for polyhedral
//! `g` (see the `integrate` module).

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::Real;

/// Monotonicity direction of a transformation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Direction {
    /// `h(-∞) = 0`, `h(+∞) = +∞`; models live on the nonnegative orthant.
    Increasing,
    /// `h(-∞) = +∞`, `h(+∞) = 0`; models live on all of `R^d`.
    Decreasing,
}

/// Catalog of transformation kinds. Power kinds carry their exponent.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TransformKind<F> {
    LogConcave,
    PowerConcave(F),
    LogConvex,
    PowerConvex(F),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TransformError {
    #[error("invalid transform parameter: {0}")]
    InvalidParameter(String),
    #[error("value {y} outside the open interval ({lo}, {hi}) where h is finite and positive")]
    OutsideDomain { y: f64, lo: f64, hi: f64 },
    #[error("tail-vanishing antiderivative A_{k} does not exist for power exponent s = {s}")]
    AntiderivativeUnavailable { s: f64, k: usize },
}

/// Maximum supported antiderivative order. Exact integration needs `A_d`
/// for dimension `d ≤ 3`; the remaining headroom covers divided-difference
/// derivative formulas that consume one extra order.
pub const MAX_ANTIDERIV_ORDER: usize = 8;

/// Tail exponent `γ*` stored for the log-concave doubly-infinite tail
/// condition `h(y)^γ h(−Cy) → 0` as `y → −∞`. For `h = e^{-y}` the product
/// is `e^{(C−γ)y}`, so any `γ > 0` works with a companion `C > γ`; one
/// concrete pair is recorded so the existence threshold is reproducible.
pub const LOG_CONCAVE_GAMMA: f64 = 0.5;
/// Companion constant `C*` of [`LOG_CONCAVE_GAMMA`].
pub const LOG_CONCAVE_C: f64 = 1.0;

/// A monotone transformation `h` from the four-kind catalog.
///
/// The limit points, direction, and admissible tail parameters are all
/// determined by the kind, so the type stores only the kind (with its power
/// parameter) and derives the rest.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "TransformRepr<F>", into = "TransformRepr<F>")]
pub struct MonotoneTransform<F: Real> {
    kind: TransformKind<F>,
}

/// Wire format: `{"kind": "log_concave" | "power_concave" | "log_convex"
/// | "power_convex", "s": number?}`.
#[derive(Serialize, Deserialize)]
struct TransformRepr<F> {
    kind: String,
    #[serde(skip_serializing_if = "Option::is_none", default = "Option::default")]
    s: Option<F>,
}

impl<F: Real> From<MonotoneTransform<F>> for TransformRepr<F> {
    fn from(t: MonotoneTransform<F>) -> Self {
        let (kind, s) = match t.kind {
            TransformKind::LogConcave => ("log_concave", None),
            TransformKind::PowerConcave(s) => ("power_concave", Some(s)),
            TransformKind::LogConvex => ("log_convex", None),
            TransformKind::PowerConvex(s) => ("power_convex", Some(s)),
        };
        TransformRepr { kind: kind.to_string(), s }
    }
}

impl<F: Real> TryFrom<TransformRepr<F>> for MonotoneTransform<F> {
    type Error = TransformError;

    fn try_from(r: TransformRepr<F>) -> Result<Self, TransformError> {
        let need_s = |s: Option<F>, kind: &str| {
            s.ok_or_else(|| {
                TransformError::InvalidParameter(format!("kind {kind:?} requires field \"s\""))
            })
        };
        match r.kind.as_str() {
            "log_concave" => Ok(Self::log_concave()),
            "power_concave" => Self::power_concave(need_s(r.s, "power_concave")?),
            "log_convex" => Ok(Self::log_convex()),
            "power_convex" => Self::power_convex(need_s(r.s, "power_convex")?),
            other => Err(TransformError::InvalidParameter(format!(
                "unknown transform kind {other:?}"
            ))),
        }
    }
}

impl<F: Real> MonotoneTransform<F> {
    /// Decreasing transform `h(y) = e^{-y}` (log-concave densities).
    pub fn log_concave() -> Self {
        Self { kind: TransformKind::LogConcave }
    }

    /// Decreasing transform `h(y) = y₊^{-s}`, `s > 0` (r-concave densities).
    /// The model-level requirement `s > d` is checked at binding time.
    pub fn power_concave(s: F) -> Result<Self, TransformError> {
        if !(s > F::zero()) {
            return Err(TransformError::InvalidParameter(format!(
                "power exponent must be positive, got {s}"
            )));
        }
        Ok(Self { kind: TransformKind::PowerConcave(s) })
    }

    /// Increasing transform `h(y) = e^{y}` (log-convex densities).
    pub fn log_convex() -> Self {
        Self { kind: TransformKind::LogConvex }
    }

    /// Increasing transform `h(y) = y₊^{s}`, `s > 0` (r-convex densities).
    pub fn power_convex(s: F) -> Result<Self, TransformError> {
        if !(s > F::zero()) {
            return Err(TransformError::InvalidParameter(format!(
                "power exponent must be positive, got {s}"
            )));
        }
        Ok(Self { kind: TransformKind::PowerConvex(s) })
    }

    pub fn kind(&self) -> TransformKind<F> {
        self.kind
    }

    pub fn direction(&self) -> Direction {
        match self.kind {
            TransformKind::LogConcave | TransformKind::PowerConcave(_) => Direction::Decreasing,
            TransformKind::LogConvex | TransformKind::PowerConvex(_) => Direction::Increasing,
        }
    }

    /// Power parameter for the power kinds.
    pub fn s(&self) -> Option<F> {
        match self.kind {
            TransformKind::PowerConcave(s) | TransformKind::PowerConvex(s) => Some(s),
            _ => None,
        }
    }

    /// Limit point `y₀`: boundary of `{h > 0}`.
    pub fn y0(&self) -> F {
        match self.kind {
            TransformKind::LogConcave | TransformKind::PowerConcave(_) => F::infinity(),
            TransformKind::LogConvex => F::neg_infinity(),
            TransformKind::PowerConvex(_) => F::zero(),
        }
    }

    /// Limit point `y∞`: boundary of `{h < +∞}`.
    pub fn y_inf(&self) -> F {
        match self.kind {
            TransformKind::LogConcave => F::neg_infinity(),
            TransformKind::PowerConcave(_) => F::zero(),
            TransformKind::LogConvex | TransformKind::PowerConvex(_) => F::infinity(),
        }
    }

    /// Open interval `(lo, hi)` on which `h` is finite and strictly positive.
    pub fn finite_interval(&self) -> (F, F) {
        let (a, b) = (self.y0(), self.y_inf());
        (a.min(b), a.max(b))
    }

    /// Chosen admissible tail exponent `α` (decay of `h` in its zero tail).
    /// `None` means any `α > d` works for every dimension.
    pub fn alpha(&self) -> Option<F> {
        match self.kind {
            TransformKind::PowerConcave(s) => Some(s),
            _ => None,
        }
    }

    /// Blow-up exponent `β` at a finite `y∞`; only the power-concave kind
    /// has one (`β = s`).
    pub fn beta(&self) -> Option<F> {
        match self.kind {
            TransformKind::PowerConcave(s) => Some(s),
            _ => None,
        }
    }

    /// Stored `(γ, C)` pair for the doubly-infinite decreasing tail
    /// condition `h(y)^γ h(-Cy) → 0`. Only the log-concave kind needs one.
    pub fn gamma_c(&self) -> Option<(F, F)> {
        match self.kind {
            TransformKind::LogConcave => Some((F::of(LOG_CONCAVE_GAMMA), F::of(LOG_CONCAVE_C))),
            _ => None,
        }
    }

    /// Evaluate `h(y)` as a total function on the extended reals.
    ///
    /// Boundary conventions: `PowerConcave` returns `+∞` for `y ≤ 0`
    /// (the pole at `y∞ = 0` is approached from above) and `PowerConvex`
    /// returns `0` for `y ≤ 0`.
    pub fn eval(&self, y: F) -> F {
        match self.kind {
            TransformKind::LogConcave => (-y).exp(),
            TransformKind::PowerConcave(s) => {
                if y > F::zero() {
                    y.powf(-s)
                } else {
                    F::infinity()
                }
            }
            TransformKind::LogConvex => y.exp(),
            TransformKind::PowerConvex(s) => {
                if y > F::zero() {
                    y.powf(s)
                } else {
                    F::zero()
                }
            }
        }
    }

    /// `log h(y)`, computed without forming `h` (stable for extreme `y`).
    pub fn log_eval(&self, y: F) -> F {
        match self.kind {
            TransformKind::LogConcave => -y,
            TransformKind::PowerConcave(s) => {
                if y > F::zero() {
                    -s * y.ln()
                } else {
                    F::infinity()
                }
            }
            TransformKind::LogConvex => y,
            TransformKind::PowerConvex(s) => {
                if y > F::zero() {
                    s * y.ln()
                } else {
                    F::neg_infinity()
                }
            }
        }
    }

    fn check_open_interval(&self, y: F) -> Result<(), TransformError> {
        let (lo, hi) = self.finite_interval();
        if y > lo && y < hi && y.is_finite() {
            Ok(())
        } else {
            Err(TransformError::OutsideDomain {
                y: y.to_f64().unwrap_or(f64::NAN),
                lo: lo.to_f64().unwrap_or(f64::NAN),
                hi: hi.to_f64().unwrap_or(f64::NAN),
            })
        }
    }

    /// First derivative `h'(y)` on the open interval where `h` is finite.
    pub fn deriv(&self, y: F) -> Result<F, TransformError> {
        self.check_open_interval(y)?;
        Ok(self.deriv_unchecked(1, y))
    }

    /// `m`-th derivative `h^{(m)}(y)` on the open finite interval
    /// (`m = 0` is `h` itself).
    pub fn deriv_m(&self, m: usize, y: F) -> Result<F, TransformError> {
        if m == 0 {
            return Ok(self.eval(y));
        }
        self.check_open_interval(y)?;
        Ok(self.deriv_unchecked(m, y))
    }

    pub(crate) fn deriv_unchecked(&self, m: usize, y: F) -> F {
        let neg = if m % 2 == 0 { F::one() } else { -F::one() };
        match self.kind {
            TransformKind::LogConcave => neg * (-y).exp(),
            TransformKind::PowerConcave(s) => {
                // (-1)^m s(s+1)…(s+m-1) y^{-s-m}
                let mut coeff = F::one();
                for i in 0..m {
                    coeff = coeff * (s + F::of_usize(i));
                }
                neg * coeff * y.powf(-s - F::of_usize(m))
            }
            TransformKind::LogConvex => y.exp(),
            TransformKind::PowerConvex(s) => {
                // s(s-1)…(s-m+1) y^{s-m}; vanishes identically for integer
                // s < m because the falling factorial hits zero.
                let mut coeff = F::one();
                for i in 0..m {
                    coeff = coeff * (s - F::of_usize(i));
                }
                coeff * y.powf(s - F::of_usize(m))
            }
        }
    }

    /// `k`-th repeated antiderivative `A_k(y)` normalized so that `A_k` and
    /// all lower-order antiderivatives vanish in the tail where `h → 0`.
    ///
    /// Closed forms:
    /// * log-concave: `A_k(y) = (-1)^k e^{-y}`;
    /// * power-concave: `A_k(y) = (-1)^k y^{k-s} / ((s-1)…(s-k))`, `y > 0`,
    ///   defined only for `s > k`;
    /// * log-convex: `A_k(y) = e^{y}`;
    /// * power-convex: `A_k(y) = y₊^{s+k} / ((s+1)…(s+k))`.
    pub fn antideriv(&self, k: usize, y: F) -> Result<F, TransformError> {
        if k == 0 {
            return Ok(self.eval(y));
        }
        if k > MAX_ANTIDERIV_ORDER {
            return Err(TransformError::InvalidParameter(format!(
                "antiderivative order {k} exceeds the supported cap {MAX_ANTIDERIV_ORDER}"
            )));
        }
        let neg = if k % 2 == 0 { F::one() } else { -F::one() };
        match self.kind {
            TransformKind::LogConcave => {
                self.check_open_interval(y)?;
                Ok(neg * (-y).exp())
            }
            TransformKind::PowerConcave(s) => {
                if s <= F::of_usize(k) {
                    return Err(TransformError::AntiderivativeUnavailable {
                        s: s.to_f64().unwrap_or(f64::NAN),
                        k,
                    });
                }
                self.check_open_interval(y)?;
                let mut denom = F::one();
                for i in 1..=k {
                    denom = denom * (s - F::of_usize(i));
                }
                Ok(neg * y.powf(F::of_usize(k) - s) / denom)
            }
            TransformKind::LogConvex => {
                self.check_open_interval(y)?;
                Ok(y.exp())
            }
            TransformKind::PowerConvex(s) => {
                // Extends by zero through y ≤ 0; finite for all finite y.
                if !y.is_finite() {
                    return Err(TransformError::OutsideDomain {
                        y: y.to_f64().unwrap_or(f64::NAN),
                        lo: f64::NEG_INFINITY,
                        hi: f64::INFINITY,
                    });
                }
                if y <= F::zero() {
                    return Ok(F::zero());
                }
                let mut denom = F::one();
                for i in 1..=k {
                    denom = denom * (s + F::of_usize(i));
                }
                Ok(y.powf(s + F::of_usize(k)) / denom)
            }
        }
    }

    /// Logarithmic derivative `h'(y)/h(y)`, stable where `h` itself would
    /// overflow or underflow.
    pub fn log_deriv(&self, y: F) -> F {
        match self.kind {
            TransformKind::LogConcave => -F::one(),
            TransformKind::PowerConcave(s) => -s / y,
            TransformKind::LogConvex => F::one(),
            TransformKind::PowerConvex(s) => s / y,
        }
    }

    /// Inverse `h^{-1}(p)` on the interior of the range, mapping a positive
    /// finite density value back to the transform argument.
    pub fn h_inverse(&self, p: F) -> F {
        match self.kind {
            TransformKind::LogConcave => -p.ln(),
            TransformKind::PowerConcave(s) => p.powf(-F::one() / s),
            TransformKind::LogConvex => p.ln(),
            TransformKind::PowerConvex(s) => p.powf(F::one() / s),
        }
    }

    /// Minimal sample size `n_d` that guarantees almost-sure existence of
    /// the MLE in dimension `d`, rounded up and minimized over the
    /// admissible tail parameters recorded for the kind.
    ///
    /// Decreasing kinds use the two-branch threshold (`d(1+γ)` for a
    /// doubly-infinite tail, `d + βd²/(α(β−d))` for a finite `y∞`);
    /// increasing kinds have no theoretical threshold and return `d + 1`
    /// so that `conv(X)` can be full-dimensional.
    pub fn existence_threshold(&self, d: usize) -> Result<usize, TransformError> {
        let df = d as f64;
        let raw = match self.kind {
            TransformKind::LogConvex | TransformKind::PowerConvex(_) => return Ok(d + 1),
            TransformKind::LogConcave => df * (1.0 + LOG_CONCAVE_GAMMA),
            TransformKind::PowerConcave(s) => {
                let s = s.to_f64().unwrap();
                if s <= df {
                    return Err(TransformError::InvalidParameter(format!(
                        "power-concave model requires s > d (got s = {s}, d = {d})"
                    )));
                }
                // β = s and α ranges over (d, s]; the threshold
                // d + βd²/(α(β−d)) is decreasing in α, so α = s attains
                // the minimum: d + d²/(s−d).
                df + df * df / (s - df)
            }
        };
        // Guard against upward rounding noise in exactly-integer thresholds.
        Ok(((raw - 1e-9).ceil() as usize).max(d + 1))
    }

    /// Catalog model inclusion: does every density of `self`'s model belong
    /// to `other`'s model? Transformations of different directions define
    /// models on different carriers and never compare.
    pub fn model_includes(&self, other: &Self) -> bool {
        use TransformKind::*;
        match (self.kind, other.kind) {
            (LogConcave, LogConcave) | (LogConvex, LogConvex) => true,
            (LogConcave, PowerConcave(_)) | (LogConvex, PowerConvex(_)) => true,
            // P(y₊^{-s2}) ⊆ P(y₊^{-s1}) for s1 ≤ s2
            (PowerConcave(sa), PowerConcave(sb)) => sb <= sa,
            // P(y₊^{s2}) ⊆ P(y₊^{s1}) for s2 ≤ s1
            (PowerConvex(sa), PowerConvex(sb)) => sa <= sb,
            _ => false,
        }
    }
}

impl<F: Real> std::fmt::Display for MonotoneTransform<F> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self.kind {
            TransformKind::LogConcave => write!(f, "log-concave"),
            TransformKind::PowerConcave(s) => write!(f, "power-concave(s={s})"),
            TransformKind::LogConvex => write!(f, "log-convex"),
            TransformKind::PowerConvex(s) => write!(f, "power-convex(s={s})"),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    type T = MonotoneTransform<f64>;

    fn catalog() -> Vec<T> {
        vec![
            T::log_concave(),
            T::power_concave(3.5).unwrap(),
            T::log_convex(),
            T::power_convex(1.0).unwrap(),
            T::power_convex(2.7).unwrap(),
        ]
    }

    #[test]
    fn eval_spot_values() {
        assert_eq!(T::log_concave().eval(0.0), 1.0);
        assert_eq!(T::power_concave(2.0).unwrap().eval(2.0), 0.25);
        assert_eq!(T::power_concave(2.0).unwrap().eval(-1.0), f64::INFINITY);
        assert_eq!(T::power_concave(2.0).unwrap().eval(0.0), f64::INFINITY);
        assert_eq!(T::power_convex(2.0).unwrap().eval(-3.0), 0.0);
        assert_eq!(T::log_convex().eval(f64::NEG_INFINITY), 0.0);
        assert_eq!(T::log_concave().eval(f64::INFINITY), 0.0);
        assert_eq!(T::log_concave().eval(f64::NEG_INFINITY), f64::INFINITY);
    }

    #[test]
    fn limit_points_per_kind() {
        let lc = T::log_concave();
        assert_eq!(lc.y0(), f64::INFINITY);
        assert_eq!(lc.y_inf(), f64::NEG_INFINITY);
        let pc = T::power_concave(4.0).unwrap();
        assert_eq!(pc.y0(), f64::INFINITY);
        assert_eq!(pc.y_inf(), 0.0);
        let lv = T::log_convex();
        assert_eq!(lv.y0(), f64::NEG_INFINITY);
        assert_eq!(lv.y_inf(), f64::INFINITY);
        let pv = T::power_convex(1.0).unwrap();
        assert_eq!(pv.y0(), 0.0);
        assert_eq!(pv.y_inf(), f64::INFINITY);
    }

    #[test]
    fn deriv_spot_values() {
        assert_eq!(T::log_concave().deriv(0.0).unwrap(), -1.0);
        assert_eq!(T::power_concave(2.0).unwrap().deriv(1.0).unwrap(), -2.0);
        assert_eq!(T::log_convex().deriv(0.0).unwrap(), 1.0);
        assert!(T::power_concave(2.0).unwrap().deriv(-1.0).is_err());
        assert!(T::power_convex(1.5).unwrap().deriv(0.0).is_err());
        assert!(T::log_concave().deriv(f64::INFINITY).is_err());
    }

    #[test]
    fn antideriv_spot_values() {
        assert_eq!(T::log_concave().antideriv(1, 0.0).unwrap(), -1.0);
        assert_eq!(T::power_concave(3.0).unwrap().antideriv(1, 1.0).unwrap(), -0.5);
        assert_eq!(T::power_convex(1.0).unwrap().antideriv(1, 2.0).unwrap(), 2.0);
        // Tail-vanishing antiderivative requires s > k.
        assert!(matches!(
            T::power_concave(2.0).unwrap().antideriv(2, 1.0),
            Err(TransformError::AntiderivativeUnavailable { .. })
        ));
    }

    #[test]
    fn monotonicity_respects_direction() {
        let mut ys: Vec<f64> = (0..200).map(|i| -6.0 + 0.06 * i as f64).collect();
        ys.retain(|y| y.abs() > 1e-9);
        for t in catalog() {
            for w in ys.windows(2) {
                let (a, b) = (t.eval(w[0]), t.eval(w[1]));
                match t.direction() {
                    Direction::Decreasing => assert!(a >= b, "{t} not nonincreasing"),
                    Direction::Increasing => assert!(a <= b, "{t} not nondecreasing"),
                }
            }
        }
    }

    /// Central finite differences of `eval` match `deriv`, and finite
    /// differences of `A_k` match `A_{k-1}` (with `A_0 = h`).
    #[test]
    fn derivative_and_antiderivative_consistency() {
        let mut rng = 0x9e3779b97f4a7c15u64;
        let mut next = move || {
            rng ^= rng << 13;
            rng ^= rng >> 7;
            rng ^= rng << 17;
            (rng >> 11) as f64 / (1u64 << 53) as f64
        };
        for t in catalog() {
            for _ in 0..100 {
                // Interior points, bounded away from the power-kind pole.
                let y = match t.direction() {
                    Direction::Decreasing if t.s().is_some() => 0.3 + 4.0 * next(),
                    Direction::Increasing if t.s().is_some() => 0.3 + 4.0 * next(),
                    _ => -3.0 + 6.0 * next(),
                };
                let h = 1e-5 * (1.0 + y.abs());
                let fd = (t.eval(y + h) - t.eval(y - h)) / (2.0 * h);
                let an = t.deriv(y).unwrap();
                assert!(
                    (fd - an).abs() <= 1e-6 * an.abs().max(1e-12),
                    "{t}: deriv mismatch at y={y}: fd={fd} analytic={an}"
                );
                for k in 1..=3usize {
                    let ak = |z: f64| t.antideriv(k, z);
                    let (Ok(ap), Ok(am)) = (ak(y + h), ak(y - h)) else { continue };
                    let fd = (ap - am) / (2.0 * h);
                    let lower = t.antideriv(k - 1, y).unwrap();
                    assert!(
                        (fd - lower).abs() <= 1e-6 * lower.abs().max(1e-12),
                        "{t}: A_{k} finite difference mismatch at y={y}"
                    );
                }
            }
        }
    }

    /// Decreasing tail assumption: `h(y)·y^{α'} → 0` along a geometric grid
    /// for some admissible `α' > d`.
    #[test]
    fn decreasing_tail_decay_audit() {
        for (t, alpha_prime) in [
            (T::log_concave(), 4.0),
            (T::power_concave(5.0).unwrap(), 4.0),
        ] {
            let vals: Vec<f64> =
                (1..=6).map(|k| 10f64.powi(k)).map(|y| t.eval(y) * y.powf(alpha_prime)).collect();
            for w in vals.windows(2) {
                assert!(w[1] <= w[0], "{t}: h(y)y^a not decaying along the tail grid");
            }
            assert!(*vals.last().unwrap() < 1e-3, "{t}: tail product not vanishing");
        }
    }

    /// Doubly-infinite decreasing tail: `h(y)^γ h(-Cy) → 0` as `y → -∞`
    /// for the stored `(γ, C)` pair of the log-concave kind.
    #[test]
    fn log_concave_gamma_c_audit() {
        let t = T::log_concave();
        let (gamma, c) = t.gamma_c().unwrap();
        // In log space: the raw product overflows long before the limit
        // behavior is visible.
        let vals: Vec<f64> = (1..=6)
            .map(|k| -(10f64.powi(k)))
            .map(|y| gamma * t.log_eval(y) + t.log_eval(-c * y))
            .collect();
        for w in vals.windows(2) {
            assert!(w[1] < w[0]);
        }
        assert!(vals[0] < 0.0, "product must already be below 1 at y = -10");
        assert!(vals.last().unwrap().exp() < 1e-6);
    }

    #[test]
    fn existence_thresholds() {
        assert_eq!(T::power_concave(2.0).unwrap().existence_threshold(1).unwrap(), 2);
        assert_eq!(T::log_concave().existence_threshold(2).unwrap(), 3);
        assert_eq!(T::power_concave(6.0).unwrap().existence_threshold(2).unwrap(), 3);
        assert_eq!(T::log_convex().existence_threshold(3).unwrap(), 4);
        assert!(T::power_concave(2.0).unwrap().existence_threshold(2).is_err());
    }

    /// Scanning α over its admissible range (d, s] never beats the
    /// closed-form choice α = s used by `existence_threshold`.
    #[test]
    fn power_concave_threshold_is_alpha_scan_minimum() {
        for (s, d) in [(2.0f64, 1usize), (6.0, 2), (4.5, 3), (3.01, 3)] {
            let t = T::power_concave(s).unwrap();
            let df = d as f64;
            let mut best = f64::INFINITY;
            for i in 1..=4000 {
                let alpha = df + (s - df) * i as f64 / 4000.0;
                let beta = s;
                best = best.min(df + beta * df * df / (alpha * (beta - df)));
            }
            let scan = ((best - 1e-9).ceil() as usize).max(d + 1);
            assert_eq!(scan, t.existence_threshold(d).unwrap(), "s={s} d={d}");
        }
    }

    #[test]
    fn model_inclusion_catalog() {
        let lc = T::log_concave();
        let pc3 = T::power_concave(3.0).unwrap();
        let pc5 = T::power_concave(5.0).unwrap();
        assert!(lc.model_includes(&pc5));
        assert!(!pc3.model_includes(&pc5));
        assert!(pc5.model_includes(&pc3));
        for t in catalog() {
            assert!(t.model_includes(&t));
        }
        let lv = T::log_convex();
        let pv1 = T::power_convex(1.0).unwrap();
        let pv2 = T::power_convex(2.0).unwrap();
        assert!(lv.model_includes(&pv1));
        assert!(pv1.model_includes(&pv2));
        assert!(!pv2.model_includes(&pv1));
        assert!(!lc.model_includes(&lv));
    }

    #[test]
    fn json_round_trip() {
        let t = T::power_concave(4.25).unwrap();
        let js = serde_json::to_string(&t).unwrap();
        assert_eq!(js, r#"{"kind":"power_concave","s":4.25}"#);
        let back: T = serde_json::from_str(&js).unwrap();
        assert_eq!(back, t);
        let lc: T = serde_json::from_str(r#"{"kind":"log_concave"}"#).unwrap();
        assert_eq!(lc, T::log_concave());
        assert!(serde_json::from_str::<T>(r#"{"kind":"cauchy"}"#).is_err());
    }
}
