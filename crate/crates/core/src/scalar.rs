//! Scalar abstraction for the transform layer.
//!
//! The monotone-transform machinery (evaluation, derivatives, repeated
//! antiderivatives, divided differences) is pure scalar math and is written
//! against this trait. The geometric and statistical layers are pinned to
//! `f64`: the exact-sign predicates and the documented tolerances assume
//! IEEE double precision.

use num_traits::{Float, FromPrimitive};

/// Floating-point scalar: `f32` or `f64`.
pub trait Real: Float + FromPrimitive + std::fmt::Debug + std::fmt::Display + 'static {
    /// Shorthand for lossy conversion from `f64` constants.
    fn of(x: f64) -> Self {
        Self::from_f64(x).expect("constant representable")
    }

    /// Shorthand for conversion from small integers.
    fn of_usize(n: usize) -> Self {
        Self::from_usize(n).expect("index representable")
    }
}

impl Real for f32 {}
impl Real for f64 {}
