//! Floating-point abstraction for the numerical core.
//!
//! Everything in the library is generic over [`Scalar`] so the same code runs
//! in `f32` and `f64`. The concrete aliases at the crate root (`Field64`,
//! `StateAgg64`, ...) are what the CLI and the test suites use.

use num_traits::{Float, FloatConst, FromPrimitive, NumAssign};
use std::fmt::{Debug, Display, LowerExp};
use std::iter::Sum;

/// Floating-point scalar usable by every solver and operator in this crate.
pub trait Scalar:
    Float
    + FloatConst
    + FromPrimitive
    + NumAssign
    + Sum
    + Debug
    + Display
    + LowerExp
    + Default
    + Send
    + Sync
    + 'static
{
    /// Shorthand for lossy conversion of an `f64` literal into `Self`.
    fn of(x: f64) -> Self {
        Self::from_f64(x).expect("finite f64 literal converts to any Scalar")
    }

    /// Conversion from array/loop indices.
    fn of_usize(n: usize) -> Self {
        Self::from_usize(n).expect("usize converts to any Scalar")
    }

    fn half() -> Self {
        Self::of(0.5)
    }

    fn two() -> Self {
        Self::of(2.0)
    }
}

impl<T> Scalar for T where
    T: Float
        + FloatConst
        + FromPrimitive
        + NumAssign
        + Sum
        + Debug
        + Display
        + LowerExp
        + Default
        + Send
        + Sync
        + 'static
{
}

/// Euclidean norm of a slice.
pub fn norm2<F: Scalar>(v: &[F]) -> F {
    v.iter()
        .map(|&x| x * x)
        .fold(F::zero(), |a, b| a + b)
        .sqrt()
}

/// Infinity norm of a slice.
pub fn norm_inf<F: Scalar>(v: &[F]) -> F {
    v.iter().fold(F::zero(), |a, &b| a.max(b.abs()))
}

/// Dot product of two slices of equal length.
pub fn dot<F: Scalar>(a: &[F], b: &[F]) -> F {
    debug_assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(&x, &y)| x * y)
        .fold(F::zero(), |s, t| s + t)
}
