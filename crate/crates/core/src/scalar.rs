//! Scalar abstraction shared by the numerical modules.
//!
//! Everything that does floating-point math is generic over [`Scalar`], which
//! is implemented for `f32` and `f64`. Fixed-point values are exact integers
//! and only touch a `Scalar` when converted to or from a real number.

use nalgebra::RealField;
use num_traits::{FromPrimitive, ToPrimitive};
use std::fmt::{Debug, Display, LowerExp};

/// Real scalar type used for matrices, energies and covariances.
pub trait Scalar:
    RealField + Copy + FromPrimitive + ToPrimitive + Display + LowerExp + Debug + Send + Sync + 'static
{
    /// Converts an `f64` literal. Panics only if the value is unrepresentable,
    /// which cannot happen for `f32`/`f64`.
    #[inline]
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("f64 literal must convert")
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().expect("scalar must convert to f64")
    }

    #[inline]
    fn from_usize_lossy(n: usize) -> Self {
        Self::lit(n as f64)
    }

    fn infinity() -> Self;

    fn is_finite_value(self) -> bool;

    fn is_nan_value(self) -> bool;
}

impl Scalar for f32 {
    fn infinity() -> Self {
        f32::INFINITY
    }
    fn is_finite_value(self) -> bool {
        self.is_finite()
    }
    fn is_nan_value(self) -> bool {
        self.is_nan()
    }
}

impl Scalar for f64 {
    fn infinity() -> Self {
        f64::INFINITY
    }
    fn is_finite_value(self) -> bool {
        self.is_finite()
    }
    fn is_nan_value(self) -> bool {
        self.is_nan()
    }
}

/// `2^exp` for a possibly negative exponent.
#[inline]
pub fn pow2<T: Scalar>(exp: i32) -> T {
    T::lit(2f64.powi(exp))
}

/// `4^exp` for a possibly negative exponent.
#[inline]
pub fn pow4<T: Scalar>(exp: i32) -> T {
    T::lit(4f64.powi(exp))
}
