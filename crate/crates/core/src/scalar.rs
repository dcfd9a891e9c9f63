//! Numeric trait bound shared by every generic routine in the crate.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use ndarray::ScalarOperand;
use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Real scalar used by the mixture, transport and quadrature code.
///
/// Implemented for `f32` and `f64`. Constants are built through [`Scalar::c`]
/// so generic code can write literals without sprinkling `from_f64` calls.
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + ScalarOperand
    + Sum
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + 'static
{
    /// Converts an `f64` literal. Panics only if the value is not representable,
    /// which cannot happen for `f32`/`f64`.
    #[inline]
    fn c(value: f64) -> Self {
        Self::from_f64(value).expect("literal representable in scalar type")
    }

    #[inline]
    fn from_usize_lossy(value: usize) -> Self {
        Self::from_usize(value).expect("count representable in scalar type")
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// `log(sum(exp(x)))` over an iterator, stable for large magnitudes.
///
/// Returns negative infinity for an empty input or when every term is `-inf`.
pub fn log_sum_exp<T: Scalar, I>(values: I) -> T
where
    I: IntoIterator<Item = T>,
    I::IntoIter: Clone,
{
    let iter = values.into_iter();
    let max = iter.clone().fold(T::neg_infinity(), |m, v| m.max(v));
    if !max.is_finite() {
        return max;
    }
    let sum: T = iter.map(|v| (v - max).exp()).sum();
    max + sum.ln()
}

/// Logistic function, evaluated without overflow for either sign.
#[inline]
pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// `log(exp(a) + exp(b))`.
#[inline]
pub fn log_add_exp<T: Scalar>(a: T, b: T) -> T {
    let m = a.max(b);
    if !m.is_finite() {
        return m;
    }
    m + ((a - m).exp() + (b - m).exp()).ln()
}
