//! Floating-point abstraction shared by every numeric routine in the crate.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};

/// Real scalar used by the estimators: `f32` or `f64`.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + NumAssign + Sum + Debug + Display + Default + Send + Sync + 'static
{
    /// Default absolute tolerance on the max-abs score of a converged IRLS fit.
    fn score_tolerance() -> Self;

    /// Default relative deviance-change tolerance for IRLS.
    fn deviance_tolerance() -> Self;

    /// Converts an `f64` literal. Panics only if the value is not representable,
    /// which cannot happen for finite literals.
    #[inline]
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("finite literal")
    }

    #[inline]
    fn from_usize_lossy(n: usize) -> Self {
        Self::from_usize(n).expect("usize converts to float")
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl Scalar for f64 {
    fn score_tolerance() -> Self {
        1e-8
    }
    fn deviance_tolerance() -> Self {
        1e-10
    }
}

impl Scalar for f32 {
    fn score_tolerance() -> Self {
        1e-3
    }
    fn deviance_tolerance() -> Self {
        1e-5
    }
}

/// Numerically safe logistic function.
#[inline]
pub fn expit<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Log-odds, with the argument clamped away from 0 and 1.
#[inline]
pub fn logit<T: Scalar>(p: T) -> T {
    let eps = T::lit(1e-12).max(T::epsilon());
    let p = p.max(eps).min(T::one() - eps);
    (p / (T::one() - p)).ln()
}

pub(crate) fn mean<T: Scalar>(values: &[T]) -> T {
    if values.is_empty() {
        return T::zero();
    }
    values.iter().copied().sum::<T>() / T::from_usize_lossy(values.len())
}

/// Sample variance with the `n - 1` denominator.
pub(crate) fn sample_variance<T: Scalar>(values: &[T]) -> T {
    let n = values.len();
    if n < 2 {
        return T::zero();
    }
    let m = mean(values);
    values.iter().map(|&v| (v - m) * (v - m)).sum::<T>() / T::from_usize_lossy(n - 1)
}
