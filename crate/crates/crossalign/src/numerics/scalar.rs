use std::ops::{Add, Div, Mul, Neg, Sub};

/// Scalar abstraction shared by the plain `f64` fast path and the
/// tape-recorded [`Var`](super::tape::Var) path.
///
/// Every similarity and loss in this crate is written once against this
/// trait, so the values used for scoring and the values differentiated
/// during training come from the same code.
pub trait Scalar:
    Copy
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
{
    /// Handle required to materialize constants (`()` for `f64`, the tape
    /// for recorded variables).
    type Ctx: Copy;

    fn constant(ctx: Self::Ctx, value: f64) -> Self;

    /// Current numeric value. Used for branch decisions (clamps, argmax,
    /// degeneracy checks); never for arithmetic that needs a gradient.
    fn value(self) -> f64;

    fn sqrt(self) -> Self;
    fn exp(self) -> Self;
    fn ln(self) -> Self;

    /// `max(self, 0)` with subgradient 0 at the origin.
    fn relu(self) -> Self;

    /// Multiplication by a constant.
    fn scale(self, c: f64) -> Self;

    /// Addition of a constant.
    fn shift(self, c: f64) -> Self;
}

impl Scalar for f64 {
    type Ctx = ();

    #[inline]
    fn constant(_: (), value: f64) -> Self {
        value
    }

    #[inline]
    fn value(self) -> f64 {
        self
    }

    #[inline]
    fn sqrt(self) -> Self {
        f64::sqrt(self)
    }

    #[inline]
    fn exp(self) -> Self {
        f64::exp(self)
    }

    #[inline]
    fn ln(self) -> Self {
        f64::ln(self)
    }

    #[inline]
    fn relu(self) -> Self {
        if self > 0.0 {
            self
        } else {
            0.0
        }
    }

    #[inline]
    fn scale(self, c: f64) -> Self {
        self * c
    }

    #[inline]
    fn shift(self, c: f64) -> Self {
        self + c
    }
}

/// Lift a slice of raw values into the scalar domain.
pub fn lift<S: Scalar>(ctx: S::Ctx, xs: &[f64]) -> Vec<S> {
    xs.iter().map(|&x| S::constant(ctx, x)).collect()
}
