//! Scalar abstraction so the same graph code runs in f32 (training) and
//! f64 (finite-difference verification).

use std::fmt::{Debug, Display};
use std::iter::Sum;

/// Floating-point element type for tensors and graphs.
///
/// Training defaults to `f32` (checkpoints store 32-bit blobs, so keeping the
/// in-memory precision identical makes save/load exact). Gradient checks run
/// the same code at `f64` for finite-difference headroom.
pub trait Scalar:
    num_traits::Float
    + num_traits::FromPrimitive
    + num_traits::ToPrimitive
    + Debug
    + Display
    + Default
    + Sum
    + Send
    + Sync
    + 'static
{
    /// Lossy conversion from an f64 literal.
    fn c(x: f64) -> Self {
        Self::from_f64(x).expect("literal out of range")
    }

    /// Widen to f64 for reporting and metrics.
    fn f64(self) -> f64 {
        self.to_f64().expect("scalar not representable as f64")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Numerically stable logistic function.
pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Inverse of [`sigmoid`]; input must lie strictly in (0, 1).
pub fn logit<T: Scalar>(p: T) -> T {
    (p / (T::one() - p)).ln()
}
