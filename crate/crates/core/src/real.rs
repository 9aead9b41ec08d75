use std::fmt::{Debug, Display, LowerExp};
use std::iter::Sum;

use num_traits::{Float, FloatConst, FromPrimitive, NumAssign, ToPrimitive};

/// Scalar type the numerical core is written against: `f32` or `f64`.
///
/// Solver tolerances are expressed in `f64` and clamped from below by a
/// small multiple of the type's epsilon, so single precision runs with
/// correspondingly looser stopping criteria.
pub trait Real:
    Float
    + FloatConst
    + FromPrimitive
    + ToPrimitive
    + NumAssign
    + Sum
    + Default
    + Debug
    + Display
    + LowerExp
    + serde::Serialize
    + Send
    + Sync
    + 'static
{
    /// Converts an `f64` literal.
    #[inline]
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("literal representable in scalar type")
    }

    #[inline]
    fn from_usize_lossy(n: usize) -> Self {
        Self::from_usize(n).expect("count representable in scalar type")
    }

    #[inline]
    fn f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }

    /// Smallest relative tolerance that is meaningful for this type.
    #[inline]
    fn tol_floor() -> f64 {
        64.0 * Self::epsilon().f64()
    }

    /// `max(requested, tol_floor())`, as `Self`.
    #[inline]
    fn tol(requested: f64) -> Self {
        Self::lit(requested.max(Self::tol_floor()))
    }
}

impl Real for f32 {}
impl Real for f64 {}
