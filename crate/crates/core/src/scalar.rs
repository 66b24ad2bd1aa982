//! Scalar abstraction shared by every numeric routine in the workspace.

use std::fmt::{Debug, Display, LowerExp};
use std::iter::Sum;
use std::str::FromStr;

use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};

/// Real scalar type the numerics are generic over: `f32` or `f64`.
///
/// Everything defaults to `f64`; the theorem checks and gradient tests are
/// only meaningful at double precision, `f32` exists for cheap inference.
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + NumAssign
    + Sum
    + Default
    + Debug
    + Display
    + LowerExp
    + FromStr
    + Send
    + Sync
    + 'static
{
    /// Significant decimal digits needed for a lossless text round trip.
    const ROUND_TRIP_DIGITS: usize;

    /// Converts an `f64` literal or intermediate into this scalar type.
    #[inline]
    fn of(x: f64) -> Self {
        Self::from_f64(x).expect("f64 converts to every Scalar")
    }

    #[inline]
    fn of_usize(n: usize) -> Self {
        Self::from_usize(n).expect("usize converts to every Scalar")
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().expect("Scalar converts to f64")
    }
}

impl Scalar for f64 {
    const ROUND_TRIP_DIGITS: usize = 17;
}

impl Scalar for f32 {
    const ROUND_TRIP_DIGITS: usize = 9;
}
