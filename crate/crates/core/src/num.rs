//! Scalar abstraction shared by the numeric modules.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};
use serde::de::DeserializeOwned;
use serde::Serialize;

/// Floating-point scalar used by estimators, features, the regressor and the
/// evaluation metrics. Implemented for `f32` and `f64`.
pub trait Real:
    Float
    + FromPrimitive
    + ToPrimitive
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Default
    + Debug
    + Display
    + Serialize
    + DeserializeOwned
    + Send
    + Sync
    + 'static
{
    /// Lossy conversion from an `f64` literal or measurement.
    #[inline]
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("f64 is representable in every Real")
    }

    #[inline]
    fn from_count(n: usize) -> Self {
        Self::from_usize(n).expect("count is representable in every Real")
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().expect("Real converts to f64")
    }
}

impl Real for f32 {}
impl Real for f64 {}

#[cfg(test)]
mod tests {
    use super::*;

    fn roundtrip<T: Real>(x: f64) -> f64 {
        T::lit(x).as_f64()
    }

    #[test]
    fn conversions() {
        assert_eq!(roundtrip::<f64>(0.1), 0.1);
        assert_eq!(roundtrip::<f32>(0.5), 0.5);
        assert_eq!(f32::from_count(7), 7.0);
    }
}
