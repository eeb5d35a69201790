//! Scalar abstraction shared by every numeric routine in the crate.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};

/// Floating-point element type: `f32` for production, `f64` for oracles.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + NumAssign + Sum + Debug + Display + Default + Send + Sync + 'static
{
    /// Converts an `f64` literal into this type.
    #[inline]
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("literal representable")
    }

    /// Round to nearest, ties to even.
    #[inline]
    fn round_half_even(self) -> Self {
        let r = self.round();
        if (self - self.trunc()).abs() == Self::lit(0.5) {
            let two = Self::lit(2.0);
            two * (self / two).round()
        } else {
            r
        }
    }

    #[inline]
    fn to_f32_lossy(self) -> f32 {
        self.to_f32().unwrap_or(f32::NAN)
    }

    #[inline]
    fn to_f64_lossy(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn half_even_ties() {
        assert_eq!(2.5f32.round_half_even(), 2.0);
        assert_eq!(3.5f32.round_half_even(), 4.0);
        assert_eq!((-2.5f32).round_half_even(), -2.0);
        assert_eq!((-0.5f64).round_half_even(), 0.0);
        assert_eq!(0.0f32.round_half_even(), 0.0);
        assert_eq!(2.4999f32.round_half_even(), 2.0);
        assert_eq!((-1.6f64).round_half_even(), -2.0);
    }
}
