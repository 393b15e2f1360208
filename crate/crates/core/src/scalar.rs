//! Scalar abstraction shared by every numeric routine in the crate.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Floating point element type for tensors, schedules and metrics.
///
/// Implemented for `f32` (the production type) and `f64` (used by the
/// finite-difference checks, where truncation error has to dominate rounding).
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    /// Lossy conversion from `f64`.
    fn of(x: f64) -> Self;

    /// Widening conversion to `f64`.
    fn to_f64_lossy(self) -> f64;

    /// Narrowing conversion used by the on-disk formats.
    fn to_f32_lossy(self) -> f32;

    fn from_f32_lossless(x: f32) -> Self;
}

macro_rules! impl_scalar {
    ($t:ty) => {
        impl Scalar for $t {
            #[inline]
            fn of(x: f64) -> Self {
                x as $t
            }

            #[inline]
            fn to_f64_lossy(self) -> f64 {
                self as f64
            }

            #[inline]
            fn to_f32_lossy(self) -> f32 {
                self as f32
            }

            #[inline]
            fn from_f32_lossless(x: f32) -> Self {
                x as $t
            }
        }
    };
}

impl_scalar!(f32);
impl_scalar!(f64);
