//! Scalar abstraction: the whole engine is generic over the float width.
//!
//! 64-bit is the default for tests (tight gradient checks); 32-bit is
//! selectable per run for speed. Concrete aliases live at the crate root.

use std::fmt::{Debug, Display};
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Floating-point scalar the tensor engine computes in: f32 or f64.
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    /// Lossy conversion from an f64 literal or config value.
    fn from_f64_lossy(x: f64) -> Self;

    /// Widen to f64 for logging and serialization.
    fn to_f64_lossy(self) -> f64;
}

impl Scalar for f32 {
    #[inline(always)]
    fn from_f64_lossy(x: f64) -> Self {
        x as f32
    }
    #[inline(always)]
    fn to_f64_lossy(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    #[inline(always)]
    fn from_f64_lossy(x: f64) -> Self {
        x
    }
    #[inline(always)]
    fn to_f64_lossy(self) -> f64 {
        self
    }
}

/// Shorthand used throughout kernels for converting constants.
#[inline(always)]
pub fn sc<T: Scalar>(x: f64) -> T {
    T::from_f64_lossy(x)
}
