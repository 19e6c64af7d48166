//! Scalar abstraction for the numerics core.
//!
//! All tensor and tape code is generic over [`Scalar`] so the same kernels
//! run at f32 or f64. The model pipeline pins f64 through the crate-root
//! aliases; f32 exists for cheap experiments and to keep the kernels honest.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + 'static
{
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Lift an f64 literal into the working scalar type.
#[inline]
pub fn lit<S: Scalar>(x: f64) -> S {
    S::from_f64(x).expect("f64 literal not representable in scalar type")
}

/// Lower a scalar to f64 (for reporting and cross-type comparisons).
#[inline]
pub fn to_f64<S: Scalar>(x: S) -> f64 {
    x.to_f64().expect("scalar not representable as f64")
}
