use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FloatConst, FromPrimitive, NumCast};

/// Floating-point scalar used by the numerical core: `f32` or `f64`.
pub trait Real:
    Float + FloatConst + FromPrimitive + NumCast + Debug + Display + Default + Sum + Send + Sync + 'static
{
}

impl Real for f32 {}
impl Real for f64 {}

/// Converts an `f64` literal into the working scalar type.
#[inline]
pub fn lit<T: Real>(x: f64) -> T {
    T::from_f64(x).expect("literal representable in scalar type")
}
