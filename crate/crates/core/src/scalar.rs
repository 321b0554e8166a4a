use ndarray::{LinalgScalar, NdFloat};
use num_traits::{FromPrimitive, ToPrimitive};

/// Floating-point scalar the tensor math is generic over.
///
/// Training runs in `f32`; oracles and gradient checks instantiate the same
/// code at `f64`.
pub trait Scalar:
    NdFloat + LinalgScalar + FromPrimitive + ToPrimitive + std::iter::Sum + 'static
{
    const EPS_NORM: f64 = 1e-8;
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Shorthand for lifting an `f64` constant into the generic scalar type.
#[inline]
pub fn c<F: Scalar>(x: f64) -> F {
    F::from_f64(x).expect("constant representable in scalar type")
}
