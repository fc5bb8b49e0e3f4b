//! Scalar abstraction shared by every numeric module.
//!
//! Both the plain-slice math and the tensor code are written once against
//! [`Real`]; `f32` is the working precision and `f64` is used wherever a
//! check needs extended precision.

use std::fmt::Debug;

use candle_core::FloatDType;

/// Floating point element type usable both as a `num_traits::Float` and as
/// a candle tensor dtype.
pub trait Real: FloatDType + num_traits::Float + Debug + Default {
    /// Lossy conversion from an `f64` literal or coefficient.
    fn lit(v: f64) -> Self {
        <Self as candle_core::WithDType>::from_f64(v)
    }

    fn as_f64(self) -> f64 {
        <Self as candle_core::WithDType>::to_f64(self)
    }
}

impl Real for f32 {}
impl Real for f64 {}
