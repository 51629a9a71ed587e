//! Scalar abstraction for the numeric core.
//!
//! All math is generic over [`Scalar`] so the same code runs in f32 for
//! production and f64 for gradient checking.

use std::fmt::{Debug, Display};

use num_traits::Float;

/// Floating-point scalar the tensor core is generic over.
pub trait Scalar: Float + num_traits::NumAssign + Debug + Display + Send + Sync + 'static {
    fn from_f64(x: f64) -> Self;
    fn to_f64_(self) -> f64;

    fn from_usize(x: usize) -> Self {
        Self::from_f64(x as f64)
    }
}

impl Scalar for f32 {
    #[inline]
    fn from_f64(x: f64) -> Self {
        x as f32
    }
    #[inline]
    fn to_f64_(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    #[inline]
    fn from_f64(x: f64) -> Self {
        x
    }
    #[inline]
    fn to_f64_(self) -> f64 {
        self
    }
}
