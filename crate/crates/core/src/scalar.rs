//! Scalar abstraction for the numeric engine.
//!
//! All tensor math is generic over [`Scalar`]; the simulator itself runs on
//! the `f64` aliases exported from the crate root.

use std::fmt::{Debug, Display};

use num_traits::Float;

/// Floating-point scalar the engine computes in.
pub trait Scalar: Float + Debug + Display + Send + Sync + 'static {
    fn from_f64(v: f64) -> Self {
        <Self as num_traits::NumCast>::from(v).expect("scalar conversion from f64")
    }

    fn to_f64(self) -> f64 {
        num_traits::ToPrimitive::to_f64(&self).expect("scalar conversion to f64")
    }

    fn from_usize(v: usize) -> Self {
        Self::from_f64(v as f64)
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}
