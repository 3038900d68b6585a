//! Floating-point element type of the transformer.

use std::fmt::Debug;

use ndarray::{LinalgScalar, ScalarOperand};
use num_traits::{Float, NumAssignOps};

/// `f32` or `f64`. Weight files always store `f32`; conversions to and from
/// the file type go through this trait.
pub trait Scalar:
    Float + NumAssignOps + LinalgScalar + ScalarOperand + Debug + Send + Sync + 'static
{
    fn cast_f32(x: f32) -> Self;
    fn cast_f64(x: f64) -> Self;
    fn into_f32(self) -> f32;
    fn into_f64(self) -> f64;
}

impl Scalar for f32 {
    fn cast_f32(x: f32) -> Self {
        x
    }
    fn cast_f64(x: f64) -> Self {
        x as f32
    }
    fn into_f32(self) -> f32 {
        self
    }
    fn into_f64(self) -> f64 {
        f64::from(self)
    }
}

impl Scalar for f64 {
    fn cast_f32(x: f32) -> Self {
        f64::from(x)
    }
    fn cast_f64(x: f64) -> Self {
        x
    }
    fn into_f32(self) -> f32 {
        self as f32
    }
    fn into_f64(self) -> f64 {
        self
    }
}
