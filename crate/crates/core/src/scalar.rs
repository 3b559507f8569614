//! Scalar abstraction shared by every numeric routine in the crate.

use nalgebra::RealField;
use num_traits::NumCast;
use std::fmt::{Debug, Display};

/// Floating point scalar usable throughout the pipeline: `f32` or `f64`.
///
/// Everything numeric is generic over this trait. `nalgebra::RealField`
/// provides the linear algebra (SVD, symmetric eigen), `NumCast` the
/// lossless-where-possible conversions used at I/O boundaries.
pub trait Real:
    RealField + Copy + NumCast + Default + Debug + Display + Send + Sync + 'static
{
    /// Convert an `f64` literal or configuration value.
    #[inline]
    fn lit(v: f64) -> Self {
        <Self as NumCast>::from(v).expect("f64 is representable in every Real")
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().expect("Real converts to f64")
    }

    #[inline]
    fn as_f32(self) -> f32 {
        self.as_f64() as f32
    }

    #[inline]
    fn from_count(v: usize) -> Self {
        Self::lit(v as f64)
    }

    /// Absolute tolerance for orthonormality and determinant checks on
    /// rotation matrices.
    fn rotation_tolerance() -> Self;
}

impl Real for f64 {
    #[inline]
    fn rotation_tolerance() -> Self {
        1e-6
    }
}

impl Real for f32 {
    // f32 accumulates a few ulps per 3-term dot product.
    #[inline]
    fn rotation_tolerance() -> Self {
        2e-6
    }
}
