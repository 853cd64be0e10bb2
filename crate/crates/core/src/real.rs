//! Scalar abstraction for the geometric kernel.

use nalgebra::RealField;
use num_traits::FromPrimitive;

/// Floating-point scalar the geometry and optimization kernels are generic
/// over. Implemented by `f32` and `f64`.
pub trait Real: RealField + FromPrimitive + Copy {
    /// Lossy conversion from `f64`, for numeric constants.
    fn from_config(value: f64) -> Self {
        Self::from_f64(value).expect("finite f64 constant")
    }
}

impl<T: RealField + FromPrimitive + Copy> Real for T {}
