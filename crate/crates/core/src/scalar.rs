//! Scalar abstraction shared by every numerical routine in the crate.

use nalgebra::RealField;
use num_traits::{FromPrimitive, ToPrimitive};

/// Real scalar the algorithms are generic over (`f32` or `f64`).
///
/// Tolerances in the public API are given as `f64` and converted with
/// [`Real::lit`]; reports are converted back with [`Real::to_f64_lossy`].
pub trait Real:
    RealField + Copy + FromPrimitive + ToPrimitive + Default + Send + Sync + 'static
{
    /// Converts an `f64` literal into this scalar type.
    #[inline]
    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("f64 literal representable in scalar type")
    }

    /// Converts to `f64`, mapping unrepresentable values to NaN.
    #[inline]
    fn to_f64_lossy(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }

    /// Machine epsilon of the scalar type.
    #[inline]
    fn eps() -> Self {
        Self::default_epsilon()
    }

    #[inline]
    fn is_finite_val(self) -> bool {
        self.to_f64_lossy().is_finite()
    }
}

impl Real for f32 {}
impl Real for f64 {}

/// `max(tol, 64·eps)`: keeps `f64` tolerances meaningful for `f32`.
pub(crate) fn floor_tol<T: Real>(tol: f64) -> T {
    let t = T::lit(tol);
    let e = T::eps() * T::lit(64.0);
    if t > e {
        t
    } else {
        e
    }
}
