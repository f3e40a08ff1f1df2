//! Scalar abstraction shared by the generic math modules.
//!
//! Geometry, preintegration, polarimetric formulas and trajectory evaluation
//! are written against [`Real`] so they run in `f32` or `f64`. The estimator
//! and simulator are pinned to `f64`; their tolerances are far below `f32`
//! resolution.

use nalgebra::RealField;
use num_traits::{FloatConst, FromPrimitive, ToPrimitive};

/// Floating-point scalar usable by every generic routine in the crate.
pub trait Real: RealField + Copy + FloatConst + FromPrimitive + ToPrimitive {}

impl Real for f32 {}
impl Real for f64 {}

/// Converts an `f64` literal into `T`.
#[inline]
pub fn lit<T: Real>(x: f64) -> T {
    T::from_f64(x).expect("f64 literal representable in scalar type")
}

/// Wraps an angle into (-pi, pi].
pub fn wrap_angle<T: Real>(a: T) -> T {
    let two_pi = T::TAU();
    let mut r = a % two_pi;
    if r > T::PI() {
        r -= two_pi;
    } else if r <= -T::PI() {
        r += two_pi;
    }
    r
}
