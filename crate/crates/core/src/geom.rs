//! Rotations, rigid transforms and the navigation state manifold.
//!
//! Conventions used throughout the crate:
//! - rotations are unit quaternions with `w >= 0`;
//! - perturbations act on the right (body frame): `R ⊞ δ = R · Exp(δ)`;
//! - translation, velocity and bias blocks are perturbed additively in the
//!   world frame;
//! - the 15-dim navigation tangent is ordered
//!   `(rotation, translation, velocity, accel bias, gyro bias)`.

use std::fmt;
use std::ops::Mul;

use nalgebra::{Matrix3, Quaternion, SVector, UnitQuaternion, Vector3};
use thiserror::Error;

use crate::scalar::{lit, Real};

/// Dimension of the [`NavState`] tangent space.
pub const NAV_DIM: usize = 15;
/// Offsets of each block inside the navigation tangent.
pub const ROT: usize = 0;
pub const POS: usize = 3;
pub const VEL: usize = 6;
pub const BA: usize = 9;
pub const BG: usize = 12;

/// Below this angle the exp/log maps use their Taylor expansions.
const SMALL_ANGLE: f64 = 1e-8;
/// Below this angle the SO(3) Jacobians use their Taylor expansions.
const SMALL_ANGLE_JACOBIAN: f64 = 1e-5;
/// Pitch distance from +-pi/2 at which heading is treated as unobservable.
const GIMBAL_GUARD: f64 = 1e-6;

pub type NavTangent<T> = SVector<T, NAV_DIM>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeomError {
    #[error("degenerate attitude: pitch within {GIMBAL_GUARD} rad of +-pi/2, heading unobservable")]
    DegenerateAttitude,
}

/// Skew-symmetric cross-product matrix `[v]x`.
pub fn skew<T: Real>(v: &Vector3<T>) -> Matrix3<T> {
    Matrix3::new(
        T::zero(),
        -v.z,
        v.y,
        v.z,
        T::zero(),
        -v.x,
        -v.y,
        v.x,
        T::zero(),
    )
}

/// Right Jacobian of SO(3): `Exp(φ + δ) ≈ Exp(φ) Exp(Jr(φ) δ)`.
pub fn right_jacobian<T: Real>(phi: &Vector3<T>) -> Matrix3<T> {
    let theta2 = phi.norm_squared();
    let k = skew(phi);
    let k2 = k * k;
    let theta = theta2.sqrt();
    if theta < lit(SMALL_ANGLE_JACOBIAN) {
        return Matrix3::identity() - k * lit::<T>(0.5) + k2 * lit::<T>(1.0 / 6.0);
    }
    let a = (T::one() - theta.cos()) / theta2;
    let b = (theta - theta.sin()) / (theta2 * theta);
    Matrix3::identity() - k * a + k2 * b
}

/// Inverse of [`right_jacobian`].
pub fn right_jacobian_inv<T: Real>(phi: &Vector3<T>) -> Matrix3<T> {
    let theta2 = phi.norm_squared();
    let k = skew(phi);
    let k2 = k * k;
    let theta = theta2.sqrt();
    if theta < lit(SMALL_ANGLE_JACOBIAN) {
        return Matrix3::identity() + k * lit::<T>(0.5) + k2 * lit::<T>(1.0 / 12.0);
    }
    let c = T::one() / theta2 - (T::one() + theta.cos()) / (lit::<T>(2.0) * theta * theta.sin());
    Matrix3::identity() + k * lit::<T>(0.5) + k2 * c
}

/// Unit-quaternion rotation with the double cover resolved to `w >= 0`.
#[derive(Clone, Copy, PartialEq)]
pub struct Rotation3<T: Real> {
    q: UnitQuaternion<T>,
}

impl<T: Real> fmt::Debug for Rotation3<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let q = self.q.quaternion();
        write!(f, "Rotation3(w: {:?}, x: {:?}, y: {:?}, z: {:?})", q.w, q.i, q.j, q.k)
    }
}

impl<T: Real> Default for Rotation3<T> {
    fn default() -> Self {
        Self::identity()
    }
}

impl<T: Real> Rotation3<T> {
    pub fn identity() -> Self {
        Self {
            q: UnitQuaternion::identity(),
        }
    }

    fn canonical(q: Quaternion<T>) -> Self {
        let q = if q.w < T::zero() { -q } else { q };
        Self {
            q: UnitQuaternion::new_normalize(q),
        }
    }

    /// Builds a rotation from quaternion components, normalizing them.
    pub fn from_wxyz(w: T, x: T, y: T, z: T) -> Self {
        Self::canonical(Quaternion::new(w, x, y, z))
    }

    pub fn from_unit_quaternion(q: UnitQuaternion<T>) -> Self {
        Self::canonical(*q.quaternion())
    }

    /// Builds a rotation from an (approximately) orthonormal matrix.
    pub fn from_matrix(m: &Matrix3<T>) -> Self {
        let rot = nalgebra::Rotation3::from_matrix_unchecked(*m);
        Self::from_unit_quaternion(UnitQuaternion::from_rotation_matrix(&rot))
    }

    /// `Rz(yaw) · Ry(pitch) · Rx(roll)`.
    pub fn from_euler_zyx(yaw: T, pitch: T, roll: T) -> Self {
        Self::exp(&Vector3::new(T::zero(), T::zero(), yaw))
            * Self::exp(&Vector3::new(T::zero(), pitch, T::zero()))
            * Self::exp(&Vector3::new(roll, T::zero(), T::zero()))
    }

    /// Components as `[w, x, y, z]`.
    pub fn wxyz(&self) -> [T; 4] {
        let q = self.q.quaternion();
        [q.w, q.i, q.j, q.k]
    }

    pub fn unit_quaternion(&self) -> &UnitQuaternion<T> {
        &self.q
    }

    pub fn matrix(&self) -> Matrix3<T> {
        self.q.to_rotation_matrix().into_inner()
    }

    pub fn inverse(&self) -> Self {
        Self::canonical(*self.q.inverse().quaternion())
    }

    pub fn rotate(&self, v: &Vector3<T>) -> Vector3<T> {
        self.q * v
    }

    pub fn inverse_rotate(&self, v: &Vector3<T>) -> Vector3<T> {
        self.q.inverse_transform_vector(v)
    }

    /// Exponential map from an axis-angle vector.
    pub fn exp(omega: &Vector3<T>) -> Self {
        let theta2 = omega.norm_squared();
        let theta = theta2.sqrt();
        let half = lit::<T>(0.5);
        if theta < lit(SMALL_ANGLE) {
            let w = T::one() - theta2 / lit(8.0);
            let s = half - theta2 / lit(48.0);
            return Self::canonical(Quaternion::new(w, omega.x * s, omega.y * s, omega.z * s));
        }
        let (sin_h, cos_h) = (theta * half).sin_cos();
        let s = sin_h / theta;
        Self::canonical(Quaternion::new(cos_h, omega.x * s, omega.y * s, omega.z * s))
    }

    /// Logarithm map; the returned angle lies in `[0, pi]`.
    pub fn log(&self) -> Vector3<T> {
        let q = self.q.quaternion();
        let v = Vector3::new(q.i, q.j, q.k);
        let n2 = v.norm_squared();
        let n = n2.sqrt();
        let w = q.w;
        if n < lit(SMALL_ANGLE) {
            // atan(n/w)/n ≈ 1/w - n²/(3w³)
            let scale = lit::<T>(2.0) / w * (T::one() - n2 / (lit::<T>(3.0) * w * w));
            return v * scale;
        }
        let theta = lit::<T>(2.0) * n.atan2(w);
        v * (theta / n)
    }

    /// Yaw of the Z-Y-X Euler factorization, in (-pi, pi].
    pub fn yaw(&self) -> Result<T, GeomError> {
        let m = self.matrix();
        let cos_pitch = (m[(0, 0)] * m[(0, 0)] + m[(1, 0)] * m[(1, 0)]).sqrt();
        if cos_pitch < lit(GIMBAL_GUARD) {
            return Err(GeomError::DegenerateAttitude);
        }
        let yaw = m[(1, 0)].atan2(m[(0, 0)]);
        Ok(if yaw <= -T::PI() { T::PI() } else { yaw })
    }

    /// Row Jacobian of [`Self::yaw`] with respect to a right perturbation.
    pub fn yaw_jacobian(&self) -> Result<nalgebra::RowVector3<T>, GeomError> {
        let m = self.matrix();
        let (r00, r10) = (m[(0, 0)], m[(1, 0)]);
        let den = r00 * r00 + r10 * r10;
        if den.sqrt() < lit(GIMBAL_GUARD) {
            return Err(GeomError::DegenerateAttitude);
        }
        // first column of R·Exp(δ) moves by -R [e_x]x δ
        let dc = -m * skew(&Vector3::x());
        Ok((dc.row(1) * r00 - dc.row(0) * r10) / den)
    }

    /// Angle of the rotation in `[0, pi]`.
    pub fn angle(&self) -> T {
        self.log().norm()
    }
}

/// Yaw of a rotation; see [`Rotation3::yaw`].
pub fn yaw_of<T: Real>(rotation: &Rotation3<T>) -> Result<T, GeomError> {
    rotation.yaw()
}

/// `so3_exp`; see [`Rotation3::exp`].
pub fn so3_exp<T: Real>(omega: &Vector3<T>) -> Rotation3<T> {
    Rotation3::exp(omega)
}

/// `so3_log`; see [`Rotation3::log`].
pub fn so3_log<T: Real>(rotation: &Rotation3<T>) -> Vector3<T> {
    rotation.log()
}

impl<T: Real> Mul for Rotation3<T> {
    type Output = Rotation3<T>;

    fn mul(self, rhs: Self) -> Self::Output {
        Self::canonical(*(self.q * rhs.q).quaternion())
    }
}

impl<T: Real> Mul<Vector3<T>> for Rotation3<T> {
    type Output = Vector3<T>;

    fn mul(self, rhs: Vector3<T>) -> Self::Output {
        self.rotate(&rhs)
    }
}

/// Rigid transform `x ↦ R x + t`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pose3<T: Real> {
    pub rotation: Rotation3<T>,
    pub translation: Vector3<T>,
}

impl<T: Real> Default for Pose3<T> {
    fn default() -> Self {
        Self::identity()
    }
}

impl<T: Real> Pose3<T> {
    pub fn new(rotation: Rotation3<T>, translation: Vector3<T>) -> Self {
        Self {
            rotation,
            translation,
        }
    }

    pub fn identity() -> Self {
        Self::new(Rotation3::identity(), Vector3::zeros())
    }

    pub fn from_translation(t: Vector3<T>) -> Self {
        Self::new(Rotation3::identity(), t)
    }

    pub fn compose(&self, other: &Self) -> Self {
        Self::new(
            self.rotation * other.rotation,
            self.translation + self.rotation.rotate(&other.translation),
        )
    }

    pub fn inverse(&self) -> Self {
        let r_inv = self.rotation.inverse();
        Self::new(r_inv, -r_inv.rotate(&self.translation))
    }

    /// `self⁻¹ ∘ other`.
    pub fn between(&self, other: &Self) -> Self {
        self.inverse().compose(other)
    }

    pub fn transform_point(&self, p: &Vector3<T>) -> Vector3<T> {
        self.rotation.rotate(p) + self.translation
    }

    /// Decoupled tangent `(Log(Rᵦᵀ R), t - tᵦ)` of `self` relative to `base`.
    pub fn local(&self, base: &Self) -> SVector<T, 6> {
        let r = (base.rotation.inverse() * self.rotation).log();
        let t = self.translation - base.translation;
        SVector::<T, 6>::from_iterator(r.iter().chain(t.iter()).copied())
    }
}

impl<T: Real> Mul for Pose3<T> {
    type Output = Pose3<T>;

    fn mul(self, rhs: Self) -> Self::Output {
        self.compose(&rhs)
    }
}

/// Keyframe state: pose, world velocity and IMU biases.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NavState<T: Real> {
    pub pose: Pose3<T>,
    pub velocity: Vector3<T>,
    pub accel_bias: Vector3<T>,
    pub gyro_bias: Vector3<T>,
}

impl<T: Real> Default for NavState<T> {
    fn default() -> Self {
        Self::identity()
    }
}

impl<T: Real> NavState<T> {
    pub fn identity() -> Self {
        Self::from_pose(Pose3::identity())
    }

    pub fn from_pose(pose: Pose3<T>) -> Self {
        Self {
            pose,
            velocity: Vector3::zeros(),
            accel_bias: Vector3::zeros(),
            gyro_bias: Vector3::zeros(),
        }
    }

    pub fn rotation(&self) -> &Rotation3<T> {
        &self.pose.rotation
    }

    pub fn position(&self) -> &Vector3<T> {
        &self.pose.translation
    }

    /// Manifold update `state ⊞ δ`.
    pub fn retract(&self, delta: &NavTangent<T>) -> Self {
        let block = |o: usize| delta.fixed_rows::<3>(o).into_owned();
        let rotation = if block(ROT).iter().all(|x| *x == T::zero()) {
            self.pose.rotation
        } else {
            self.pose.rotation * Rotation3::exp(&block(ROT))
        };
        Self {
            pose: Pose3::new(rotation, self.pose.translation + block(POS)),
            velocity: self.velocity + block(VEL),
            accel_bias: self.accel_bias + block(BA),
            gyro_bias: self.gyro_bias + block(BG),
        }
    }

    /// Inverse of [`Self::retract`]: the `δ` with `base ⊞ δ = self`.
    pub fn local(&self, base: &Self) -> NavTangent<T> {
        let mut d = NavTangent::<T>::zeros();
        let r = (base.pose.rotation.inverse() * self.pose.rotation).log();
        d.fixed_rows_mut::<3>(ROT).copy_from(&r);
        d.fixed_rows_mut::<3>(POS)
            .copy_from(&(self.pose.translation - base.pose.translation));
        d.fixed_rows_mut::<3>(VEL)
            .copy_from(&(self.velocity - base.velocity));
        d.fixed_rows_mut::<3>(BA)
            .copy_from(&(self.accel_bias - base.accel_bias));
        d.fixed_rows_mut::<3>(BG)
            .copy_from(&(self.gyro_bias - base.gyro_bias));
        d
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use std::f64::consts::{FRAC_PI_2, PI};

    fn close3(a: &Vector3<f64>, b: &Vector3<f64>, tol: f64) -> bool {
        (a - b).norm() <= tol
    }

    #[test]
    fn exp_identity_and_quarter_turn() {
        let r = so3_exp(&Vector3::<f64>::zeros());
        assert_eq!(r.wxyz(), [1.0, 0.0, 0.0, 0.0]);
        let q = so3_exp(&Vector3::new(0.0, 0.0, FRAC_PI_2));
        assert!(close3(&q.rotate(&Vector3::x()), &Vector3::y(), 1e-15));
    }

    #[test]
    fn log_exp_round_trip() {
        let w = Vector3::new(0.3, -0.2, 0.1);
        assert!(close3(&so3_log(&so3_exp(&w)), &w, 1e-12));
        let tiny = Vector3::new(1e-10, -3e-11, 2e-10);
        assert!(close3(&so3_log(&so3_exp(&tiny)), &tiny, 1e-20));
    }

    #[test]
    fn canonical_hemisphere() {
        let r = Rotation3::from_wxyz(-0.5, 0.5, 0.5, 0.5);
        assert!(r.wxyz()[0] >= 0.0);
        let big = so3_exp(&Vector3::new(0.0, 0.0, 3.0)) * so3_exp(&Vector3::new(0.0, 0.0, 3.0));
        assert!(big.wxyz()[0] >= 0.0);
        assert!((big.angle() - (2.0 * PI - 6.0)).abs() < 1e-12);
    }

    #[test]
    fn yaw_examples() {
        assert_eq!(yaw_of(&Rotation3::<f64>::identity()).unwrap(), 0.0);
        let r = so3_exp(&Vector3::new(0.0f64, 0.0, 1.2));
        assert!((yaw_of(&r).unwrap() - 1.2).abs() < 1e-12);
        // ZYX Euler (yaw 0.7, pitch 0, roll 0.1): yaw applied last
        let r = so3_exp(&Vector3::new(0.0f64, 0.0, 0.7)) * so3_exp(&Vector3::new(0.1, 0.0, 0.0));
        assert!((yaw_of(&r).unwrap() - 0.7).abs() < 1e-12);
        let r = Rotation3::from_euler_zyx(-2.5f64, 0.4, -0.3);
        assert!((yaw_of(&r).unwrap() + 2.5).abs() < 1e-12);
    }

    #[test]
    fn yaw_gimbal_lock() {
        let r = Rotation3::from_euler_zyx(0.3, FRAC_PI_2, 0.0);
        assert_eq!(yaw_of(&r), Err(GeomError::DegenerateAttitude));
        let r = Rotation3::from_euler_zyx(0.3, -FRAC_PI_2 + 1e-9, 0.2);
        assert!(r.yaw_jacobian().is_err());
    }

    #[test]
    fn yaw_pure_rotation_sweep() {
        for i in 0..=2000 {
            let psi = -PI + (i as f64) * (2.0 * PI / 2000.0);
            let psi = if i == 0 { PI } else { psi };
            let got = yaw_of(&so3_exp(&Vector3::new(0.0, 0.0, psi))).unwrap();
            assert!((got - psi).abs() < 1e-12, "psi {psi} got {got}");
        }
    }

    #[test]
    fn yaw_jacobian_matches_finite_difference() {
        let r = Rotation3::from_euler_zyx(0.9f64, -0.4, 0.3);
        let j = r.yaw_jacobian().unwrap();
        for k in 0..3 {
            let mut d = Vector3::zeros();
            d[k] = 1e-6;
            let fd = ((r * so3_exp(&d)).yaw().unwrap() - (r * so3_exp(&-d)).yaw().unwrap()) / 2e-6;
            assert!((fd - j[k]).abs() < 1e-8);
        }
    }

    #[test]
    fn jacobians_are_inverse_and_match_fd() {
        let phi = Vector3::new(0.4, -0.7, 0.2);
        let jr = right_jacobian(&phi);
        let prod = jr * right_jacobian_inv(&phi);
        assert!((prod - Matrix3::identity()).norm() < 1e-12);
        let base = so3_exp(&phi);
        for k in 0..3 {
            let mut d = Vector3::zeros();
            d[k] = 1e-7;
            let lhs = (base.inverse() * so3_exp(&(phi + d))).log() / 1e-7;
            assert!(close3(&lhs, &jr.column(k).into_owned(), 1e-6));
        }
        let small = Vector3::new(1e-7, 2e-7, -1e-7);
        assert!((right_jacobian(&small) * right_jacobian_inv(&small) - Matrix3::identity()).norm() < 1e-14);
    }

    #[test]
    fn pose_compose_inverse_identity() {
        let p = Pose3::new(Rotation3::from_euler_zyx(0.3, 0.2, -0.1), Vector3::new(1.0, -2.0, 0.5));
        let e = p.compose(&p.inverse());
        assert!(e.rotation.angle() < 1e-9);
        assert!(e.translation.norm() < 1e-9);
        let q = Pose3::new(so3_exp(&Vector3::new(0.1, 0.0, 0.9)), Vector3::new(0.0, 3.0, 0.0));
        let r = Pose3::new(so3_exp(&Vector3::new(0.0, -0.4, 0.2)), Vector3::new(-1.0, 0.0, 2.0));
        let a = (p * q) * r;
        let b = p * (q * r);
        assert!(a.local(&b).norm() < 1e-12);
    }

    #[test]
    fn retract_examples() {
        let s = NavState::<f64>::identity();
        assert_eq!(s.retract(&NavTangent::zeros()), s);
        let mut d = NavTangent::zeros();
        d[POS] = 1.0;
        d[POS + 1] = 2.0;
        d[POS + 2] = 3.0;
        assert_eq!(*s.retract(&d).position(), Vector3::new(1.0, 2.0, 3.0));
    }

    #[test]
    fn retract_local_random_seeds() {
        for seed in 0..100u64 {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let mut rand_vec = |scale: f64| {
                Vector3::new(
                    rng.random_range(-scale..scale),
                    rng.random_range(-scale..scale),
                    rng.random_range(-scale..scale),
                )
            };
            let state = NavState {
                pose: Pose3::new(so3_exp(&rand_vec(2.0)), rand_vec(10.0)),
                velocity: rand_vec(3.0),
                accel_bias: rand_vec(0.1),
                gyro_bias: rand_vec(0.01),
            };
            let mut delta = NavTangent::from_iterator((0..NAV_DIM).map(|_| rng.random_range(-1.0..1.0)));
            let n = delta.norm();
            delta *= rng.random_range(0.0..0.1) / n;
            let back = state.retract(&delta).local(&state);
            assert!((back - delta).norm() < 1e-9, "seed {seed}");
        }
    }

    #[test]
    fn quaternion_norm_drift_over_many_compositions() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let mut r = Rotation3::<f64>::identity();
        for _ in 0..1_000_000 {
            let w = Vector3::new(
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            );
            r = r * so3_exp(&w);
        }
        let [w, x, y, z] = r.wxyz();
        assert!(((w * w + x * x + y * y + z * z).sqrt() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn works_in_single_precision() {
        let r = so3_exp(&Vector3::new(0.0f32, 0.0, 1.2));
        assert!((yaw_of(&r).unwrap() - 1.2).abs() < 1e-6);
        let w = Vector3::new(0.3f32, -0.2, 0.1);
        assert!((so3_log(&so3_exp(&w)) - w).norm() < 1e-6);
    }

    proptest! {
        #[test]
        fn exp_log_inverse(x in -1.8f64..1.8, y in -1.8f64..1.8, z in -1.8f64..1.8) {
            let w = Vector3::new(x, y, z);
            prop_assume!(w.norm() < PI - 1e-3);
            prop_assert!((so3_log(&so3_exp(&w)) - w).norm() <= 1e-12);
        }

        #[test]
        fn yaw_of_pure_yaw(psi in -PI..PI) {
            let psi = if psi <= -PI { PI } else { psi };
            prop_assert!((yaw_of(&so3_exp(&Vector3::new(0.0, 0.0, psi))).unwrap() - psi).abs() <= 1e-12);
        }
    }
}
