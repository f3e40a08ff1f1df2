//! On-manifold IMU preintegration between keyframes.
//!
//! Measurements are integrated with the midpoint rule. The 9x9 covariance
//! is ordered `(rotation, velocity, position)` and the bias Jacobians are the
//! exact first-order derivatives of the discrete recursion, so re-integrating
//! at a nearby bias agrees with [`bias_correct`] to second order.

use nalgebra::{Matrix3, SMatrix, Vector3};
use thiserror::Error;

use crate::geom::{right_jacobian, skew, NavState, Pose3, Rotation3};
use crate::scalar::{lit, Real};

/// Largest accepted gap between consecutive IMU samples, seconds.
pub const MAX_SAMPLE_GAP: f64 = 0.1;
/// Bias change beyond which first-order correction is considered unreliable.
pub const BIAS_CORRECTION_LIMIT: f64 = 0.5;
pub const DEFAULT_GRAVITY: f64 = 9.81;

pub type Matrix9<T> = SMatrix<T, 9, 9>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PreintError {
    #[error("preintegration needs at least two samples, got {0}")]
    TooFewSamples(usize),
    #[error("timestamps not strictly increasing at sample {index}")]
    NonMonotonic { index: usize },
    #[error("gap of {gap} s before sample {index} exceeds {MAX_SAMPLE_GAP} s")]
    GapTooLarge { index: usize, gap: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImuSample<T: Real> {
    pub t: T,
    /// Body angular rate, rad/s.
    pub gyro: Vector3<T>,
    /// Body specific force, m/s².
    pub accel: Vector3<T>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImuBias<T: Real> {
    pub accel: Vector3<T>,
    pub gyro: Vector3<T>,
}

impl<T: Real> Default for ImuBias<T> {
    fn default() -> Self {
        Self {
            accel: Vector3::zeros(),
            gyro: Vector3::zeros(),
        }
    }
}

impl<T: Real> ImuBias<T> {
    pub fn new(accel: Vector3<T>, gyro: Vector3<T>) -> Self {
        Self { accel, gyro }
    }

    pub fn of_state(state: &NavState<T>) -> Self {
        Self::new(state.accel_bias, state.gyro_bias)
    }
}

/// White-noise densities of the IMU.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImuNoise<T: Real> {
    /// rad/s/√Hz
    pub gyro_sigma: T,
    /// m/s²/√Hz
    pub accel_sigma: T,
}

impl<T: Real> Default for ImuNoise<T> {
    fn default() -> Self {
        Self {
            gyro_sigma: lit(1e-3),
            accel_sigma: lit(1e-2),
        }
    }
}

/// Relative motion accumulated between two keyframes.
#[derive(Debug, Clone, PartialEq)]
pub struct PreintegratedDelta<T: Real> {
    pub dt: T,
    pub delta_rot: Rotation3<T>,
    pub delta_vel: Vector3<T>,
    pub delta_pos: Vector3<T>,
    /// Covariance of `(δθ, δv, δp)`.
    pub covariance: Matrix9<T>,
    /// Bias the measurements were corrected with.
    pub bias: ImuBias<T>,
    pub d_rot_d_bg: Matrix3<T>,
    pub d_vel_d_ba: Matrix3<T>,
    pub d_vel_d_bg: Matrix3<T>,
    pub d_pos_d_ba: Matrix3<T>,
    pub d_pos_d_bg: Matrix3<T>,
}

impl<T: Real> PreintegratedDelta<T> {
    fn empty(bias: ImuBias<T>) -> Self {
        Self {
            dt: T::zero(),
            delta_rot: Rotation3::identity(),
            delta_vel: Vector3::zeros(),
            delta_pos: Vector3::zeros(),
            covariance: Matrix9::zeros(),
            bias,
            d_rot_d_bg: Matrix3::zeros(),
            d_vel_d_ba: Matrix3::zeros(),
            d_vel_d_bg: Matrix3::zeros(),
            d_pos_d_ba: Matrix3::zeros(),
            d_pos_d_bg: Matrix3::zeros(),
        }
    }
}

/// Incremental integrator; [`integrate`] is the batch entry point.
#[derive(Debug, Clone)]
pub struct Preintegrator<T: Real> {
    delta: PreintegratedDelta<T>,
    noise: ImuNoise<T>,
    last: Option<ImuSample<T>>,
    count: usize,
}

impl<T: Real> Preintegrator<T> {
    pub fn new(bias: ImuBias<T>, noise: ImuNoise<T>) -> Self {
        Self {
            delta: PreintegratedDelta::empty(bias),
            noise,
            last: None,
            count: 0,
        }
    }

    pub fn sample_count(&self) -> usize {
        self.count
    }

    pub fn push(&mut self, sample: ImuSample<T>) -> Result<(), PreintError> {
        let index = self.count;
        if let Some(prev) = self.last {
            let dt = sample.t - prev.t;
            if !(dt > T::zero()) {
                return Err(PreintError::NonMonotonic { index });
            }
            if dt > lit(MAX_SAMPLE_GAP) {
                return Err(PreintError::GapTooLarge {
                    index,
                    gap: dt.to_f64().unwrap_or(f64::NAN),
                });
            }
            self.step(&prev, &sample, dt);
        }
        self.last = Some(sample);
        self.count += 1;
        Ok(())
    }

    fn step(&mut self, s0: &ImuSample<T>, s1: &ImuSample<T>, dt: T) {
        let half = lit::<T>(0.5);
        let d = &mut self.delta;
        let bias = d.bias;

        let omega = (s0.gyro + s1.gyro) * half - bias.gyro;
        let phi = omega * dt;
        let step_rot = Rotation3::exp(&phi);
        let step_rot_t = step_rot.inverse().matrix();
        let jr = right_jacobian(&phi);

        let r0 = d.delta_rot.matrix();
        let rot1 = d.delta_rot * step_rot;
        let r1 = rot1.matrix();
        let f0 = s0.accel - bias.accel;
        let f1 = s1.accel - bias.accel;
        let a_mid = (r0 * f0 + r1 * f1) * half;

        // bias Jacobians of the discrete recursion
        let j_rot0 = d.d_rot_d_bg;
        let j_rot1 = step_rot_t * j_rot0 - jr * dt;
        let da_dbg = -(r0 * skew(&f0) * j_rot0 + r1 * skew(&f1) * j_rot1) * half;
        let da_dba = -(r0 + r1) * half;
        let dt2_half = dt * dt * half;
        d.d_pos_d_ba += d.d_vel_d_ba * dt + da_dba * dt2_half;
        d.d_pos_d_bg += d.d_vel_d_bg * dt + da_dbg * dt2_half;
        d.d_vel_d_ba += da_dba * dt;
        d.d_vel_d_bg += da_dbg * dt;
        d.d_rot_d_bg = j_rot1;

        // error-state transition for (δθ, δv, δp)
        let da_dtheta = -(r0 * skew(&f0) + r1 * skew(&f1) * step_rot_t) * half;
        let mut a = Matrix9::<T>::identity();
        a.fixed_view_mut::<3, 3>(0, 0).copy_from(&step_rot_t);
        a.fixed_view_mut::<3, 3>(3, 0).copy_from(&(da_dtheta * dt));
        a.fixed_view_mut::<3, 3>(6, 0).copy_from(&(da_dtheta * dt2_half));
        a.fixed_view_mut::<3, 3>(6, 3).copy_from(&(Matrix3::identity() * dt));

        let mut b = SMatrix::<T, 9, 6>::zeros();
        let b_theta = jr * dt;
        let da_dng = -(r1 * skew(&f1) * b_theta) * half;
        b.fixed_view_mut::<3, 3>(0, 0).copy_from(&b_theta);
        b.fixed_view_mut::<3, 3>(3, 0).copy_from(&(da_dng * dt));
        b.fixed_view_mut::<3, 3>(6, 0).copy_from(&(da_dng * dt2_half));
        let r_mean = (r0 + r1) * half;
        b.fixed_view_mut::<3, 3>(3, 3).copy_from(&(r_mean * dt));
        b.fixed_view_mut::<3, 3>(6, 3).copy_from(&(r_mean * dt2_half));

        let gyro_var = self.noise.gyro_sigma * self.noise.gyro_sigma / dt;
        let accel_var = self.noise.accel_sigma * self.noise.accel_sigma / dt;
        let mut q = SMatrix::<T, 6, 6>::zeros();
        for i in 0..3 {
            q[(i, i)] = gyro_var;
            q[(i + 3, i + 3)] = accel_var;
        }
        let cov = a * d.covariance * a.transpose() + b * q * b.transpose();
        d.covariance = (cov + cov.transpose()) * half;

        // nominal state
        d.delta_pos += d.delta_vel * dt + a_mid * dt2_half;
        d.delta_vel += a_mid * dt;
        d.delta_rot = rot1;
        d.dt += dt;
    }

    pub fn delta(&self) -> &PreintegratedDelta<T> {
        &self.delta
    }

    pub fn finish(self) -> Result<PreintegratedDelta<T>, PreintError> {
        if self.count < 2 {
            return Err(PreintError::TooFewSamples(self.count));
        }
        Ok(self.delta)
    }
}

/// Preintegrates `samples` with the given linearization bias and noise densities.
pub fn integrate<T: Real>(
    samples: &[ImuSample<T>],
    bias: ImuBias<T>,
    noise: ImuNoise<T>,
) -> Result<PreintegratedDelta<T>, PreintError> {
    if samples.len() < 2 {
        return Err(PreintError::TooFewSamples(samples.len()));
    }
    let mut integrator = Preintegrator::new(bias, noise);
    for s in samples {
        integrator.push(*s)?;
    }
    integrator.finish()
}

/// Delta re-linearized to a new bias.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CorrectedDelta<T: Real> {
    pub delta_rot: Rotation3<T>,
    pub delta_vel: Vector3<T>,
    pub delta_pos: Vector3<T>,
}

/// First-order bias update of a preintegrated delta.
///
/// Logs a warning when the bias moved further than [`BIAS_CORRECTION_LIMIT`]
/// from the linearization point.
pub fn bias_correct<T: Real>(delta: &PreintegratedDelta<T>, new_bias: &ImuBias<T>) -> CorrectedDelta<T> {
    let dba = new_bias.accel - delta.bias.accel;
    let dbg = new_bias.gyro - delta.bias.gyro;
    let change = (dba.norm_squared() + dbg.norm_squared()).sqrt();
    if change > lit(BIAS_CORRECTION_LIMIT) {
        log::warn!(
            "bias moved {:.3} from its linearization point; first-order correction may be inaccurate",
            change.to_f64().unwrap_or(f64::NAN)
        );
    }
    if dba == Vector3::zeros() && dbg == Vector3::zeros() {
        return CorrectedDelta {
            delta_rot: delta.delta_rot,
            delta_vel: delta.delta_vel,
            delta_pos: delta.delta_pos,
        };
    }
    CorrectedDelta {
        delta_rot: delta.delta_rot * Rotation3::exp(&(delta.d_rot_d_bg * dbg)),
        delta_vel: delta.delta_vel + delta.d_vel_d_ba * dba + delta.d_vel_d_bg * dbg,
        delta_pos: delta.delta_pos + delta.d_pos_d_ba * dba + delta.d_pos_d_bg * dbg,
    }
}

/// Propagates `state` through `delta` under `gravity` (world frame, m/s²).
///
/// The delta is first corrected to the state's own bias estimate.
pub fn predict<T: Real>(state: &NavState<T>, delta: &PreintegratedDelta<T>, gravity: &Vector3<T>) -> NavState<T> {
    let c = bias_correct(delta, &ImuBias::of_state(state));
    let dt = delta.dt;
    let r_i = state.pose.rotation;
    let rotation = r_i * c.delta_rot;
    let velocity = state.velocity + gravity * dt + r_i.rotate(&c.delta_vel);
    let position = state.pose.translation
        + state.velocity * dt
        + gravity * (lit::<T>(0.5) * dt * dt)
        + r_i.rotate(&c.delta_pos);
    NavState {
        pose: Pose3::new(rotation, position),
        velocity,
        accel_bias: state.accel_bias,
        gyro_bias: state.gyro_bias,
    }
}

/// Gravity vector `(0, 0, -g)`.
pub fn gravity_vector<T: Real>(g: T) -> Vector3<T> {
    Vector3::new(T::zero(), T::zero(), -g)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn stream(rate: f64, duration: f64, gyro: Vector3<f64>, accel: Vector3<f64>) -> Vec<ImuSample<f64>> {
        let n = (rate * duration).round() as usize;
        (0..=n)
            .map(|i| ImuSample {
                t: i as f64 / rate,
                gyro,
                accel,
            })
            .collect()
    }

    fn quiet() -> ImuNoise<f64> {
        ImuNoise {
            gyro_sigma: 0.0,
            accel_sigma: 0.0,
        }
    }

    #[test]
    fn stationary_zero_stream() {
        let s = stream(100.0, 1.0, Vector3::zeros(), Vector3::zeros());
        let d = integrate(&s, ImuBias::default(), quiet()).unwrap();
        assert!((d.dt - 1.0).abs() < 1e-12);
        assert_eq!(d.delta_rot, Rotation3::identity());
        assert_eq!(d.delta_vel, Vector3::zeros());
        assert_eq!(d.delta_pos, Vector3::zeros());
    }

    #[test]
    fn constant_rate_rotation() {
        let s = stream(200.0, 2.0, Vector3::new(0.0, 0.0, 0.5), Vector3::zeros());
        let d = integrate(&s, ImuBias::default(), quiet()).unwrap();
        let expect = Rotation3::exp(&Vector3::new(0.0, 0.0, 1.0));
        assert!((d.delta_rot.inverse() * expect).angle() < 1e-6);
        assert!(d.delta_vel.norm() < 1e-6 && d.delta_pos.norm() < 1e-6);

        // independent fine-step Euler integrator of the quaternion ODE
        let mut q = nalgebra::UnitQuaternion::<f64>::identity();
        let h = 1e-3;
        for _ in 0..2000 {
            let w = Vector3::new(0.0, 0.0, 0.5);
            q = q * nalgebra::UnitQuaternion::from_scaled_axis(w * h);
        }
        assert!((d.delta_rot.inverse() * Rotation3::from_unit_quaternion(q)).angle() < 1e-6);
    }

    #[test]
    fn constant_acceleration() {
        let s = stream(200.0, 2.0, Vector3::zeros(), Vector3::new(1.0, 0.0, 0.0));
        let d = integrate(&s, ImuBias::default(), quiet()).unwrap();
        assert!((d.delta_vel - Vector3::new(2.0, 0.0, 0.0)).norm() < 1e-6);
        assert!((d.delta_pos - Vector3::new(2.0, 0.0, 0.0)).norm() < 1e-6);
    }

    #[test]
    fn input_errors() {
        let s = stream(100.0, 1.0, Vector3::zeros(), Vector3::zeros());
        assert_eq!(
            integrate(&s[..1], ImuBias::default(), quiet()),
            Err(PreintError::TooFewSamples(1))
        );
        assert_eq!(integrate::<f64>(&[], ImuBias::default(), quiet()), Err(PreintError::TooFewSamples(0)));
        let mut bad = s.clone();
        bad[5].t = bad[4].t;
        assert_eq!(
            integrate(&bad, ImuBias::default(), quiet()),
            Err(PreintError::NonMonotonic { index: 5 })
        );
        let gap = vec![s[0], ImuSample { t: 0.5, ..s[1] }];
        assert!(matches!(
            integrate(&gap, ImuBias::default(), quiet()),
            Err(PreintError::GapTooLarge { index: 1, .. })
        ));
    }

    #[test]
    fn bias_correct_identity_and_shifts() {
        let s = stream(200.0, 1.0, Vector3::new(0.1, -0.2, 0.3), Vector3::new(0.0, 0.0, 9.81));
        let d = integrate(&s, ImuBias::default(), quiet()).unwrap();
        let same = bias_correct(&d, &ImuBias::default());
        assert_eq!(same.delta_rot, d.delta_rot);
        assert_eq!(same.delta_vel, d.delta_vel);

        // accelerometer bias on a stationary stream shifts Δp by -½ε·Δt²
        let eps = 1e-3;
        let still = stream(200.0, 2.0, Vector3::zeros(), Vector3::zeros());
        let d = integrate(&still, ImuBias::default(), quiet()).unwrap();
        let c = bias_correct(&d, &ImuBias::new(Vector3::new(eps, 0.0, 0.0), Vector3::zeros()));
        let shifted = integrate(&still, ImuBias::new(Vector3::new(eps, 0.0, 0.0), Vector3::zeros()), quiet()).unwrap();
        assert!((c.delta_pos.x + 0.5 * eps * 4.0).abs() < eps * eps);
        assert!((c.delta_pos - shifted.delta_pos).norm() < eps * eps);
    }

    #[test]
    fn gyro_bias_correction_is_second_order() {
        let s = stream(200.0, 2.0, Vector3::new(0.0, 0.0, 0.5), Vector3::new(0.2, 0.0, 9.81));
        let d = integrate(&s, ImuBias::default(), quiet()).unwrap();
        for eps in [1e-2, 1e-3] {
            let nb = ImuBias::new(Vector3::zeros(), Vector3::new(0.0, 0.0, eps));
            let c = bias_correct(&d, &nb);
            let r = integrate(&s, nb, quiet()).unwrap();
            let err = (c.delta_rot.inverse() * r.delta_rot).angle();
            assert!(err <= 10.0 * eps * eps * d.dt * d.dt, "eps {eps} err {err}");
        }
    }

    #[test]
    fn predict_examples() {
        let zero = integrate(&stream(100.0, 1.0, Vector3::zeros(), Vector3::zeros()), ImuBias::default(), quiet()).unwrap();
        let s = predict(&NavState::identity(), &zero, &Vector3::zeros());
        assert_eq!(s, NavState::identity());

        let fall = predict(&NavState::identity(), &zero, &gravity_vector(9.81));
        assert!((fall.velocity - Vector3::new(0.0, 0.0, -9.81)).norm() < 1e-12);
        assert!((fall.pose.translation - Vector3::new(0.0, 0.0, -4.905)).norm() < 1e-12);

        let mut d = zero.clone();
        d.dt = 2.0;
        d.delta_pos = Vector3::new(2.0, 0.0, 0.0);
        d.delta_vel = Vector3::new(2.0, 0.0, 0.0);
        let s = predict(&NavState::identity(), &d, &Vector3::zeros());
        assert_eq!(s.pose.translation, Vector3::new(2.0, 0.0, 0.0));
        assert_eq!(s.velocity, Vector3::new(2.0, 0.0, 0.0));
    }

    #[test]
    fn covariance_grows_and_stays_psd() {
        let mut s = stream(200.0, 1.0, Vector3::new(0.3, -0.1, 0.4), Vector3::new(0.5, 0.2, 9.81));
        for (i, x) in s.iter_mut().enumerate() {
            x.gyro.x += 0.2 * (i as f64 * 0.05).sin();
            x.accel.y += (i as f64 * 0.03).cos();
        }
        let mut p = Preintegrator::new(ImuBias::default(), ImuNoise::default());
        let mut prev = 0.0;
        for x in &s {
            p.push(*x).unwrap();
            let tr = p.delta().covariance.trace();
            assert!(tr >= prev);
            prev = tr;
        }
        let d = p.finish().unwrap();
        let eig = d.covariance.symmetric_eigenvalues();
        assert!(eig.iter().all(|e| *e >= -1e-12));
        assert!(d.covariance.trace() > 0.0);
    }

    #[test]
    fn single_precision_integration() {
        let s: Vec<ImuSample<f32>> = (0..=200)
            .map(|i| ImuSample {
                t: i as f32 / 200.0,
                gyro: Vector3::new(0.0, 0.0, 0.5),
                accel: Vector3::new(1.0, 0.0, 0.0),
            })
            .collect();
        let d = integrate(&s, ImuBias::default(), ImuNoise::default()).unwrap();
        assert!((d.dt - 1.0).abs() < 1e-5);
        assert!((d.delta_rot.yaw().unwrap() - 0.5).abs() < 1e-5);
    }
}
