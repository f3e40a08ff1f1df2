//! Preintegration against re-integration and chained prediction.

use nalgebra::{Matrix3, Vector3};
use navfuse::geom::{NavState, Pose3, Rotation3};
use navfuse::preintegration::{bias_correct, gravity_vector, integrate, predict, ImuBias, ImuNoise, ImuSample};

const RATE: f64 = 200.0;

/// Smoothly varying rates and forces, 200 Hz.
fn stream(n: usize) -> Vec<ImuSample<f64>> {
    (0..n)
        .map(|k| {
            let t = k as f64 / RATE;
            ImuSample {
                t,
                gyro: Vector3::new(0.3 * (1.1 * t).sin(), -0.2 * (0.7 * t).cos(), 0.5 + 0.1 * t),
                accel: Vector3::new(1.0 + 0.5 * (0.9 * t).cos(), 0.4 * (1.3 * t).sin(), 9.81 + 0.2 * t),
            }
        })
        .collect()
}

fn start_state(bias: ImuBias<f64>) -> NavState<f64> {
    NavState {
        pose: Pose3::new(Rotation3::from_euler_zyx(0.4, 0.1, -0.2), Vector3::new(1.0, -2.0, 0.5)),
        velocity: Vector3::new(1.5, 0.3, -0.1),
        accel_bias: bias.accel,
        gyro_bias: bias.gyro,
    }
}

#[test]
fn chained_prediction_matches_single_interval() {
    let samples = stream(801);
    let bias = ImuBias::new(Vector3::new(0.02, -0.01, 0.03), Vector3::new(1e-3, 2e-3, -1e-3));
    let noise = ImuNoise::default();
    let g = gravity_vector(9.81);
    let x0 = start_state(bias);
    let whole = integrate(&samples, bias, noise).unwrap();
    let direct = predict(&x0, &whole, &g);
    for split in [1, 137, 400, 799] {
        let a = integrate(&samples[..=split], bias, noise).unwrap();
        let b = integrate(&samples[split..], bias, noise).unwrap();
        let chained = predict(&predict(&x0, &a, &g), &b, &g);
        let dp = (chained.pose.translation - direct.pose.translation).norm();
        assert!(dp <= 1e-8, "split {split}: position gap {dp:e}");
        assert!((chained.velocity - direct.velocity).norm() <= 1e-9);
        assert!(chained.pose.rotation.local_angle(&direct.pose.rotation) <= 1e-12);
    }
}

trait LocalAngle {
    fn local_angle(&self, other: &Self) -> f64;
}

impl LocalAngle for Rotation3<f64> {
    fn local_angle(&self, other: &Self) -> f64 {
        (other.inverse() * *self).angle()
    }
}

#[test]
fn bias_jacobians_match_central_differences() {
    let samples = stream(201);
    let noise = ImuNoise::default();
    let base = ImuBias::new(Vector3::new(0.05, -0.02, 0.01), Vector3::new(0.01, -0.005, 0.002));
    let d0 = integrate(&samples, base, noise).unwrap();
    let h = 1e-5;
    let mut fd = [Matrix3::zeros(); 5];
    for axis in 0..3 {
        for (is_gyro, targets) in [(false, [1usize, 3]), (true, [2, 4])] {
            let shifted = |sign: f64| {
                let mut b = base;
                if is_gyro {
                    b.gyro[axis] += sign * h;
                } else {
                    b.accel[axis] += sign * h;
                }
                integrate(&samples, b, noise).unwrap()
            };
            let (p, m) = (shifted(1.0), shifted(-1.0));
            fd[targets[0]].set_column(axis, &((p.delta_vel - m.delta_vel) / (2.0 * h)));
            fd[targets[1]].set_column(axis, &((p.delta_pos - m.delta_pos) / (2.0 * h)));
            if is_gyro {
                let dr = (d0.delta_rot.inverse() * p.delta_rot).log() - (d0.delta_rot.inverse() * m.delta_rot).log();
                fd[0].set_column(axis, &(dr / (2.0 * h)));
            }
        }
    }
    let analytic = [d0.d_rot_d_bg, d0.d_vel_d_ba, d0.d_vel_d_bg, d0.d_pos_d_ba, d0.d_pos_d_bg];
    for (name, (a, n)) in ["dR/dbg", "dv/dba", "dv/dbg", "dp/dba", "dp/dbg"].iter().zip(analytic.iter().zip(&fd)) {
        let rel = (a - n).norm() / a.norm();
        assert!(rel <= 1e-4, "{name}: relative error {rel:e}");
    }
}

#[test]
fn first_order_correction_tracks_reintegration() {
    let samples: Vec<_> = (0..401)
        .map(|k| ImuSample {
            t: k as f64 / RATE,
            gyro: Vector3::new(0.0, 0.0, 0.4),
            accel: Vector3::zeros(),
        })
        .collect();
    let noise = ImuNoise::default();
    let d0 = integrate(&samples, ImuBias::default(), noise).unwrap();
    let dt = d0.dt;
    for eps in [1e-2, 1e-3] {
        let shifted = ImuBias::new(Vector3::zeros(), Vector3::new(0.0, 0.0, eps));
        let corrected = bias_correct(&d0, &shifted);
        let exact = integrate(&samples, shifted, noise).unwrap();
        let err = (exact.delta_rot.inverse() * corrected.delta_rot).angle();
        assert!(err <= 10.0 * eps * eps * dt * dt, "eps {eps}: {err:e}");
    }

    let still: Vec<_> = (0..401)
        .map(|k| ImuSample {
            t: k as f64 / RATE,
            gyro: Vector3::zeros(),
            accel: Vector3::zeros(),
        })
        .collect();
    let d0 = integrate(&still, ImuBias::default(), noise).unwrap();
    let eps = 1e-3;
    let c = bias_correct(&d0, &ImuBias::new(Vector3::new(eps, 0.0, 0.0), Vector3::zeros()));
    assert!((c.delta_pos.x + 0.5 * eps * d0.dt * d0.dt).abs() <= eps * eps);
}

#[test]
fn covariance_trace_is_monotone() {
    let samples = stream(300);
    let mut last = 0.0;
    for n in 2..samples.len() {
        let d = integrate(&samples[..n], ImuBias::default(), ImuNoise::default()).unwrap();
        let tr = d.covariance.trace();
        assert!(tr >= last, "trace fell at {n}");
        last = tr;
        let min_eig = d.covariance.symmetric_eigenvalues().min();
        assert!(min_eig >= -1e-12);
    }
}
