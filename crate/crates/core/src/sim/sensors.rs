use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::{DegradedSensor, FlowSample, MagSample, OdomSample, Scenario, SensorLog, TruthSample};
use crate::geom::{Pose3, Rotation3};
use crate::preintegration::ImuSample;
use crate::scalar::wrap_angle;

/// Independent random streams; each sample of a stream draws from its own
/// block of the generator, addressed by `(seed, stream, index)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    ImuNoise = 1,
    BiasWalk = 2,
    Mag = 3,
    Flow = 4,
    Lidar = 5,
    Vio = 6,
    Loop = 7,
    Corrupt = 8,
}

/// 32-bit words reserved per sample index; ample for the rejection samplers.
const WORDS_PER_INDEX: u128 = 1 << 12;

fn rng_at(seed: u64, stream: Stream, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream as u64);
    rng.set_word_pos(index as u128 * WORDS_PER_INDEX);
    rng
}

fn normal3(rng: &mut ChaCha8Rng, sigma: f64) -> Vector3<f64> {
    let x: f64 = rng.sample(StandardNormal);
    let y: f64 = rng.sample(StandardNormal);
    let z: f64 = rng.sample(StandardNormal);
    Vector3::new(x, y, z) * sigma
}

fn normal(rng: &mut ChaCha8Rng, sigma: f64) -> f64 {
    let x: f64 = rng.sample(StandardNormal);
    x * sigma
}

fn perturb(pose: &Pose3<f64>, rng: &mut ChaCha8Rng, rot_sigma: f64, trans_sigma: f64) -> Pose3<f64> {
    let dr = normal3(rng, rot_sigma);
    let dt = normal3(rng, trans_sigma);
    Pose3::new(pose.rotation * Rotation3::exp(&dr), pose.translation + dt)
}

/// Indices of truth samples on a regular grid of `rate` Hz.
fn grid(truth: &[TruthSample], imu_rate: f64, rate: f64) -> Vec<usize> {
    let step = imu_rate / rate;
    let mut out = Vec::new();
    for k in 0.. {
        let idx = (k as f64 * step).round() as usize;
        if idx >= truth.len() {
            break;
        }
        out.push(idx);
    }
    out
}

/// Derives every measurement stream from ground truth. Only the scenario
/// seed feeds the random draws, so the result is reproducible bit for bit.
pub fn synthesize_sensors(truth: &[TruthSample], scenario: &Scenario) -> SensorLog {
    let n = &scenario.noise;
    let seed = scenario.seed;
    let rate = scenario.imu_rate;
    let dt = 1.0 / rate;

    let mut truth = truth.to_vec();
    let mut accel_bias = Vector3::from(n.initial_accel_bias);
    let mut gyro_bias = Vector3::from(n.initial_gyro_bias);
    let mut imu = Vec::with_capacity(truth.len());
    for (k, s) in truth.iter_mut().enumerate() {
        if k > 0 {
            let mut rng = rng_at(seed, Stream::BiasWalk, k);
            accel_bias += normal3(&mut rng, n.accel_bias_walk * dt.sqrt());
            gyro_bias += normal3(&mut rng, n.gyro_bias_walk * dt.sqrt());
        }
        s.state.accel_bias = accel_bias;
        s.state.gyro_bias = gyro_bias;
        let mut rng = rng_at(seed, Stream::ImuNoise, k);
        let gyro = s.angular_rate + gyro_bias + normal3(&mut rng, n.gyro_density * rate.sqrt());
        let accel = s.specific_force + accel_bias + normal3(&mut rng, n.accel_density * rate.sqrt());
        imu.push(ImuSample { t: s.t, gyro, accel });
    }

    let mut mag = Vec::new();
    for (i, &k) in grid(&truth, rate, scenario.mag_rate).iter().enumerate() {
        let s = &truth[k];
        let mut rng = rng_at(seed, Stream::Mag, i);
        let yaw = s.state.rotation().yaw().unwrap_or(0.0);
        let noise = normal(&mut rng, n.mag_sigma);
        let u: f64 = rng.random();
        let heading = if u < n.mag_outlier_probability {
            let side = if rng.random::<bool>() { 1.0 } else { -1.0 };
            let offset = rng.random_range(n.mag_outlier_magnitude..=std::f64::consts::PI);
            wrap_angle(yaw + side * offset)
        } else {
            wrap_angle(yaw + noise)
        };
        mag.push(MagSample { t: s.t, heading });
    }

    let mut flow = Vec::new();
    for (i, &k) in grid(&truth, rate, scenario.flow_rate).iter().enumerate() {
        let s = &truth[k];
        let mut rng = rng_at(seed, Stream::Flow, i);
        let body = s.state.rotation().inverse_rotate(&s.state.velocity);
        flow.push(FlowSample {
            t: s.t,
            vx: body.x + normal(&mut rng, n.flow_sigma),
            vy: body.y + normal(&mut rng, n.flow_sigma),
            height: s.state.position().z + normal(&mut rng, n.height_sigma),
        });
    }

    // Arc length travelled up to each truth sample.
    let mut travelled = vec![0.0; truth.len()];
    for k in 1..truth.len() {
        travelled[k] = travelled[k - 1] + (truth[k].state.position() - truth[k - 1].state.position()).norm();
    }

    let keyframes = grid(&truth, rate, scenario.keyframe_rate);
    let degraded = |sensor: DegradedSensor, t: f64| {
        scenario
            .degradation
            .iter()
            .any(|w| w.sensor == sensor && w.contains(t))
    };
    let mut lidar = Vec::new();
    let mut vio = Vec::new();
    for (i, w) in keyframes.windows(2).enumerate() {
        let (a, b) = (&truth[w[0]], &truth[w[1]]);
        let rel = a.state.pose.between(&b.state.pose);
        let mid = 0.5 * (a.t + b.t);
        let corrupt = |sensor: Stream| {
            let mut rng = rng_at(seed, Stream::Corrupt, 2 * i + (sensor == Stream::Vio) as usize);
            let rot = Rotation3::exp(&normal3(&mut rng, 0.5));
            Pose3::new(rot, normal3(&mut rng, 2.0))
        };
        let sample = |relative| OdomSample {
            t_from: a.t,
            t_to: b.t,
            relative,
        };
        if !degraded(DegradedSensor::Lidar, mid) {
            let mut rng = rng_at(seed, Stream::Lidar, i);
            let drift = n.lidar_z_drift * (travelled[w[1]] - travelled[w[0]]);
            let noisy = perturb(&rel, &mut rng, n.lidar_rot_sigma, n.lidar_trans_sigma);
            let drifted = Pose3::new(noisy.rotation, noisy.translation + Vector3::new(0.0, 0.0, drift));
            lidar.push(sample(drifted));
        } else if scenario.corrupt_degraded {
            lidar.push(sample(corrupt(Stream::Lidar)));
        }
        if !degraded(DegradedSensor::Vio, mid) {
            let mut rng = rng_at(seed, Stream::Vio, i);
            vio.push(sample(perturb(&rel, &mut rng, n.vio_rot_sigma, n.vio_trans_sigma)));
        } else if scenario.corrupt_degraded {
            vio.push(sample(corrupt(Stream::Vio)));
        }
    }

    // One loop per keyframe: the closest sufficiently old keyframe within reach.
    let mut loops = Vec::new();
    for (j, &kj) in keyframes.iter().enumerate() {
        let b = &truth[kj];
        let mut best: Option<(usize, f64)> = None;
        for &ki in &keyframes[..j] {
            let a = &truth[ki];
            if b.t - a.t < scenario.loop_min_age {
                break;
            }
            let d = (b.state.position() - a.state.position()).norm();
            if d <= scenario.loop_radius && best.map_or(true, |(_, bd)| d < bd) {
                best = Some((ki, d));
            }
        }
        if let Some((ki, _)) = best {
            let a = &truth[ki];
            let mut rng = rng_at(seed, Stream::Loop, j);
            let rel = a.state.pose.between(&b.state.pose);
            loops.push(OdomSample {
                t_from: a.t,
                t_to: b.t,
                relative: perturb(&rel, &mut rng, n.loop_rot_sigma, n.loop_trans_sigma),
            });
        }
    }

    SensorLog {
        truth,
        imu,
        mag,
        flow,
        lidar,
        vio,
        loops,
    }
}
