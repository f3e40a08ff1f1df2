use std::collections::BTreeMap;

use nalgebra::{Matrix2, Matrix3, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use super::factors::{gate_heading, pose_information, BiasWalk, Factor, GateDecision, Matrix15, OdomSource};
use super::{optimize, slide_window, FusionError, Graph, Key, SolverConfig};
use crate::geom::{NavState, Pose3, Rotation3, BA, BG, POS, ROT, VEL};
use crate::preintegration::{gravity_vector, integrate, predict, ImuBias, ImuNoise, PreintegratedDelta};
use crate::scalar::wrap_angle;
use crate::sim::{FlowSample, MagSample, OdomSample, SensorLog};

/// Which measurement types the estimator consumes. IMU is always on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FactorToggles {
    pub lidar: bool,
    pub vio: bool,
    pub loops: bool,
    pub mag: bool,
    pub mag_gate: bool,
    pub flow_velocity: bool,
    pub height: bool,
}

impl Default for FactorToggles {
    fn default() -> Self {
        Self {
            lidar: true,
            vio: true,
            loops: true,
            mag: true,
            mag_gate: true,
            flow_velocity: true,
            height: true,
        }
    }
}

impl FactorToggles {
    /// At least one source of relative or velocity information besides the IMU.
    pub fn observable(&self) -> bool {
        self.lidar || self.vio || self.flow_velocity
    }
}

/// Standard deviations the estimator assumes for each measurement.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseModel {
    pub gyro: f64,
    pub accel: f64,
    pub bias_walk: BiasWalk,
    pub lidar_rot: f64,
    pub lidar_trans: f64,
    pub vio_rot: f64,
    pub vio_trans: f64,
    pub loop_rot: f64,
    pub loop_trans: f64,
    pub mag_heading: f64,
    pub flow_velocity: f64,
    pub height: f64,
    pub prior_tilt: f64,
    pub prior_yaw: f64,
    pub prior_position: f64,
    /// Vertical body velocity prior; planar components come from flow when available.
    pub prior_vertical_velocity: f64,
    /// Velocity prior used when no flow sample initializes the velocity.
    pub prior_velocity_uninformed: f64,
    pub prior_accel_bias: f64,
    pub prior_gyro_bias: f64,
}

impl Default for NoiseModel {
    fn default() -> Self {
        Self {
            gyro: 1e-3,
            accel: 1e-2,
            bias_walk: BiasWalk::default(),
            lidar_rot: 2e-3,
            lidar_trans: 0.02,
            vio_rot: 4e-3,
            vio_trans: 0.04,
            loop_rot: 0.01,
            loop_trans: 0.1,
            mag_heading: 0.02,
            flow_velocity: 0.05,
            height: 0.05,
            prior_tilt: 0.01,
            prior_yaw: 0.02,
            prior_position: 0.01,
            prior_vertical_velocity: 0.05,
            prior_velocity_uninformed: 10.0,
            prior_accel_bias: 0.05,
            prior_gyro_bias: 5e-3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EstimatorConfig {
    /// Keyframe cadence, Hz.
    pub keyframe_rate: f64,
    /// Active keyframes kept in the sliding window.
    pub window: usize,
    /// Gravity magnitude, m/s².
    pub gravity: f64,
    /// Magnetometer innovation gate, rad.
    pub mag_gate: f64,
    pub noise: NoiseModel,
    pub toggles: FactorToggles,
    pub solver: SolverConfig,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        Self {
            keyframe_rate: 5.0,
            window: 30,
            gravity: 9.81,
            mag_gate: 0.25,
            noise: NoiseModel::default(),
            toggles: FactorToggles::default(),
            solver: SolverConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KeyframeEstimate {
    pub key: Key,
    pub t: f64,
    pub state: NavState<f64>,
}

/// One magnetometer gating decision.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GateRecord {
    pub t: f64,
    pub innovation: f64,
    pub accepted: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct RunStats {
    pub keyframes: usize,
    pub optimizations: usize,
    pub total_iterations: usize,
    pub unconverged: usize,
    pub mag_accepted: usize,
    pub mag_rejected: usize,
    pub lidar_factors: usize,
    pub vio_factors: usize,
    pub loop_factors: usize,
    pub final_cost: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EstimatorOutput {
    /// Smoothed estimate of every keyframe, in key order.
    pub trajectory: Vec<KeyframeEstimate>,
    pub gating: Vec<GateRecord>,
    pub stats: RunStats,
}

/// Keyframe times and the IMU sample index at each.
fn keyframe_schedule(log: &SensorLog, rate: f64) -> Vec<(f64, usize)> {
    let imu = &log.imu;
    let t0 = imu[0].t;
    let t_end = imu[imu.len() - 1].t;
    let period = 1.0 / rate;
    let mut out: Vec<(f64, usize)> = Vec::new();
    let mut idx = 0;
    for k in 0.. {
        let target = t0 + k as f64 * period;
        if target > t_end + 1e-9 {
            break;
        }
        while idx < imu.len() && imu[idx].t < target - 1e-9 {
            idx += 1;
        }
        if idx >= imu.len() {
            break;
        }
        if out.last().map_or(true, |(_, i)| *i < idx) {
            out.push((imu[idx].t, idx));
        }
    }
    out
}

/// Looks keyframes up by timestamp.
struct KeyIndex {
    times: Vec<f64>,
    tolerance: f64,
}

impl KeyIndex {
    fn find(&self, t: f64) -> Option<Key> {
        let pos = self.times.partition_point(|x| *x < t);
        [pos.checked_sub(1), Some(pos)]
            .into_iter()
            .flatten()
            .filter(|&i| i < self.times.len())
            .filter(|&i| (self.times[i] - t).abs() <= self.tolerance)
            .min_by(|&a, &b| (self.times[a] - t).abs().total_cmp(&(self.times[b] - t).abs()))
            .map(Key)
    }
}

fn odometry_by_keys(samples: &[OdomSample], keys: &KeyIndex) -> BTreeMap<(Key, Key), Pose3<f64>> {
    let mut out = BTreeMap::new();
    for s in samples {
        if let (Some(a), Some(b)) = (keys.find(s.t_from), keys.find(s.t_to)) {
            if a < b {
                out.entry((a, b)).or_insert(s.relative);
            }
        }
    }
    out
}

/// Sample nearest to `t` within `half_window`, earliest on ties.
fn nearest<'a, S>(samples: &'a [S], time: impl Fn(&S) -> f64, t: f64, half_window: f64) -> Option<&'a S> {
    let pos = samples.partition_point(|s| time(s) < t);
    let lo = pos.saturating_sub(1);
    let hi = (pos + 1).min(samples.len());
    samples[lo..hi]
        .iter()
        .filter(|s| (time(s) - t).abs() <= half_window + 1e-9)
        .min_by(|a, b| (time(a) - t).abs().total_cmp(&(time(b) - t).abs()))
}

/// Initial heading: the earliest magnetometer sample that agrees (within the
/// gate) with the largest number of samples from the first second.
fn initial_heading(mag: &[MagSample], t0: f64, gate: f64) -> Option<f64> {
    let early: Vec<&MagSample> = mag.iter().filter(|m| m.t <= t0 + 1.0).collect();
    if early.is_empty() {
        return mag.first().map(|m| m.heading);
    }
    let support = |m: &MagSample| {
        early
            .iter()
            .filter(|o| wrap_angle(o.heading - m.heading).abs() <= gate)
            .count()
    };
    let mut best: Option<(&MagSample, usize)> = None;
    for m in &early {
        let s = support(m);
        if best.map_or(true, |(_, b)| s > b) {
            best = Some((m, s));
        }
    }
    best.map(|(m, _)| m.heading)
}

/// First relative-pose measurement and the IMU delta over the same interval.
struct FirstInterval {
    relative: Pose3<f64>,
    delta: PreintegratedDelta<f64>,
    trans_sigma: f64,
}

impl FirstInterval {
    /// World velocity at the first keyframe, assuming zero bias, and its
    /// standard deviation.
    fn velocity(&self, rotation: &Rotation3<f64>, gravity: &Vector3<f64>) -> (Vector3<f64>, f64) {
        let dt = self.delta.dt;
        // p1 = p0 + v0·dt + ½g·dt² + R0·Δp with p1 − p0 = R0·t_rel
        let v = rotation.rotate(&((self.relative.translation - self.delta.delta_pos) / dt)) - gravity * (0.5 * dt);
        (v, self.trans_sigma * std::f64::consts::SQRT_2 / dt)
    }
}

fn initial_prior(
    log: &SensorLog,
    config: &EstimatorConfig,
    t0: f64,
    half: f64,
    first: Option<&FirstInterval>,
) -> Result<Factor, FusionError> {
    let n = &config.noise;
    let tg = &config.toggles;
    let yaw = if tg.mag {
        initial_heading(&log.mag, t0, config.mag_gate).unwrap_or(0.0)
    } else {
        0.0
    };
    let rotation = Rotation3::from_euler_zyx(yaw, 0.0, 0.0);
    let flow0 = nearest(&log.flow, |f: &FlowSample| f.t, t0, half);
    let z0 = match (tg.height, flow0) {
        (true, Some(f)) => f.height,
        _ => 0.0,
    };
    let mut mean = NavState::from_pose(Pose3::new(rotation, Vector3::new(0.0, 0.0, z0)));

    let mut info = Matrix15::zeros();
    let set = |info: &mut Matrix15, o: usize, sig: [f64; 3]| {
        for i in 0..3 {
            info[(o + i, o + i)] = 1.0 / (sig[i] * sig[i]);
        }
    };
    let yaw_sigma = if tg.mag { n.mag_heading.max(n.prior_yaw) } else { n.prior_yaw };
    set(&mut info, ROT, [n.prior_tilt, n.prior_tilt, yaw_sigma]);
    set(&mut info, POS, [n.prior_position; 3]);
    set(&mut info, BA, [n.prior_accel_bias; 3]);
    set(&mut info, BG, [n.prior_gyro_bias; 3]);

    let r = rotation.matrix();
    let odometry = first.map(|f| f.velocity(&rotation, &gravity_vector(config.gravity)));
    if let Some((v, _)) = odometry {
        mean.velocity = v;
    }
    let vel_info_body = match (tg.flow_velocity, flow0) {
        (true, Some(f)) => {
            let vz = rotation.inverse_rotate(&mean.velocity).z;
            mean.velocity = rotation.rotate(&Vector3::new(f.vx, f.vy, vz));
            let vertical = odometry.map_or(n.prior_vertical_velocity, |(_, s)| s.max(n.prior_vertical_velocity));
            Matrix3::from_diagonal(&Vector3::new(
                1.0 / n.flow_velocity.powi(2),
                1.0 / n.flow_velocity.powi(2),
                1.0 / vertical.powi(2),
            ))
        }
        _ => Matrix3::identity() / n.prior_velocity_uninformed.powi(2),
    };
    let vel_info = r * vel_info_body * r.transpose();
    info.fixed_view_mut::<3, 3>(VEL, VEL).copy_from(&vel_info);
    Factor::prior(Key(0), mean, info)
}

/// Runs the sliding-window estimator over a complete sensor log.
///
/// Keyframes are placed at IMU samples on the configured cadence. Each
/// keyframe gets an IMU factor from the previous one, the enabled
/// relative-pose factors for that interval (loop closures may anchor to
/// already marginalized keyframes), and the nearest magnetometer (gated) and
/// flow/height samples within half a keyframe period.
pub fn run_estimator(log: &SensorLog, config: &EstimatorConfig) -> Result<EstimatorOutput, FusionError> {
    if log.imu.len() < 2 {
        return Err(FusionError::EmptyLog("fewer than two IMU samples"));
    }
    let schedule = keyframe_schedule(log, config.keyframe_rate);
    let period = 1.0 / config.keyframe_rate;
    let half = 0.5 * period;
    let imu_dt = log.imu[1].t - log.imu[0].t;
    let keys = KeyIndex {
        times: schedule.iter().map(|(t, _)| *t).collect(),
        tolerance: (0.5 * imu_dt).min(half),
    };
    let tg = config.toggles;
    let n = &config.noise;
    let lidar = if tg.lidar { odometry_by_keys(&log.lidar, &keys) } else { BTreeMap::new() };
    let vio = if tg.vio { odometry_by_keys(&log.vio, &keys) } else { BTreeMap::new() };
    let mut loops: BTreeMap<Key, Vec<(Key, Pose3<f64>)>> = BTreeMap::new();
    if tg.loops {
        for ((a, b), rel) in odometry_by_keys(&log.loops, &keys) {
            loops.entry(b).or_default().push((a, rel));
        }
    }
    let gravity = gravity_vector(config.gravity);
    let imu_noise = ImuNoise {
        gyro_sigma: n.gyro,
        accel_sigma: n.accel,
    };

    let mut graph = Graph::new(config.window);
    let mut stats = RunStats::default();
    let mut gating = Vec::new();
    let mut finished: BTreeMap<Key, NavState<f64>> = BTreeMap::new();

    let t0 = schedule[0].0;
    let first = match schedule.get(1) {
        Some(&(_, idx1)) => {
            let odometry = [
                (lidar.get(&(Key(0), Key(1))), n.lidar_trans),
                (vio.get(&(Key(0), Key(1))), n.vio_trans),
            ]
            .into_iter()
            .find_map(|(rel, sigma)| rel.map(|r| (*r, sigma)));
            match odometry {
                Some((relative, trans_sigma)) => Some(FirstInterval {
                    relative,
                    delta: integrate(&log.imu[schedule[0].1..=idx1], ImuBias::default(), imu_noise)?,
                    trans_sigma,
                }),
                None => None,
            }
        }
        None => None,
    };
    let prior = initial_prior(log, config, t0, half, first.as_ref())?;
    let start = match &prior {
        Factor::Prior(p) => p.mean,
        _ => unreachable!(),
    };
    graph.add_state(Key(0), start)?;
    graph.add_factor(prior)?;

    for (k, &(t_k, idx_k)) in schedule.iter().enumerate() {
        let key = Key(k);
        if k > 0 {
            let prev = Key(k - 1);
            let idx_prev = schedule[k - 1].1;
            let prev_state = *graph.state(prev).expect("previous keyframe active");
            let delta = integrate(
                &log.imu[idx_prev..=idx_k],
                ImuBias::of_state(&prev_state),
                imu_noise,
            )?;
            let predicted = predict(&prev_state, &delta, &gravity);
            graph.add_state(key, predicted)?;
            graph.add_factor(Factor::imu(prev, key, delta, gravity, n.bias_walk)?)?;

            if let Some(rel) = lidar.get(&(prev, key)) {
                graph.add_factor(Factor::rel_pose(
                    prev,
                    key,
                    *rel,
                    pose_information(n.lidar_rot, n.lidar_trans),
                    OdomSource::Lidar,
                )?)?;
                stats.lidar_factors += 1;
            }
            if let Some(rel) = vio.get(&(prev, key)) {
                graph.add_factor(Factor::rel_pose(
                    prev,
                    key,
                    *rel,
                    pose_information(n.vio_rot, n.vio_trans),
                    OdomSource::Vio,
                )?)?;
                stats.vio_factors += 1;
            }
            for (from, rel) in loops.get(&key).into_iter().flatten() {
                if graph.state(*from).is_some() {
                    graph.add_factor(Factor::rel_pose(
                        *from,
                        key,
                        *rel,
                        pose_information(n.loop_rot, n.loop_trans),
                        OdomSource::Loop,
                    )?)?;
                    stats.loop_factors += 1;
                }
            }
        }

        if tg.mag {
            if let Some(m) = nearest(&log.mag, |m: &MagSample| m.t, t_k, half) {
                let factor = Factor::mag_heading(key, m.heading, 1.0 / n.mag_heading.powi(2), config.mag_gate)?;
                let accept = match (&factor, tg.mag_gate) {
                    (Factor::MagHeading(f), true) => {
                        let estimate = graph.state(key).expect("keyframe just added");
                        let (decision, innovation) = gate_heading(f, estimate);
                        let accepted = decision == GateDecision::Accept;
                        gating.push(GateRecord {
                            t: m.t,
                            innovation,
                            accepted,
                        });
                        if !accepted {
                            log::debug!("rejected heading {:.3} at t={:.3} (innovation {innovation:.3})", m.heading, m.t);
                        }
                        accepted
                    }
                    _ => true,
                };
                if accept {
                    graph.add_factor(factor)?;
                    stats.mag_accepted += 1;
                } else {
                    stats.mag_rejected += 1;
                }
            }
        }
        if tg.flow_velocity || tg.height {
            if let Some(f) = nearest(&log.flow, |f: &FlowSample| f.t, t_k, half) {
                if tg.flow_velocity {
                    graph.add_factor(Factor::flow_velocity(
                        key,
                        Vector2::new(f.vx, f.vy),
                        Matrix2::identity() / n.flow_velocity.powi(2),
                    )?)?;
                }
                if tg.height {
                    graph.add_factor(Factor::height(key, f.height, 1.0 / n.height.powi(2))?)?;
                }
            }
        }

        let report = optimize(&mut graph, &config.solver)?;
        stats.optimizations += 1;
        stats.total_iterations += report.iterations;
        if !report.converged() {
            stats.unconverged += 1;
        }
        stats.final_cost = report.final_cost;
        for removed in slide_window(&mut graph)? {
            finished.insert(removed, graph.fixed_states()[&removed]);
        }
    }
    for (k, s) in graph.states() {
        finished.insert(*k, *s);
    }
    stats.keyframes = schedule.len();
    let trajectory = finished
        .into_iter()
        .map(|(key, state)| KeyframeEstimate {
            key,
            t: schedule[key.0].0,
            state,
        })
        .collect();
    Ok(EstimatorOutput {
        trajectory,
        gating,
        stats,
    })
}
