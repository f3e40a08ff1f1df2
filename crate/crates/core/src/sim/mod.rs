//! Deterministic scenario simulator: ground-truth trajectories and synthetic
//! sensor streams, plus a Malus-law polarization scene generator.

mod path;
mod polar;
mod sensors;

use std::f64::consts::PI;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geom::{NavState, Pose3, Rotation3};
use crate::preintegration::ImuSample;

pub use path::{PathPoint, SplinePath};
pub use polar::{malus_planes, synthesize_polar_scene, PolarRegion, PolarScene, PolarValue};
pub use sensors::{synthesize_sensors, Stream};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("degenerate path: {0}")]
    DegeneratePath(String),
    #[error("invalid scenario: {0}")]
    InvalidScenario(String),
    #[error("invalid polarization region {index}: {reason}")]
    InvalidRegion { index: usize, reason: String },
}

/// Sensor affected by a degradation window.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DegradedSensor {
    Lidar,
    Vio,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DegradationWindow {
    pub start: f64,
    pub end: f64,
    pub sensor: DegradedSensor,
}

impl DegradationWindow {
    pub fn contains(&self, t: f64) -> bool {
        t >= self.start && t <= self.end
    }
}

/// Trajectory shape.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum PathSpec {
    /// Spline through explicit waypoints `[x, y, z]`.
    Waypoints { points: Vec<[f64; 3]>, speed: f64 },
    /// Alternating legs of equal length, `angle_deg` off the x axis.
    Zigzag {
        legs: usize,
        leg_length: f64,
        #[serde(default = "default_zigzag_angle")]
        angle_deg: f64,
        speed: f64,
        #[serde(default)]
        height: f64,
    },
    /// Repeated laps of a circle starting at the origin.
    Loop {
        radius: f64,
        laps: f64,
        speed: f64,
        #[serde(default)]
        height: f64,
    },
    /// Repeated laps of a lemniscate through the origin.
    FigureEight {
        radius: f64,
        laps: f64,
        speed: f64,
        #[serde(default)]
        height: f64,
    },
}

fn default_zigzag_angle() -> f64 {
    20.0
}

const SAMPLES_PER_LAP: usize = 24;
/// Waypoints per zigzag leg; keeps the spline close to the straight legs.
const ZIGZAG_SUBDIVISIONS: usize = 4;

impl PathSpec {
    pub fn speed(&self) -> f64 {
        match self {
            Self::Waypoints { speed, .. }
            | Self::Zigzag { speed, .. }
            | Self::Loop { speed, .. }
            | Self::FigureEight { speed, .. } => *speed,
        }
    }

    pub fn waypoints(&self) -> Vec<Vector3<f64>> {
        match self {
            Self::Waypoints { points, .. } => points.iter().map(|p| Vector3::new(p[0], p[1], p[2])).collect(),
            Self::Zigzag {
                legs,
                leg_length,
                angle_deg,
                height,
                ..
            } => {
                let a = angle_deg.to_radians();
                let mut p = Vector3::new(0.0, 0.0, *height);
                let mut out = vec![p];
                for i in 0..*legs {
                    let side = if i % 2 == 0 { 1.0 } else { -1.0 };
                    let step = Vector3::new(a.cos(), side * a.sin(), 0.0) * (*leg_length / ZIGZAG_SUBDIVISIONS as f64);
                    for _ in 0..ZIGZAG_SUBDIVISIONS {
                        p += step;
                        out.push(p);
                    }
                }
                out
            }
            Self::Loop {
                radius, laps, height, ..
            } => lap_points(*laps, |s| {
                Vector3::new(radius * s.sin(), radius * (1.0 - s.cos()), *height)
            }),
            Self::FigureEight {
                radius, laps, height, ..
            } => lap_points(*laps, |s| {
                Vector3::new(radius * s.sin(), radius * s.sin() * s.cos(), *height)
            }),
        }
    }
}

fn lap_points(laps: f64, f: impl Fn(f64) -> Vector3<f64>) -> Vec<Vector3<f64>> {
    let n = (laps * SAMPLES_PER_LAP as f64).round() as usize;
    (0..=n)
        .map(|i| f(2.0 * PI * i as f64 / SAMPLES_PER_LAP as f64))
        .collect()
}

/// Sensor noise, bias and outlier parameters. IMU densities are per √Hz,
/// bias walks per √s.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SensorNoise {
    pub gyro_density: f64,
    pub accel_density: f64,
    pub gyro_bias_walk: f64,
    pub accel_bias_walk: f64,
    pub initial_gyro_bias: [f64; 3],
    pub initial_accel_bias: [f64; 3],
    pub mag_sigma: f64,
    pub mag_outlier_probability: f64,
    /// Smallest heading offset of an outlier, rad; offsets are uniform up to π.
    pub mag_outlier_magnitude: f64,
    pub flow_sigma: f64,
    pub height_sigma: f64,
    pub lidar_trans_sigma: f64,
    pub lidar_rot_sigma: f64,
    /// Vertical drift added to lidar odometry per metre travelled.
    pub lidar_z_drift: f64,
    pub vio_trans_sigma: f64,
    pub vio_rot_sigma: f64,
    pub loop_trans_sigma: f64,
    pub loop_rot_sigma: f64,
}

impl Default for SensorNoise {
    fn default() -> Self {
        Self {
            gyro_density: 1e-3,
            accel_density: 1e-2,
            gyro_bias_walk: 1e-4,
            accel_bias_walk: 1e-3,
            initial_gyro_bias: [0.0; 3],
            initial_accel_bias: [0.0; 3],
            mag_sigma: 0.02,
            mag_outlier_probability: 0.0,
            mag_outlier_magnitude: 1.0,
            flow_sigma: 0.05,
            height_sigma: 0.05,
            lidar_trans_sigma: 0.02,
            lidar_rot_sigma: 2e-3,
            lidar_z_drift: 0.0,
            vio_trans_sigma: 0.04,
            vio_rot_sigma: 4e-3,
            loop_trans_sigma: 0.1,
            loop_rot_sigma: 0.01,
        }
    }
}

impl SensorNoise {
    /// Every noise, bias, outlier and drift term set to zero.
    pub fn noiseless() -> Self {
        Self {
            gyro_density: 0.0,
            accel_density: 0.0,
            gyro_bias_walk: 0.0,
            accel_bias_walk: 0.0,
            initial_gyro_bias: [0.0; 3],
            initial_accel_bias: [0.0; 3],
            mag_sigma: 0.0,
            mag_outlier_probability: 0.0,
            mag_outlier_magnitude: 1.0,
            flow_sigma: 0.0,
            height_sigma: 0.0,
            lidar_trans_sigma: 0.0,
            lidar_rot_sigma: 0.0,
            lidar_z_drift: 0.0,
            vio_trans_sigma: 0.0,
            vio_rot_sigma: 0.0,
            loop_trans_sigma: 0.0,
            loop_rot_sigma: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub seed: u64,
    /// Seconds; defaults to the time needed to traverse the path once.
    #[serde(default)]
    pub duration: Option<f64>,
    pub path: PathSpec,
    #[serde(default = "default_imu_rate")]
    pub imu_rate: f64,
    #[serde(default = "default_keyframe_rate")]
    pub keyframe_rate: f64,
    #[serde(default = "default_aux_rate")]
    pub mag_rate: f64,
    #[serde(default = "default_aux_rate")]
    pub flow_rate: f64,
    #[serde(default = "default_gravity")]
    pub gravity: f64,
    #[serde(default)]
    pub noise: SensorNoise,
    #[serde(default)]
    pub degradation: Vec<DegradationWindow>,
    /// Emit large random relative poses inside degradation windows instead of nothing.
    #[serde(default)]
    pub corrupt_degraded: bool,
    #[serde(default = "default_loop_radius")]
    pub loop_radius: f64,
    #[serde(default = "default_loop_min_age")]
    pub loop_min_age: f64,
}

fn default_imu_rate() -> f64 {
    200.0
}
fn default_keyframe_rate() -> f64 {
    5.0
}
fn default_aux_rate() -> f64 {
    10.0
}
fn default_gravity() -> f64 {
    9.81
}
fn default_loop_radius() -> f64 {
    2.0
}
fn default_loop_min_age() -> f64 {
    30.0
}

impl Scenario {
    pub fn new(seed: u64, path: PathSpec) -> Self {
        Self {
            seed,
            duration: None,
            path,
            imu_rate: default_imu_rate(),
            keyframe_rate: default_keyframe_rate(),
            mag_rate: default_aux_rate(),
            flow_rate: default_aux_rate(),
            gravity: default_gravity(),
            noise: SensorNoise::default(),
            degradation: Vec::new(),
            corrupt_degraded: false,
            loop_radius: default_loop_radius(),
            loop_min_age: default_loop_min_age(),
        }
    }

    /// Spline through the path waypoints.
    pub fn spline(&self) -> Result<SplinePath, SimError> {
        SplinePath::new(&self.path.waypoints())
    }

    /// Duration in seconds: the explicit value or one traversal of the path.
    pub fn resolved_duration(&self) -> Result<f64, SimError> {
        match self.duration {
            Some(d) => Ok(d),
            None => {
                let speed = self.path.speed();
                if speed <= 0.0 {
                    return Err(SimError::InvalidScenario(
                        "duration is required when the path speed is zero".into(),
                    ));
                }
                Ok(self.spline()?.length() / speed)
            }
        }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: String| Err(SimError::InvalidScenario(m));
        let duration = self.resolved_duration()?;
        if !(duration > 0.0) || !duration.is_finite() {
            return bad(format!("duration must be positive, got {duration}"));
        }
        let speed = self.path.speed();
        if !(speed >= 0.0) {
            return bad("speed must be non-negative".into());
        }
        if speed > 0.0 {
            let traverse = self.spline()?.length() / speed;
            if duration > traverse + 1.0 / self.imu_rate {
                return bad(format!(
                    "duration {duration} exceeds the {traverse:.3} s needed to traverse the path"
                ));
            }
        }
        for (name, rate) in [
            ("imu_rate", self.imu_rate),
            ("keyframe_rate", self.keyframe_rate),
            ("mag_rate", self.mag_rate),
            ("flow_rate", self.flow_rate),
        ] {
            if !(rate > 0.0) || !rate.is_finite() {
                return bad(format!("{name} must be positive"));
            }
        }
        let ratio = self.imu_rate / self.keyframe_rate;
        if (ratio - ratio.round()).abs() > 1e-9 || ratio < 1.0 {
            return bad("imu_rate must be an integer multiple of keyframe_rate".into());
        }
        let p = self.noise.mag_outlier_probability;
        if !(0.0..=1.0).contains(&p) {
            return bad(format!("mag_outlier_probability must lie in [0, 1], got {p}"));
        }
        if !(0.0..=PI).contains(&self.noise.mag_outlier_magnitude) {
            return bad("mag_outlier_magnitude must lie in [0, π]".into());
        }
        for w in &self.degradation {
            if !(w.start >= 0.0 && w.start <= w.end && w.end <= duration) {
                return bad(format!(
                    "degradation window [{}, {}] must lie within [0, {duration}]",
                    w.start, w.end
                ));
            }
        }
        if let PathSpec::Zigzag { legs: 0, .. } = self.path {
            return bad("zigzag needs at least one leg".into());
        }
        self.spline()?;
        Ok(())
    }
}

/// Ground truth at one IMU instant.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TruthSample {
    pub t: f64,
    pub state: NavState<f64>,
    /// Bias-free body specific force, m/s².
    pub specific_force: Vector3<f64>,
    /// Bias-free body angular rate, rad/s.
    pub angular_rate: Vector3<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MagSample {
    pub t: f64,
    pub heading: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FlowSample {
    pub t: f64,
    /// Body-frame planar velocity, m/s.
    pub vx: f64,
    pub vy: f64,
    pub height: f64,
}

/// Relative pose `T_from⁻¹ · T_to` between two keyframe instants.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OdomSample {
    pub t_from: f64,
    pub t_to: f64,
    pub relative: Pose3<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SensorLog {
    pub truth: Vec<TruthSample>,
    pub imu: Vec<ImuSample<f64>>,
    pub mag: Vec<MagSample>,
    pub flow: Vec<FlowSample>,
    pub lidar: Vec<OdomSample>,
    pub vio: Vec<OdomSample>,
    pub loops: Vec<OdomSample>,
}

/// Samples the spline trajectory at the IMU rate, moving at constant speed
/// along the path with yaw following the direction of travel.
///
/// The spline fixes the ideal body rates and specific forces; the stored
/// states are their midpoint-rule integral from the initial spline state, so
/// a noise-free IMU stream is exactly consistent with the truth.
pub fn generate_truth(scenario: &Scenario) -> Result<Vec<TruthSample>, SimError> {
    scenario.validate()?;
    let spline = scenario.spline()?;
    let duration = scenario.resolved_duration()?;
    let speed = scenario.path.speed();
    let dt = 1.0 / scenario.imu_rate;
    let count = (duration * scenario.imu_rate + 1e-9).floor() as usize + 1;
    let end = spline.end();
    let gravity = Vector3::new(0.0, 0.0, -scenario.gravity);

    // du/dt = speed / |p'(u)|
    let rate = |u: f64| -> f64 {
        let n = spline.eval(u).d1.norm();
        if n > 0.0 {
            speed / n
        } else {
            0.0
        }
    };
    const SUBSTEPS: usize = 4;
    let h = dt / SUBSTEPS as f64;
    let mut u = 0.0_f64;
    let mut out: Vec<TruthSample> = Vec::with_capacity(count);
    for k in 0..count {
        let t = k as f64 * dt;
        let ideal = spline_kinematics(&spline, u, rate(u), speed, gravity);
        let state = match out.last() {
            None => ideal.state,
            Some(prev) => integrate_step(prev, &ideal, dt, gravity),
        };
        out.push(TruthSample { t, state, ..ideal });
        for _ in 0..SUBSTEPS {
            let k1 = rate(u);
            let k2 = rate(u + 0.5 * h * k1);
            let k3 = rate(u + 0.5 * h * k2);
            let k4 = rate(u + h * k3);
            u = (u + h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)).min(end);
        }
    }
    Ok(out)
}

/// Midpoint-rule step between two IMU instants.
fn integrate_step(prev: &TruthSample, next: &TruthSample, dt: f64, gravity: Vector3<f64>) -> NavState<f64> {
    let s = &prev.state;
    let omega = (prev.angular_rate + next.angular_rate) * 0.5;
    let r0 = s.pose.rotation;
    let r1 = r0 * Rotation3::exp(&(omega * dt));
    let a = (r0.rotate(&prev.specific_force) + r1.rotate(&next.specific_force)) * 0.5 + gravity;
    let position = s.pose.translation + s.velocity * dt + a * (0.5 * dt * dt);
    let mut state = NavState::from_pose(Pose3::new(r1, position));
    state.velocity = s.velocity + a * dt;
    state
}

fn spline_kinematics(spline: &SplinePath, u: f64, u_dot: f64, speed: f64, gravity: Vector3<f64>) -> TruthSample {
    let pt = spline.eval(u);
    let d1n2 = pt.d1.norm_squared();
    // ü from d/dt (speed / |p'|)
    let u_ddot = if d1n2 > 0.0 && u_dot > 0.0 {
        -speed * pt.d1.dot(&pt.d2) / d1n2.powf(1.5) * u_dot
    } else {
        0.0
    };
    let velocity = pt.d1 * u_dot;
    let acceleration = pt.d2 * u_dot * u_dot + pt.d1 * u_ddot;
    let planar = pt.d1.x * pt.d1.x + pt.d1.y * pt.d1.y;
    let (yaw, yaw_rate) = if planar > 1e-18 {
        let rate = u_dot * (pt.d1.x * pt.d2.y - pt.d1.y * pt.d2.x) / planar;
        (pt.d1.y.atan2(pt.d1.x), rate)
    } else {
        (0.0, 0.0)
    };
    let rotation = Rotation3::from_euler_zyx(yaw, 0.0, 0.0);
    let mut state = NavState::from_pose(Pose3::new(rotation, pt.position));
    state.velocity = velocity;
    TruthSample {
        t: 0.0,
        state,
        specific_force: rotation.inverse_rotate(&(acceleration - gravity)),
        angular_rate: Vector3::new(0.0, 0.0, yaw_rate),
    }
}

/// Ground truth followed by sensor synthesis.
pub fn simulate(scenario: &Scenario) -> Result<SensorLog, SimError> {
    let truth = generate_truth(scenario)?;
    Ok(synthesize_sensors(&truth, scenario))
}

/// Length of the truth polyline, m.
pub fn truth_length(truth: &[TruthSample]) -> f64 {
    truth
        .windows(2)
        .map(|w| (w[1].state.position() - w[0].state.position()).norm())
        .sum()
}
