//! Sliding-window LiDAR / polarization-vision / inertial / magnetometer /
//! optical-flow fusion, the polarimetric image pipeline, a deterministic
//! sensor simulator and trajectory evaluation.
//!
//! The geometry, preintegration, polarimetry and evaluation layers are
//! generic over the scalar type; the aliases below fix it to `f64` or `f32`.
//! The estimator and simulator run in `f64`.

pub mod eval;
pub mod fusion;
pub mod geom;
pub mod io;
pub mod polarimetry;
pub mod preintegration;
pub mod scalar;
pub mod sim;

pub use scalar::Real;

pub type Rotation3d = geom::Rotation3<f64>;
pub type Rotation3f = geom::Rotation3<f32>;
pub type Pose3d = geom::Pose3<f64>;
pub type Pose3f = geom::Pose3<f32>;
pub type NavStated = geom::NavState<f64>;
pub type NavStatef = geom::NavState<f32>;
pub type ImuSampled = preintegration::ImuSample<f64>;
pub type ImuSamplef = preintegration::ImuSample<f32>;
pub type ImuBiasd = preintegration::ImuBias<f64>;
pub type ImuBiasf = preintegration::ImuBias<f32>;
pub type PreintegratedDeltad = preintegration::PreintegratedDelta<f64>;
pub type PreintegratedDeltaf = preintegration::PreintegratedDelta<f32>;
pub type StampedPosed = eval::StampedPose<f64>;
pub type StampedPosef = eval::StampedPose<f32>;
pub type ErrorReportd = eval::ErrorReport<f64>;
pub type ErrorReportf = eval::ErrorReport<f32>;
