//! Trajectory association, alignment and absolute position error.

use std::fmt;
use std::str::FromStr;

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::geom::{Pose3, Rotation3};
use crate::scalar::{lit, Real};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum EvalError {
    #[error("{0} trajectory is empty")]
    Empty(&'static str),
    #[error("{0} trajectory is not sorted by time")]
    Unsorted(&'static str),
    #[error("no estimate lies within {max_dt} s of a truth sample")]
    NoOverlap { max_dt: f64 },
    #[error("degenerate alignment: {0}")]
    Degenerate(String),
    #[error("unknown alignment mode `{0}` (expected none, first-pose or full-se3)")]
    UnknownMode(String),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StampedPose<T: Real> {
    pub t: T,
    pub pose: Pose3<T>,
}

impl<T: Real> StampedPose<T> {
    pub fn new(t: T, pose: Pose3<T>) -> Self {
        Self { t, pose }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PosePair<T: Real> {
    /// Estimate timestamp.
    pub t: T,
    /// Truth time minus estimate time.
    pub dt: T,
    pub estimate: Pose3<T>,
    pub truth: Pose3<T>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AlignMode {
    None,
    #[default]
    FirstPose,
    FullSe3,
}

impl FromStr for AlignMode {
    type Err = EvalError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "none" => Ok(Self::None),
            "first-pose" => Ok(Self::FirstPose),
            "full-se3" => Ok(Self::FullSe3),
            other => Err(EvalError::UnknownMode(other.to_string())),
        }
    }
}

impl fmt::Display for AlignMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::None => "none",
            Self::FirstPose => "first-pose",
            Self::FullSe3 => "full-se3",
        })
    }
}

fn check_sorted<T: Real>(poses: &[StampedPose<T>], name: &'static str) -> Result<(), EvalError> {
    if poses.is_empty() {
        return Err(EvalError::Empty(name));
    }
    if poses.windows(2).any(|w| w[1].t < w[0].t) {
        return Err(EvalError::Unsorted(name));
    }
    Ok(())
}

/// Pairs every estimate with its nearest unused truth sample. Pairs further
/// apart than `max_dt` are dropped; truth is consumed in time order, so each
/// truth pose appears at most once.
pub fn associate<T: Real>(
    estimate: &[StampedPose<T>],
    truth: &[StampedPose<T>],
    max_dt: T,
) -> Result<Vec<PosePair<T>>, EvalError> {
    check_sorted(estimate, "estimate")?;
    check_sorted(truth, "truth")?;
    let mut pairs = Vec::new();
    let mut next = 0;
    for e in estimate {
        if next >= truth.len() {
            break;
        }
        let rest = &truth[next..];
        let at = rest.partition_point(|s| s.t < e.t);
        let best = [at.checked_sub(1), Some(at)]
            .into_iter()
            .flatten()
            .filter(|&i| i < rest.len())
            .min_by(|&a, &b| {
                let da = (rest[a].t - e.t).abs();
                let db = (rest[b].t - e.t).abs();
                da.partial_cmp(&db).expect("finite timestamps")
            });
        if let Some(i) = best {
            let s = &rest[i];
            if (s.t - e.t).abs() <= max_dt {
                pairs.push(PosePair {
                    t: e.t,
                    dt: s.t - e.t,
                    estimate: e.pose,
                    truth: s.pose,
                });
                next += i + 1;
            }
        }
    }
    if pairs.is_empty() {
        return Err(EvalError::NoOverlap {
            max_dt: max_dt.to_f64().unwrap_or(f64::NAN),
        });
    }
    Ok(pairs)
}

/// Transform `T` applied to the estimate so that `T · estimate ≈ truth`.
pub fn align<T: Real>(pairs: &[PosePair<T>], mode: AlignMode) -> Result<Pose3<T>, EvalError> {
    let first = pairs.first().ok_or(EvalError::Empty("pair"))?;
    match mode {
        AlignMode::None => Ok(Pose3::identity()),
        AlignMode::FirstPose => Ok(first.truth.compose(&first.estimate.inverse())),
        AlignMode::FullSe3 => umeyama(pairs),
    }
}

/// Closed-form rigid alignment without scale.
fn umeyama<T: Real>(pairs: &[PosePair<T>]) -> Result<Pose3<T>, EvalError> {
    if pairs.len() < 3 {
        return Err(EvalError::Degenerate(format!("{} pairs, need at least 3", pairs.len())));
    }
    let n: T = lit(pairs.len() as f64);
    let mut mu_e = Vector3::zeros();
    let mut mu_t = Vector3::zeros();
    for p in pairs {
        mu_e += p.estimate.translation;
        mu_t += p.truth.translation;
    }
    mu_e /= n;
    mu_t /= n;
    let mut cross = Matrix3::zeros();
    let mut spread = Matrix3::zeros();
    for p in pairs {
        let de = p.estimate.translation - mu_e;
        let dt = p.truth.translation - mu_t;
        cross += dt * de.transpose();
        spread += de * de.transpose();
    }
    let spread_sv = spread.symmetric_eigenvalues();
    let (mut lo, mut hi) = (spread_sv[0], spread_sv[0]);
    for &v in spread_sv.iter() {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    let mid = spread_sv.iter().copied().fold(T::zero(), |a, b| a + b) - lo - hi;
    if hi <= T::zero() || mid <= hi * lit(1e-12) {
        return Err(EvalError::Degenerate("estimate positions are collinear".into()));
    }
    let svd = cross.svd(true, true);
    let u = svd.u.expect("requested U");
    let v_t = svd.v_t.expect("requested Vᵀ");
    let mut s = Matrix3::identity();
    if (u * v_t).determinant() < T::zero() {
        s[(2, 2)] = -T::one();
    }
    let rotation = Rotation3::from_matrix(&(u * s * v_t));
    let translation = mu_t - rotation.rotate(&mu_e);
    Ok(Pose3::new(rotation, translation))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ErrorSample<T: Real> {
    pub t: T,
    pub ex: T,
    pub ey: T,
    pub ez: T,
    pub e3d: T,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ErrorReport<T: Real> {
    pub ate_rmse: T,
    pub rmse_x: T,
    pub rmse_y: T,
    pub rmse_z: T,
    /// RMS of the aligned rotation error angle, rad.
    pub rotation_rmse: T,
    pub series: Vec<ErrorSample<T>>,
    pub alignment: Pose3<T>,
    /// Length of the truth polyline through the paired samples.
    pub length: T,
}

impl<T: Real> ErrorReport<T> {
    pub fn max_error(&self) -> T {
        self.series.iter().fold(T::zero(), |m, s| m.max(s.e3d))
    }
}

/// Position errors `truth − alignment · estimate` and their RMS statistics.
pub fn compute_errors<T: Real>(pairs: &[PosePair<T>], alignment: &Pose3<T>) -> Result<ErrorReport<T>, EvalError> {
    if pairs.is_empty() {
        return Err(EvalError::Empty("pair"));
    }
    let mut series = Vec::with_capacity(pairs.len());
    let mut sq = Vector3::<T>::zeros();
    let mut rot_sq = T::zero();
    let mut length = T::zero();
    for (i, p) in pairs.iter().enumerate() {
        let aligned = alignment.compose(&p.estimate);
        let e = p.truth.translation - aligned.translation;
        sq += e.component_mul(&e);
        rot_sq += (aligned.rotation.inverse() * p.truth.rotation).angle().powi(2);
        if i > 0 {
            length += (p.truth.translation - pairs[i - 1].truth.translation).norm();
        }
        series.push(ErrorSample {
            t: p.t,
            ex: e.x,
            ey: e.y,
            ez: e.z,
            e3d: e.norm(),
        });
    }
    let n: T = lit(pairs.len() as f64);
    let mean = sq / n;
    Ok(ErrorReport {
        ate_rmse: (mean.x + mean.y + mean.z).sqrt(),
        rmse_x: mean.x.sqrt(),
        rmse_y: mean.y.sqrt(),
        rmse_z: mean.z.sqrt(),
        rotation_rmse: (rot_sq / n).sqrt(),
        series,
        alignment: *alignment,
        length,
    })
}

/// Associate, align and score in one call.
pub fn evaluate<T: Real>(
    estimate: &[StampedPose<T>],
    truth: &[StampedPose<T>],
    max_dt: T,
    mode: AlignMode,
) -> Result<ErrorReport<T>, EvalError> {
    let pairs = associate(estimate, truth, max_dt)?;
    let alignment = align(&pairs, mode)?;
    compute_errors(&pairs, &alignment)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn helix(n: usize, dt: f64) -> Vec<StampedPose<f64>> {
        (0..n)
            .map(|i| {
                let t = i as f64 * dt;
                let p = Vector3::new(5.0 * (0.3 * t).cos(), 5.0 * (0.3 * t).sin(), 0.2 * t);
                StampedPose::new(t, Pose3::new(Rotation3::from_euler_zyx(0.3 * t, 0.0, 0.0), p))
            })
            .collect()
    }

    fn transformed(poses: &[StampedPose<f64>], tf: &Pose3<f64>) -> Vec<StampedPose<f64>> {
        poses.iter().map(|s| StampedPose::new(s.t, tf.compose(&s.pose))).collect()
    }

    #[test]
    fn identical_stamps_pair_exactly() {
        let truth = helix(50, 0.2);
        let pairs = associate(&truth, &truth, 1e-3).unwrap();
        assert_eq!(pairs.len(), 50);
        assert!(pairs.iter().all(|p| p.dt == 0.0));
    }

    #[test]
    fn sparse_estimate_pairs_against_dense_truth() {
        let truth = helix(2001, 0.005);
        let est: Vec<_> = truth.iter().step_by(40).copied().collect();
        let pairs = associate(&est, &truth, 0.01).unwrap();
        assert_eq!(pairs.len(), est.len());
    }

    #[test]
    fn truth_is_used_once() {
        let truth = helix(3, 1.0);
        let est: Vec<_> = [0.0, 0.1, 0.2].iter().map(|&t| StampedPose::new(t, Pose3::identity())).collect();
        let pairs = associate(&est, &truth, 0.5).unwrap();
        assert_eq!(pairs.len(), 1);
    }

    #[test]
    fn disjoint_ranges_do_not_overlap() {
        let truth = helix(10, 0.1);
        let est: Vec<_> = truth.iter().map(|s| StampedPose::new(s.t + 100.0, s.pose)).collect();
        assert!(matches!(associate(&est, &truth, 0.01), Err(EvalError::NoOverlap { .. })));
        assert!(matches!(associate(&[], &truth, 0.01), Err(EvalError::Empty("estimate"))));
    }

    #[test]
    fn identity_alignment_for_equal_trajectories() {
        let truth = helix(40, 0.25);
        let pairs = associate(&truth, &truth, 1e-3).unwrap();
        for mode in [AlignMode::None, AlignMode::FirstPose, AlignMode::FullSe3] {
            let tf = align(&pairs, mode).unwrap();
            assert!(tf.local(&Pose3::identity()).norm() < 1e-9, "{mode}");
            assert_eq!(compute_errors(&pairs, &tf).unwrap().ate_rmse < 1e-9, true);
        }
    }

    #[test]
    fn translated_estimate_recovers_inverse_offset() {
        let truth = helix(40, 0.25);
        let est = transformed(&truth, &Pose3::from_translation(Vector3::new(1.0, 2.0, 3.0)));
        let pairs = associate(&est, &truth, 1e-3).unwrap();
        for mode in [AlignMode::FirstPose, AlignMode::FullSe3] {
            let tf = align(&pairs, mode).unwrap();
            assert!((tf.translation - Vector3::new(-1.0, -2.0, -3.0)).norm() < 1e-9);
            assert!(tf.rotation.angle() < 1e-9);
        }
    }

    #[test]
    fn full_alignment_recovers_rotation() {
        let truth = helix(60, 0.25);
        let rot = Pose3::new(Rotation3::exp(&Vector3::new(0.0, 0.0, 30f64.to_radians())), Vector3::zeros());
        let est = transformed(&truth, &rot);
        let pairs = associate(&est, &truth, 1e-3).unwrap();
        let tf = align(&pairs, AlignMode::FullSe3).unwrap();
        assert!(tf.compose(&rot).local(&Pose3::identity()).norm() < 1e-9);
    }

    #[test]
    fn collinear_points_are_degenerate() {
        let line: Vec<_> = (0..10)
            .map(|i| StampedPose::new(i as f64, Pose3::from_translation(Vector3::new(i as f64, 0.0, 0.0))))
            .collect();
        let pairs = associate(&line, &line, 1e-3).unwrap();
        assert!(matches!(align(&pairs, AlignMode::FullSe3), Err(EvalError::Degenerate(_))));
        assert!(matches!(align(&pairs[..2], AlignMode::FullSe3), Err(EvalError::Degenerate(_))));
    }

    #[test]
    fn constant_vertical_offset() {
        let truth = helix(30, 0.25);
        let est = transformed(&truth, &Pose3::from_translation(Vector3::new(0.0, 0.0, -1.0)));
        let pairs = associate(&est, &truth, 1e-3).unwrap();
        let r = compute_errors(&pairs, &align(&pairs, AlignMode::None).unwrap()).unwrap();
        assert_abs_diff_eq!(r.rmse_z, 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(r.rmse_x, 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(r.rmse_y, 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(r.ate_rmse, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn half_unit_errors() {
        let truth = helix(20, 0.25);
        let est: Vec<_> = truth
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let shift = if i % 2 == 0 { -1.0 } else { 0.0 };
                StampedPose::new(s.t, Pose3::new(s.pose.rotation, s.pose.translation + Vector3::new(shift, 0.0, 0.0)))
            })
            .collect();
        let pairs = associate(&est, &truth, 1e-3).unwrap();
        let r = compute_errors(&pairs, &Pose3::identity()).unwrap();
        assert_abs_diff_eq!(r.ate_rmse, 0.5f64.sqrt(), epsilon = 1e-12);
        assert_abs_diff_eq!(r.series[0].ex, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn truth_length_follows_polyline() {
        let line: Vec<_> = (0..11)
            .map(|i| StampedPose::new(i as f64, Pose3::from_translation(Vector3::new(0.0, 2.0 * i as f64, 0.0))))
            .collect();
        let r = evaluate(&line, &line, 1e-3, AlignMode::FirstPose).unwrap();
        assert_abs_diff_eq!(r.length, 20.0, epsilon = 1e-12);
    }

    #[test]
    fn modes_parse_and_print() {
        for mode in [AlignMode::None, AlignMode::FirstPose, AlignMode::FullSe3] {
            assert_eq!(mode.to_string().parse::<AlignMode>().unwrap(), mode);
        }
        assert!("umeyama".parse::<AlignMode>().is_err());
    }
}
