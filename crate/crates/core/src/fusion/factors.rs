//! Residuals and analytic Jacobians of every factor type.
//!
//! Residual sign convention is always "state minus measurement". Jacobians
//! are taken with respect to the 15-dim navigation tangent of each active
//! key (see [`crate::geom`] for the ordering and perturbation conventions).

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector, Matrix2, Matrix3, Matrix6, SMatrix, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use super::{FusionError, Key};
use crate::geom::{right_jacobian, right_jacobian_inv, skew, NavState, Pose3, BA, BG, NAV_DIM, POS, ROT, VEL};
use crate::preintegration::{bias_correct, ImuBias, PreintegratedDelta};
use crate::scalar::wrap_angle;

pub type Matrix15 = SMatrix<f64, NAV_DIM, NAV_DIM>;

/// Keyed states visible to a factor: `active` states are optimized, `fixed`
/// ones (already marginalized keyframes) are read as constants.
#[derive(Debug, Clone, Copy)]
pub struct StateView<'a> {
    pub active: &'a BTreeMap<Key, NavState<f64>>,
    pub fixed: &'a BTreeMap<Key, NavState<f64>>,
}

impl<'a> StateView<'a> {
    pub fn new(active: &'a BTreeMap<Key, NavState<f64>>, fixed: &'a BTreeMap<Key, NavState<f64>>) -> Self {
        Self { active, fixed }
    }

    fn get(&self, key: Key) -> Result<(&'a NavState<f64>, bool), FusionError> {
        if let Some(s) = self.active.get(&key) {
            Ok((s, true))
        } else if let Some(s) = self.fixed.get(&key) {
            Ok((s, false))
        } else {
            Err(FusionError::MissingKey(key))
        }
    }
}

/// Where a relative-pose measurement came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OdomSource {
    Lidar,
    Vio,
    Loop,
}

/// Random-walk densities of the IMU biases, per √s.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BiasWalk {
    pub accel_sigma: f64,
    pub gyro_sigma: f64,
}

impl Default for BiasWalk {
    fn default() -> Self {
        Self {
            accel_sigma: 1e-3,
            gyro_sigma: 1e-4,
        }
    }
}

/// Upper-triangular `Lᵀ` with `information = L Lᵀ`.
fn sqrt_information(info: &DMatrix<f64>) -> Result<DMatrix<f64>, FusionError> {
    let sym = (info + info.transpose()) * 0.5;
    if (&sym - info).amax() > 1e-9 * info.amax().max(1.0) {
        return Err(FusionError::NotPositiveDefinite);
    }
    let chol = nalgebra::Cholesky::new(sym).ok_or(FusionError::NotPositiveDefinite)?;
    Ok(chol.l().transpose())
}

#[derive(Debug, Clone, PartialEq)]
pub struct PriorFactor {
    pub key: Key,
    pub mean: NavState<f64>,
    pub information: Matrix15,
    sqrt_info: DMatrix<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImuFactor {
    pub from: Key,
    pub to: Key,
    pub delta: PreintegratedDelta<f64>,
    pub gravity: Vector3<f64>,
    pub bias_walk: BiasWalk,
    sqrt_info: DMatrix<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RelPoseFactor {
    pub from: Key,
    pub to: Key,
    /// `pose_from⁻¹ ∘ pose_to` as measured.
    pub measured: Pose3<f64>,
    /// Information of the `(rotation, translation)` residual.
    pub information: Matrix6<f64>,
    pub source: OdomSource,
    sqrt_info: DMatrix<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MagHeadingFactor {
    pub key: Key,
    pub heading: f64,
    pub information: f64,
    /// Innovation gate, rad.
    pub gate: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlowVelocityFactor {
    pub key: Key,
    /// Body-frame planar velocity `(vx, vy)`, m/s.
    pub measured: Vector2<f64>,
    pub information: Matrix2<f64>,
    sqrt_info: DMatrix<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeightFactor {
    pub key: Key,
    pub height: f64,
    pub information: f64,
}

/// A measurement constraint of the factor graph.
#[derive(Debug, Clone, PartialEq)]
pub enum Factor {
    Prior(PriorFactor),
    Imu(ImuFactor),
    RelPose(RelPoseFactor),
    MagHeading(MagHeadingFactor),
    FlowVelocity(FlowVelocityFactor),
    Height(HeightFactor),
}

/// Discriminant of [`Factor`], used for per-type settings.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FactorKind {
    Prior,
    Imu,
    RelPose,
    MagHeading,
    FlowVelocity,
    Height,
}

impl Factor {
    pub fn prior(key: Key, mean: NavState<f64>, information: Matrix15) -> Result<Self, FusionError> {
        let sqrt_info = sqrt_information(&DMatrix::from_column_slice(15, 15, information.as_slice()))?;
        Ok(Self::Prior(PriorFactor {
            key,
            mean,
            information,
            sqrt_info,
        }))
    }

    pub fn imu(
        from: Key,
        to: Key,
        delta: PreintegratedDelta<f64>,
        gravity: Vector3<f64>,
        bias_walk: BiasWalk,
    ) -> Result<Self, FusionError> {
        let mut cov = DMatrix::<f64>::zeros(15, 15);
        cov.view_mut((0, 0), (9, 9)).copy_from(&delta.covariance);
        for i in 0..3 {
            cov[(9 + i, 9 + i)] = bias_walk.accel_sigma.powi(2) * delta.dt;
            cov[(12 + i, 12 + i)] = bias_walk.gyro_sigma.powi(2) * delta.dt;
        }
        // keeps noise-free deltas invertible
        for i in 0..15 {
            cov[(i, i)] += 1e-14;
        }
        let cov = (&cov + cov.transpose()) * 0.5;
        let info = cov
            .cholesky()
            .ok_or(FusionError::NotPositiveDefinite)?
            .inverse();
        let sqrt_info = sqrt_information(&((&info + info.transpose()) * 0.5))?;
        Ok(Self::Imu(ImuFactor {
            from,
            to,
            delta,
            gravity,
            bias_walk,
            sqrt_info,
        }))
    }

    pub fn rel_pose(
        from: Key,
        to: Key,
        measured: Pose3<f64>,
        information: Matrix6<f64>,
        source: OdomSource,
    ) -> Result<Self, FusionError> {
        let sqrt_info = sqrt_information(&DMatrix::from_column_slice(6, 6, information.as_slice()))?;
        Ok(Self::RelPose(RelPoseFactor {
            from,
            to,
            measured,
            information,
            source,
            sqrt_info,
        }))
    }

    pub fn mag_heading(key: Key, heading: f64, information: f64, gate: f64) -> Result<Self, FusionError> {
        if !(information > 0.0) {
            return Err(FusionError::NotPositiveDefinite);
        }
        Ok(Self::MagHeading(MagHeadingFactor {
            key,
            heading,
            information,
            gate,
        }))
    }

    pub fn flow_velocity(key: Key, measured: Vector2<f64>, information: Matrix2<f64>) -> Result<Self, FusionError> {
        let sqrt_info = sqrt_information(&DMatrix::from_column_slice(2, 2, information.as_slice()))?;
        Ok(Self::FlowVelocity(FlowVelocityFactor {
            key,
            measured,
            information,
            sqrt_info,
        }))
    }

    pub fn height(key: Key, height: f64, information: f64) -> Result<Self, FusionError> {
        if !(information > 0.0) {
            return Err(FusionError::NotPositiveDefinite);
        }
        Ok(Self::Height(HeightFactor {
            key,
            height,
            information,
        }))
    }

    pub fn kind(&self) -> FactorKind {
        match self {
            Self::Prior(_) => FactorKind::Prior,
            Self::Imu(_) => FactorKind::Imu,
            Self::RelPose(_) => FactorKind::RelPose,
            Self::MagHeading(_) => FactorKind::MagHeading,
            Self::FlowVelocity(_) => FactorKind::FlowVelocity,
            Self::Height(_) => FactorKind::Height,
        }
    }

    /// Keys referenced by the factor.
    pub fn keys(&self) -> Vec<Key> {
        match self {
            Self::Prior(f) => vec![f.key],
            Self::Imu(f) => vec![f.from, f.to],
            Self::RelPose(f) => vec![f.from, f.to],
            Self::MagHeading(f) => vec![f.key],
            Self::FlowVelocity(f) => vec![f.key],
            Self::Height(f) => vec![f.key],
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            Self::Prior(_) | Self::Imu(_) => 15,
            Self::RelPose(_) => 6,
            Self::MagHeading(_) | Self::Height(_) => 1,
            Self::FlowVelocity(_) => 2,
        }
    }
}

/// Residual and Jacobians of one factor at a linearization point.
#[derive(Debug, Clone, PartialEq)]
pub struct Linearization {
    /// Residual before whitening.
    pub raw: DVector<f64>,
    /// Whitened residual `Lᵀ r`.
    pub residual: DVector<f64>,
    /// Whitened Jacobian blocks (rows = residual dim, 15 columns) per active key.
    pub jacobians: Vec<(Key, DMatrix<f64>)>,
}

impl Linearization {
    pub fn cost(&self) -> f64 {
        0.5 * self.residual.norm_squared()
    }
}

/// Unwhitened residual and per-key Jacobian blocks.
struct RawLin {
    r: DVector<f64>,
    blocks: Vec<(Key, bool, DMatrix<f64>)>,
}

fn put(block: &mut DMatrix<f64>, row: usize, col: usize, m: &Matrix3<f64>) {
    block.view_mut((row, col), (3, 3)).copy_from(m);
}

fn prior_raw(f: &PriorFactor, view: &StateView, jac: bool) -> Result<RawLin, FusionError> {
    let (s, active) = view.get(f.key)?;
    let r = s.local(&f.mean);
    if !jac {
        return Ok(RawLin {
            r: DVector::from_column_slice(r.as_slice()),
            blocks: Vec::new(),
        });
    }
    let mut j = DMatrix::<f64>::identity(15, 15);
    let rot = r.fixed_rows::<3>(ROT).into_owned();
    put(&mut j, ROT, ROT, &right_jacobian_inv(&rot));
    Ok(RawLin {
        r: DVector::from_column_slice(r.as_slice()),
        blocks: vec![(f.key, active, j)],
    })
}

fn imu_raw(f: &ImuFactor, view: &StateView, jac: bool) -> Result<RawLin, FusionError> {
    let (si, ai) = view.get(f.from)?;
    let (sj, aj) = view.get(f.to)?;
    let d = &f.delta;
    let dt = d.dt;
    let bias_i = ImuBias::of_state(si);
    let dbg = bias_i.gyro - d.bias.gyro;
    let c = bias_correct(d, &bias_i);

    let ri = si.pose.rotation;
    let rj = sj.pose.rotation;
    let ri_m = ri.matrix();
    let ri_t = ri_m.transpose();
    let e = c.delta_rot.inverse() * ri.inverse() * rj;
    let r_rot = e.log();
    let w = sj.velocity - si.velocity - f.gravity * dt;
    let u = sj.pose.translation - si.pose.translation - si.velocity * dt - f.gravity * (0.5 * dt * dt);
    let r_vel = ri_t * w - c.delta_vel;
    let r_pos = ri_t * u - c.delta_pos;
    let r_ba = sj.accel_bias - si.accel_bias;
    let r_bg = sj.gyro_bias - si.gyro_bias;

    let mut r = DVector::<f64>::zeros(15);
    for (o, v) in [(0, r_rot), (3, r_vel), (6, r_pos), (9, r_ba), (12, r_bg)] {
        r.fixed_rows_mut::<3>(o).copy_from(&v);
    }
    if !jac {
        return Ok(RawLin { r, blocks: Vec::new() });
    }

    let jr_inv = right_jacobian_inv(&r_rot);
    let mut ji = DMatrix::<f64>::zeros(15, 15);
    let mut jj = DMatrix::<f64>::zeros(15, 15);
    let rj_t_ri = rj.matrix().transpose() * ri_m;
    put(&mut ji, 0, ROT, &(-jr_inv * rj_t_ri));
    put(&mut jj, 0, ROT, &jr_inv);
    let jr_corr = right_jacobian(&(d.d_rot_d_bg * dbg));
    put(&mut ji, 0, BG, &(-jr_inv * e.matrix().transpose() * jr_corr * d.d_rot_d_bg));

    put(&mut ji, 3, ROT, &skew(&(ri_t * w)));
    put(&mut ji, 3, VEL, &-ri_t);
    put(&mut jj, 3, VEL, &ri_t);
    put(&mut ji, 3, BA, &-d.d_vel_d_ba);
    put(&mut ji, 3, BG, &-d.d_vel_d_bg);

    put(&mut ji, 6, ROT, &skew(&(ri_t * u)));
    put(&mut ji, 6, POS, &-ri_t);
    put(&mut jj, 6, POS, &ri_t);
    put(&mut ji, 6, VEL, &(-ri_t * dt));
    put(&mut ji, 6, BA, &-d.d_pos_d_ba);
    put(&mut ji, 6, BG, &-d.d_pos_d_bg);

    put(&mut ji, 9, BA, &-Matrix3::identity());
    put(&mut jj, 9, BA, &Matrix3::identity());
    put(&mut ji, 12, BG, &-Matrix3::identity());
    put(&mut jj, 12, BG, &Matrix3::identity());

    Ok(RawLin {
        r,
        blocks: vec![(f.from, ai, ji), (f.to, aj, jj)],
    })
}

fn rel_pose_raw(f: &RelPoseFactor, view: &StateView, jac: bool) -> Result<RawLin, FusionError> {
    let (si, ai) = view.get(f.from)?;
    let (sj, aj) = view.get(f.to)?;
    let (pi, pj) = (&si.pose, &sj.pose);
    let rel = pi.between(pj);
    let err = f.measured.between(&rel);
    let r_rot = err.rotation.log();
    let r_trans = err.translation;
    let mut r = DVector::<f64>::zeros(6);
    r.fixed_rows_mut::<3>(0).copy_from(&r_rot);
    r.fixed_rows_mut::<3>(3).copy_from(&r_trans);
    if !jac {
        return Ok(RawLin { r, blocks: Vec::new() });
    }

    let jr_inv = right_jacobian_inv(&r_rot);
    let ri_m = pi.rotation.matrix();
    let rj_m = pj.rotation.matrix();
    let rm_t = f.measured.rotation.matrix().transpose();
    let mut ji = DMatrix::<f64>::zeros(6, 15);
    let mut jj = DMatrix::<f64>::zeros(6, 15);
    put(&mut ji, 0, ROT, &(-jr_inv * rj_m.transpose() * ri_m));
    put(&mut jj, 0, ROT, &jr_inv);
    put(
        &mut ji,
        3,
        ROT,
        &(rm_t * skew(&(ri_m.transpose() * (pj.translation - pi.translation)))),
    );
    put(&mut ji, 3, POS, &(-rm_t * ri_m.transpose()));
    put(&mut jj, 3, POS, &(rm_t * ri_m.transpose()));
    Ok(RawLin {
        r,
        blocks: vec![(f.from, ai, ji), (f.to, aj, jj)],
    })
}

/// Signed heading innovation `wrap(yaw - measured)`.
pub fn heading_innovation(state: &NavState<f64>, heading: f64) -> Result<f64, FusionError> {
    Ok(wrap_angle(state.pose.rotation.yaw()? - heading))
}

fn mag_raw(f: &MagHeadingFactor, view: &StateView, jac: bool) -> Result<RawLin, FusionError> {
    let (s, active) = view.get(f.key)?;
    let r = heading_innovation(s, f.heading)?;
    if !jac {
        return Ok(RawLin {
            r: DVector::from_element(1, r),
            blocks: Vec::new(),
        });
    }
    let jy = s.pose.rotation.yaw_jacobian()?;
    let mut j = DMatrix::<f64>::zeros(1, 15);
    for k in 0..3 {
        j[(0, ROT + k)] = jy[k];
    }
    Ok(RawLin {
        r: DVector::from_element(1, r),
        blocks: vec![(f.key, active, j)],
    })
}

fn flow_raw(f: &FlowVelocityFactor, view: &StateView, jac: bool) -> Result<RawLin, FusionError> {
    let (s, active) = view.get(f.key)?;
    let r_m = s.pose.rotation.matrix();
    let body_v = r_m.transpose() * s.velocity;
    let r = DVector::from_column_slice(&[body_v.x - f.measured.x, body_v.y - f.measured.y]);
    if !jac {
        return Ok(RawLin { r, blocks: Vec::new() });
    }
    let d_rot = skew(&body_v);
    let d_vel = r_m.transpose();
    let mut j = DMatrix::<f64>::zeros(2, 15);
    for row in 0..2 {
        for k in 0..3 {
            j[(row, ROT + k)] = d_rot[(row, k)];
            j[(row, VEL + k)] = d_vel[(row, k)];
        }
    }
    Ok(RawLin {
        r,
        blocks: vec![(f.key, active, j)],
    })
}

fn height_raw(f: &HeightFactor, view: &StateView, jac: bool) -> Result<RawLin, FusionError> {
    let (s, active) = view.get(f.key)?;
    let r = DVector::from_element(1, s.pose.translation.z - f.height);
    if !jac {
        return Ok(RawLin { r, blocks: Vec::new() });
    }
    let mut j = DMatrix::<f64>::zeros(1, 15);
    j[(0, POS + 2)] = 1.0;
    Ok(RawLin {
        r,
        blocks: vec![(f.key, active, j)],
    })
}

/// Evaluates `factor` at the states in `view`.
///
/// Only active keys receive Jacobian blocks. Fails when a referenced key is
/// unknown or when a heading is requested at a gimbal-locked attitude.
pub fn residual_and_jacobian(factor: &Factor, view: &StateView) -> Result<Linearization, FusionError> {
    linearize(factor, view, true)
}

/// Whitened residual only; cheaper than [`residual_and_jacobian`] when the
/// Jacobians are not needed.
pub fn whitened_residual(factor: &Factor, view: &StateView) -> Result<DVector<f64>, FusionError> {
    Ok(linearize(factor, view, false)?.residual)
}

fn linearize(factor: &Factor, view: &StateView, jac: bool) -> Result<Linearization, FusionError> {
    let (raw, whitener): (RawLin, Whitener) = match factor {
        Factor::Prior(f) => (prior_raw(f, view, jac)?, Whitener::Matrix(&f.sqrt_info)),
        Factor::Imu(f) => (imu_raw(f, view, jac)?, Whitener::Matrix(&f.sqrt_info)),
        Factor::RelPose(f) => (rel_pose_raw(f, view, jac)?, Whitener::Matrix(&f.sqrt_info)),
        Factor::MagHeading(f) => (mag_raw(f, view, jac)?, Whitener::Scalar(f.information.sqrt())),
        Factor::FlowVelocity(f) => (flow_raw(f, view, jac)?, Whitener::Matrix(&f.sqrt_info)),
        Factor::Height(f) => (height_raw(f, view, jac)?, Whitener::Scalar(f.information.sqrt())),
    };
    let residual = whitener.apply_vec(&raw.r);
    let jacobians = raw
        .blocks
        .into_iter()
        .filter(|(_, active, _)| *active)
        .map(|(k, _, j)| (k, whitener.apply_mat(&j)))
        .collect();
    Ok(Linearization {
        raw: raw.r,
        residual,
        jacobians,
    })
}

enum Whitener<'a> {
    Matrix(&'a DMatrix<f64>),
    Scalar(f64),
}

impl Whitener<'_> {
    fn apply_vec(&self, r: &DVector<f64>) -> DVector<f64> {
        match self {
            Self::Matrix(l) => *l * r,
            Self::Scalar(s) => r * *s,
        }
    }

    fn apply_mat(&self, j: &DMatrix<f64>) -> DMatrix<f64> {
        match self {
            Self::Matrix(l) => sparse_product(l, j),
            Self::Scalar(s) => j * *s,
        }
    }
}

/// `a * b` for small matrices where `b` is mostly zero; avoids the overhead
/// of the general matrix product on these sizes.
pub(crate) fn sparse_product(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let (m, inner) = a.shape();
    let mut out = DMatrix::<f64>::zeros(m, b.ncols());
    let (a, bs) = (a.as_slice(), b.as_slice());
    for (c, dst) in out.as_mut_slice().chunks_exact_mut(m).enumerate() {
        for (k, &v) in bs[c * inner..(c + 1) * inner].iter().enumerate() {
            if v != 0.0 {
                for (o, x) in dst.iter_mut().zip(&a[k * m..(k + 1) * m]) {
                    *o += x * v;
                }
            }
        }
    }
    out
}

/// Outcome of the magnetometer innovation test.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GateDecision {
    Accept,
    Reject,
}

/// Accepts a heading factor iff `|wrap(yaw - measured)| <= gate` (closed
/// boundary). Returns the decision together with the innovation; degenerate
/// attitudes are rejected with a NaN innovation.
pub fn gate_heading(factor: &MagHeadingFactor, estimate: &NavState<f64>) -> (GateDecision, f64) {
    match heading_innovation(estimate, factor.heading) {
        Ok(innovation) if innovation.abs() <= factor.gate => (GateDecision::Accept, innovation),
        Ok(innovation) => (GateDecision::Reject, innovation),
        Err(_) => (GateDecision::Reject, f64::NAN),
    }
}

/// Diagonal 6x6 information from rotation and translation standard deviations.
pub fn pose_information(rot_sigma: f64, trans_sigma: f64) -> Matrix6<f64> {
    let mut m = Matrix6::zeros();
    for i in 0..3 {
        m[(i, i)] = 1.0 / (rot_sigma * rot_sigma);
        m[(i + 3, i + 3)] = 1.0 / (trans_sigma * trans_sigma);
    }
    m
}
