//! Residuals, analytic Jacobians and information matrices for the error
//! terms of the joint cost: stereo reprojection, inertial, sonar range and
//! pressure depth.
//!
//! Every function here is a pure evaluation over immutable inputs, so
//! residuals can be evaluated in parallel across factors. Jacobians are
//! stored per state block: a keyframe contributes a 6-dof pose block
//! (position + local rotation) and a 9-dof velocity/bias block, a landmark a
//! 3-dof block.

use crate::geometry::{skew, so3_right_jacobian_inv, ExtrinsicCalibration, RobotState};
use crate::imu::PreintegratedImu;
use nalgebra::{DMatrix, DVector, Matrix3, SMatrix, Vector2, Vector3};
use thiserror::Error;

pub type KeyframeId = u64;
pub type LandmarkId = u64;

/// Default reprojection noise, pixels.
pub const DEFAULT_PIXEL_SIGMA: f64 = 1.0;
/// Default pressure-depth noise, meters.
pub const DEFAULT_DEPTH_SIGMA: f64 = 0.01;
/// Seed standard deviation for the sonar conditional position covariance,
/// meters. Used until the estimator can supply a marginal covariance.
pub const SONAR_SEED_SIGMA: f64 = 0.1;
/// Model-error floor of the sonar range residual, meters: the visual patch
/// only approximates the ensonified surface (coplanarity, beam timing), so
/// the conditional variance never drops below this.
pub const SONAR_MODEL_SIGMA: f64 = 0.1;
/// Landmarks within this distance of the sonar return form its visual patch,
/// meters.
pub const SONAR_PATCH_RADIUS: f64 = 0.3;
/// A patch member whose implied range differs from the measurement by more
/// than this violates the same-distance assumption and is excluded, meters.
pub const SONAR_PATCH_CONSISTENCY: f64 = 0.03;

/// Identifies one optimization block of the window state.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum BlockKey {
    /// Keyframe position + attitude, 6 dof.
    Pose(KeyframeId),
    /// Keyframe velocity + gyro/accel bias, 9 dof.
    VelBias(KeyframeId),
    /// Landmark position, 3 dof.
    Landmark(LandmarkId),
}

impl BlockKey {
    pub fn dim(&self) -> usize {
        match self {
            BlockKey::Pose(_) => 6,
            BlockKey::VelBias(_) => 9,
            BlockKey::Landmark(_) => 3,
        }
    }
}

/// One evaluated factor: residual vector, Jacobian blocks keyed by the state
/// block they differentiate against, and the information (inverse
/// covariance) weighting the residual.
#[derive(Debug, Clone)]
pub struct FactorResidual {
    pub residual: DVector<f64>,
    pub jacobians: Vec<(BlockKey, DMatrix<f64>)>,
    pub information: DMatrix<f64>,
}

impl FactorResidual {
    /// `r^T P r`, the factor's contribution to the joint cost.
    pub fn squared_error(&self) -> f64 {
        (self.residual.transpose() * &self.information * &self.residual)[(0, 0)]
    }
}

#[derive(Debug, Error)]
pub enum FactorError {
    #[error("preintegral spans {pre_dt:.6} s but the keyframe gap is {gap:.6} s")]
    MismatchedInterval { pre_dt: f64, gap: f64 },
}

// ---------------------------------------------------------------------------
// Camera / landmark types
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CameraSide {
    Left,
    Right,
}

/// Pinhole intrinsics, pixels.
#[derive(Debug, Clone, Copy)]
pub struct PinholeIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl PinholeIntrinsics {
    /// Projects a camera-frame point; `None` when at or behind the optical
    /// center plane.
    pub fn project(&self, p_cam: &Vector3<f64>) -> Option<Vector2<f64>> {
        if p_cam.z <= 1e-6 {
            return None;
        }
        Some(Vector2::new(
            self.fx * p_cam.x / p_cam.z + self.cx,
            self.fy * p_cam.y / p_cam.z + self.cy,
        ))
    }

    /// Back-projects a pixel at the given depth along the ray.
    pub fn back_project(&self, px: &Vector2<f64>, depth: f64) -> Vector3<f64> {
        Vector3::new(
            (px.x - self.cx) * depth / self.fx,
            (px.y - self.cy) * depth / self.fy,
            depth,
        )
    }
}

/// Stereo rig intrinsics; the baseline lives in the extrinsic calibration
/// (`t_ic_left` / `t_ic_right`).
#[derive(Debug, Clone, Copy)]
pub struct StereoCameraModel {
    pub left: PinholeIntrinsics,
    pub right: PinholeIntrinsics,
    pub width: u32,
    pub height: u32,
}

impl StereoCameraModel {
    /// Identical intrinsics for both cameras.
    pub fn symmetric(fx: f64, fy: f64, cx: f64, cy: f64, width: u32, height: u32) -> Self {
        let pin = PinholeIntrinsics { fx, fy, cx, cy };
        StereoCameraModel { left: pin, right: pin, width, height }
    }

    pub fn intrinsics(&self, side: CameraSide) -> &PinholeIntrinsics {
        match side {
            CameraSide::Left => &self.left,
            CameraSide::Right => &self.right,
        }
    }

    pub fn in_view(&self, px: &Vector2<f64>) -> bool {
        px.x >= 0.0 && px.y >= 0.0 && px.x < self.width as f64 && px.y < self.height as f64
    }

    /// Stereo baseline length implied by the extrinsics, meters.
    pub fn baseline(&self, calib: &ExtrinsicCalibration) -> f64 {
        (calib.t_ic_left.translation - calib.t_ic_right.translation).norm()
    }
}

/// A 3D map point.
#[derive(Debug, Clone, Copy)]
pub struct Landmark {
    pub id: LandmarkId,
    pub position: Vector3<f64>,
    /// Reserved for far points represented as pure directions; the simulator
    /// never sets it.
    pub homogeneous: bool,
}

impl Landmark {
    pub fn new(id: LandmarkId, position: Vector3<f64>) -> Self {
        Landmark { id, position, homogeneous: false }
    }
}

/// Single sonar return: range along the beam at the given head position.
#[derive(Debug, Clone, Copy)]
pub struct SonarMeasurement {
    /// Timestamp, seconds.
    pub t: f64,
    /// Range, meters (> 0).
    pub range: f64,
    /// Head position, radians in [0, 2*pi).
    pub head_angle: f64,
}

/// Raw pressure-sensor reading (increases with depth below the surface).
#[derive(Debug, Clone, Copy)]
pub struct DepthMeasurement {
    /// Timestamp, seconds.
    pub t: f64,
    /// Raw reading, meters, positive down.
    pub reading: f64,
}

// ---------------------------------------------------------------------------
// Reprojection
// ---------------------------------------------------------------------------

/// Stereo reprojection residual for one landmark observation.
///
/// Residual is `observed - projected` (2 pixels). Jacobians are emitted for
/// the keyframe pose block and the landmark block; the information matrix is
/// `I / sigma_px^2`. Returns `None` for landmarks at or behind the camera:
/// the factor is dropped rather than an error raised.
pub fn reprojection_residual(
    kf: KeyframeId,
    state: &RobotState,
    calib: &ExtrinsicCalibration,
    camera: &StereoCameraModel,
    side: CameraSide,
    landmark: &Landmark,
    observed_px: &Vector2<f64>,
    pixel_sigma: f64,
) -> Option<FactorResidual> {
    let t_ic = match side {
        CameraSide::Left => &calib.t_ic_left,
        CameraSide::Right => &calib.t_ic_right,
    };
    let r_wi = state.orientation.rotation_matrix();
    let r_iw = r_wi.transpose();
    let r_ci = t_ic.rotation.transpose();

    // Landmark in the IMU frame, then the camera frame.
    let p_imu = if landmark.homogeneous {
        r_iw * landmark.position
    } else {
        r_iw * (landmark.position - state.position)
    };
    let p_cam = r_ci * (p_imu - t_ic.translation);

    let intr = camera.intrinsics(side);
    let projected = intr.project(&p_cam)?;

    let z = p_cam.z;
    let z2 = z * z;
    // d(observed - projected) / d p_cam
    let dproj = -DMatrix::from_row_slice(
        2,
        3,
        &[
            intr.fx / z,
            0.0,
            -intr.fx * p_cam.x / z2,
            0.0,
            intr.fy / z,
            -intr.fy * p_cam.y / z2,
        ],
    );

    let r_cw = r_ci * r_iw;
    let mut j_pose = DMatrix::zeros(2, 6);
    let dp_block = if landmark.homogeneous {
        Matrix3::zeros()
    } else {
        -r_cw
    };
    j_pose.view_mut((0, 0), (2, 3)).copy_from(&(&dproj * DMatrix::from_iterator(3, 3, dp_block.iter().cloned())));
    let dtheta_block = r_ci * skew(&p_imu);
    j_pose
        .view_mut((0, 3), (2, 3))
        .copy_from(&(&dproj * DMatrix::from_iterator(3, 3, dtheta_block.iter().cloned())));

    let j_lm = &dproj * DMatrix::from_iterator(3, 3, r_cw.iter().cloned());

    let residual = DVector::from_column_slice(&[
        observed_px.x - projected.x,
        observed_px.y - projected.y,
    ]);
    let info = DMatrix::identity(2, 2) / (pixel_sigma * pixel_sigma);

    Some(FactorResidual {
        residual,
        jacobians: vec![(BlockKey::Pose(kf), j_pose), (BlockKey::Landmark(landmark.id), j_lm)],
        information: info,
    })
}

// ---------------------------------------------------------------------------
// IMU
// ---------------------------------------------------------------------------

/// Inertial residual between two keyframe states bracketing a preintegrated
/// interval.
///
/// 15 rows: position, attitude, velocity prediction errors followed by the
/// gyro/accel bias random-walk differences. The information matrix is the
/// inverse of the propagated preintegration covariance extended with the
/// bias-walk blocks. `gap` is the keyframe timestamp difference and must
/// match the preintegral's span.
pub fn imu_residual(
    kf_i: KeyframeId,
    kf_j: KeyframeId,
    state_i: &RobotState,
    state_j: &RobotState,
    pre: &PreintegratedImu,
    g_w: &Vector3<f64>,
    gap: f64,
) -> Result<FactorResidual, FactorError> {
    if (gap - pre.dt).abs() > 1e-6 {
        return Err(FactorError::MismatchedInterval { pre_dt: pre.dt, gap });
    }
    let dt = pre.dt;
    let r_i = state_i.orientation.rotation_matrix();
    let r_it = r_i.transpose();
    let r_j = state_j.orientation.rotation_matrix();

    let alpha_exp = r_it * (state_j.position - state_i.position - state_i.velocity * dt - 0.5 * g_w * dt * dt);
    let beta_exp = r_it * (state_j.velocity - state_i.velocity - g_w * dt);
    let r_p = alpha_exp - pre.alpha;
    let r_theta = crate::geometry::log_so3(
        &pre.gamma.conjugate().mul(&state_i.orientation.conjugate().mul(&state_j.orientation)),
    );
    let r_v = beta_exp - pre.beta;
    let r_bg = state_j.gyro_bias - state_i.gyro_bias;
    let r_ba = state_j.accel_bias - state_i.accel_bias;

    let mut residual = DVector::zeros(15);
    residual.fixed_rows_mut::<3>(0).copy_from(&r_p);
    residual.fixed_rows_mut::<3>(3).copy_from(&r_theta);
    residual.fixed_rows_mut::<3>(6).copy_from(&r_v);
    residual.fixed_rows_mut::<3>(9).copy_from(&r_bg);
    residual.fixed_rows_mut::<3>(12).copy_from(&r_ba);

    let jr_inv = so3_right_jacobian_inv(&r_theta);
    let rel = r_it * r_j; // attitude of j seen from i

    // Pose block of keyframe i: columns [dp_i, dtheta_i].
    let mut j_pose_i = DMatrix::zeros(15, 6);
    set3(&mut j_pose_i, 0, 0, &(-r_it));
    set3(&mut j_pose_i, 0, 3, &skew(&alpha_exp));
    set3(&mut j_pose_i, 3, 3, &(-(jr_inv * rel.transpose())));
    set3(&mut j_pose_i, 6, 3, &skew(&beta_exp));

    // Velocity/bias block of keyframe i: columns [dv_i, dbg_i, dba_i].
    let mut j_vb_i = DMatrix::zeros(15, 9);
    set3(&mut j_vb_i, 0, 0, &(-r_it * dt));
    set3(&mut j_vb_i, 6, 0, &(-r_it));
    set3(&mut j_vb_i, 9, 3, &(-Matrix3::identity()));
    set3(&mut j_vb_i, 12, 6, &(-Matrix3::identity()));

    let mut j_pose_j = DMatrix::zeros(15, 6);
    set3(&mut j_pose_j, 0, 0, &r_it);
    set3(&mut j_pose_j, 3, 3, &jr_inv);

    let mut j_vb_j = DMatrix::zeros(15, 9);
    set3(&mut j_vb_j, 6, 0, &r_it);
    set3(&mut j_vb_j, 9, 3, &Matrix3::identity());
    set3(&mut j_vb_j, 12, 6, &Matrix3::identity());

    let information = imu_information(pre);

    Ok(FactorResidual {
        residual,
        jacobians: vec![
            (BlockKey::Pose(kf_i), j_pose_i),
            (BlockKey::VelBias(kf_i), j_vb_i),
            (BlockKey::Pose(kf_j), j_pose_j),
            (BlockKey::VelBias(kf_j), j_vb_j),
        ],
        information,
    })
}

fn set3(m: &mut DMatrix<f64>, row: usize, col: usize, block: &Matrix3<f64>) {
    for r in 0..3 {
        for c in 0..3 {
            m[(row + r, col + c)] = block[(r, c)];
        }
    }
}

/// Builds the 15x15 information matrix from the preintegration covariance
/// (position/velocity/rotation order) and the bias random-walk densities.
fn imu_information(pre: &PreintegratedImu) -> DMatrix<f64> {
    // Residual row order is (p, theta, v); the preintegral covariance is
    // (alpha, beta, theta). Permute accordingly.
    let mut perm = SMatrix::<f64, 9, 9>::zeros();
    for k in 0..3 {
        perm[(k, k)] = 1.0; // p <- alpha
        perm[(3 + k, 6 + k)] = 1.0; // theta <- theta
        perm[(6 + k, 3 + k)] = 1.0; // v <- beta
    }
    let cov9 = perm * pre.covariance * perm.transpose();

    let dt = pre.dt.max(1e-9);
    let var_bg = pre.noise.sigma_bg * pre.noise.sigma_bg * dt;
    let var_ba = pre.noise.sigma_ba * pre.noise.sigma_ba * dt;

    let mut cov = DMatrix::zeros(15, 15);
    for r in 0..9 {
        for c in 0..9 {
            cov[(r, c)] = cov9[(r, c)];
        }
    }
    for k in 0..3 {
        cov[(9 + k, 9 + k)] = var_bg;
        cov[(12 + k, 12 + k)] = var_ba;
    }
    // A zero-length or perfectly certain preintegral would make the
    // covariance singular; the jitter keeps the inverse defined.
    let jitter = 1e-14 * (1.0 + cov.trace());
    for k in 0..15 {
        cov[(k, k)] += jitter;
    }
    let chol = cov.clone().cholesky().expect("preintegration covariance not PSD");
    let mut info = chol.inverse();
    // Symmetrize against round-off.
    info = 0.5 * (&info + info.transpose());
    info
}

// ---------------------------------------------------------------------------
// Sonar
// ---------------------------------------------------------------------------

/// World-frame point of a sonar return: the beam endpoint mapped through the
/// sonar and body mounts.
pub fn sonar_landmark(
    meas: &SonarMeasurement,
    state: &RobotState,
    calib: &ExtrinsicCalibration,
) -> Vector3<f64> {
    let in_sonar = Vector3::new(
        meas.range * meas.head_angle.cos(),
        meas.range * meas.head_angle.sin(),
        0.0,
    );
    state.pose().apply(&calib.t_is.apply(&in_sonar))
}

/// Sonar range residual against a patch of visual landmarks.
///
/// The patch is expected to contain landmarks within
/// [`SONAR_PATCH_RADIUS`] of the sonar return and approximately coplanar
/// with it; its centroid stands in for the ensonified surface. The residual
/// compares the robot-to-centroid distance with the measured range:
///
/// ```text
/// e = |centroid - p| - r
/// ```
///
/// so its position Jacobian is the unit vector from the centroid to the
/// robot. The information is derived from the conditional position
/// covariance `position_cov` (the current marginal covariance of the
/// keyframe position, or the seed value at start-up). Empty patches skip the
/// factor.
pub fn sonar_range_residual(
    kf: KeyframeId,
    state: &RobotState,
    meas: &SonarMeasurement,
    patch: &[Landmark],
    position_cov: &Matrix3<f64>,
) -> Option<FactorResidual> {
    if patch.is_empty() {
        return None;
    }
    let mut centroid = Vector3::zeros();
    for lm in patch {
        centroid += lm.position;
    }
    centroid /= patch.len() as f64;

    let diff = state.position - centroid;
    let dist = diff.norm();
    if dist < 1e-9 {
        return None;
    }
    let residual = DVector::from_element(1, dist - meas.range);

    let dir = diff / dist;
    let mut j_pose = DMatrix::zeros(1, 6);
    j_pose[(0, 0)] = dir.x;
    j_pose[(0, 1)] = dir.y;
    j_pose[(0, 2)] = dir.z;

    // Conditional variance of the expected range given the position
    // uncertainty, plus the patch model-error floor so a confident window
    // cannot inflate the weight without bound.
    let j3 = dir.transpose();
    let var = (j3 * position_cov * j3.transpose())[(0, 0)].max(0.0)
        + SONAR_MODEL_SIGMA * SONAR_MODEL_SIGMA;
    let information = DMatrix::from_element(1, 1, 1.0 / var);

    Some(FactorResidual {
        residual,
        jacobians: vec![(BlockKey::Pose(kf), j_pose)],
        information,
    })
}

// ---------------------------------------------------------------------------
// Depth
// ---------------------------------------------------------------------------

/// Converts a raw pressure reading to the world-frame z of the platform.
///
/// World z is up-positive while the raw reading grows as the platform
/// descends, so the displacement since start-up enters negated;
/// `init_disp_from_imu` accounts for the initial vertical offset between
/// the depth reference and the IMU origin.
pub fn depth_from_raw(d_k: f64, d_0: f64, init_disp_from_imu: f64) -> f64 {
    init_disp_from_imu - (d_k - d_0)
}

/// Depth residual: signed difference between the state's z position and the
/// depth-derived world z.
///
/// The signed form is used (rather than an absolute value) so the residual
/// stays differentiable at zero; under a squared cost the two are
/// equivalent.
pub fn depth_residual(
    kf: KeyframeId,
    state: &RobotState,
    depth_world_z: f64,
    sigma_d: f64,
) -> FactorResidual {
    let residual = DVector::from_element(1, state.position.z - depth_world_z);
    let mut j_pose = DMatrix::zeros(1, 6);
    j_pose[(0, 2)] = 1.0;
    FactorResidual {
        residual,
        jacobians: vec![(BlockKey::Pose(kf), j_pose)],
        information: DMatrix::from_element(1, 1, 1.0 / (sigma_d * sigma_d)),
    }
}
