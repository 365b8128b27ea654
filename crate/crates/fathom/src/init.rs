//! Robust initialization: two-step scale refinement and velocity/gravity
//! estimation from stereo odometry, pressure depth and IMU preintegrals.
//!
//! Step one corrects the stereo scale against the depth sensor using the
//! vertical components of the camera trajectory. Step two aligns the
//! depth-refined camera positions with the inertial preintegrals in a
//! linear least-squares problem over per-keyframe body velocities, the
//! gravity vector and a residual scale factor. Sonar is never used here:
//! its returns sweep around the platform while the cameras look forward,
//! so static scenes offer no acoustic/visual correspondences.

use crate::geometry::{ExtrinsicCalibration, Quaternion, RobotState, Transform};
use crate::imu::PreintegratedImu;
use nalgebra::{DMatrix, DVector, Matrix3, Vector3};
use thiserror::Error;

/// Minimum tracked features per frame before initialization may run.
pub const MIN_INIT_FEATURES: usize = 15;
/// Minimum vertical camera motion for the depth-based scale to be
/// observable, meters.
pub const MIN_VERTICAL_MOTION: f64 = 1e-3;
/// Maximum condition number accepted for the velocity/gravity system.
pub const MAX_CONDITION_NUMBER: f64 = 1e6;
/// Accepted relative deviation of the recovered gravity magnitude.
pub const GRAVITY_TOLERANCE: f64 = 0.2;

#[derive(Debug, Error, PartialEq)]
pub enum InitError {
    /// Not enough data or excitation yet; caller should keep ingesting.
    #[error("initialization deferred: {0}")]
    Deferred(&'static str),
    /// Data present but inconsistent; caller should reset the buffer.
    #[error("initialization rejected: {0}")]
    Rejected(&'static str),
}

/// One candidate keyframe accumulated before initialization.
#[derive(Debug, Clone)]
pub struct InitFrame {
    pub t: f64,
    /// Camera pose in the (gravity-aligned, unscaled) odometry frame.
    pub cam_pose: Transform,
    /// Raw pressure reading closest to this frame, if any.
    pub depth_reading: Option<f64>,
    /// Tracked feature count of the frame.
    pub feature_count: usize,
    /// Preintegrated inertial interval from the previous candidate.
    pub pre_from_prev: Option<PreintegratedImu>,
}

/// Candidate keyframes plus the feature gate.
#[derive(Debug, Clone, Default)]
pub struct InitBuffer {
    pub frames: Vec<InitFrame>,
    pub min_features: usize,
}

impl InitBuffer {
    pub fn new(min_features: usize) -> Self {
        InitBuffer { frames: Vec::new(), min_features }
    }

    pub fn push(&mut self, frame: InitFrame) {
        self.frames.push(frame);
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

/// Output of the two-step refinement.
#[derive(Debug, Clone)]
pub struct InitSolution {
    /// Depth-based scale correction applied to the stereo positions.
    pub s1: f64,
    /// Residual scale from the visual-inertial alignment.
    pub s2: f64,
    /// Per-keyframe world-frame velocities (odometry world).
    pub velocities: Vec<Vector3<f64>>,
    /// Recovered gravity in the odometry world frame.
    pub gravity: Vector3<f64>,
    /// Raw pressure reading of the first frame; the depth reference for the
    /// rest of the run.
    pub d0: f64,
    /// Seeded robot states, expressed in a gravity-aligned world whose
    /// origin is the first keyframe's IMU position (yaw zeroed).
    pub states: Vec<RobotState>,
}

impl InitSolution {
    /// Total metric scale correction applied to the raw stereo positions.
    pub fn total_scale(&self) -> f64 {
        self.s1 * self.s2
    }
}

/// Step one: solve the depth-vs-camera vertical relation for the scale
/// factor, in least squares over all consecutive keyframe pairs that carry
/// depth readings.
///
/// Returns the scale and the rescaled camera positions. Defers when the
/// vertical camera motion is too small for the scale to be observable.
pub fn refine_scale_depth(
    buffer: &InitBuffer,
    calib: &ExtrinsicCalibration,
) -> Result<(f64, Vec<Vector3<f64>>), InitError> {
    let with_depth: Vec<(usize, f64)> = buffer
        .frames
        .iter()
        .enumerate()
        .filter_map(|(i, f)| f.depth_reading.map(|d| (i, d)))
        .collect();
    if with_depth.len() < 2 {
        return Err(InitError::Deferred("need at least two depth readings"));
    }

    // Depth sensor position in the camera frame (lever arm of the z-row).
    let t_cd = calib.t_ic_left.inverse().compose(&calib.t_id);
    let p_cd = t_cd.translation;

    let mut num = 0.0;
    let mut den = 0.0;
    let mut max_dz = 0.0_f64;
    for pair in with_depth.windows(2) {
        let (i, d_i) = pair[0];
        let (j, d_j) = pair[1];
        let frame_i = &buffer.frames[i];
        let frame_j = &buffer.frames[j];
        // World z of the depth sensor moves opposite to the raw reading.
        let dz_depth = -(d_j - d_i);
        let dz_cam = frame_j.cam_pose.translation.z - frame_i.cam_pose.translation.z;
        let lever = (frame_j.cam_pose.rotation * p_cd).z - (frame_i.cam_pose.rotation * p_cd).z;
        let target = dz_depth - lever;
        num += target * dz_cam;
        den += dz_cam * dz_cam;
        max_dz = max_dz.max(dz_cam.abs());
    }
    if max_dz <= MIN_VERTICAL_MOTION {
        return Err(InitError::Deferred("vertical camera motion too small for depth scale"));
    }
    let s1 = num / den;
    if !(s1.is_finite() && s1 > 0.0) {
        return Err(InitError::Rejected("non-positive depth scale"));
    }
    let scaled = buffer.frames.iter().map(|f| s1 * f.cam_pose.translation).collect();
    Ok((s1, scaled))
}

/// Step two: linear least squares over per-keyframe body velocities, the
/// gravity vector and a residual scale, aligning the depth-refined camera
/// positions with the inertial preintegrals.
///
/// When the platform has not translated (the scale column is numerically
/// null) the positions from step one are already metric, so the scale is
/// pinned at 1 and only velocities and gravity are solved.
pub fn align_visual_inertial(
    buffer: &InitBuffer,
    p_r1: &[Vector3<f64>],
    calib: &ExtrinsicCalibration,
    g_mag: f64,
) -> Result<InitSolution, InitError> {
    let n = buffer.frames.len();
    if n < 3 {
        return Err(InitError::Deferred("need at least three keyframes"));
    }
    assert_eq!(p_r1.len(), n);

    // Constant extrinsics.
    let r_ic = calib.t_ic_left.rotation; // body-from-camera
    let t_ci = calib.t_ic_left.inverse();
    let p_ci = t_ci.translation; // IMU position in camera frame

    // Body attitude per frame from the stereo odometry rotation.
    let r_wi: Vec<Matrix3<f64>> = buffer
        .frames
        .iter()
        .map(|f| f.cam_pose.rotation * r_ic.transpose())
        .collect();

    let rows = 6 * (n - 1);
    let cols = 3 * n + 4;
    let mut h = DMatrix::<f64>::zeros(rows, cols);
    let mut z = DVector::<f64>::zeros(rows);

    for k in 0..n - 1 {
        let pre = buffer.frames[k + 1]
            .pre_from_prev
            .as_ref()
            .ok_or(InitError::Deferred("missing preintegral between keyframes"))?;
        let dt = pre.dt;
        let r_iw_i = r_wi[k].transpose();
        let r_wc_next = buffer.frames[k + 1].cam_pose.rotation;

        let row = 6 * k;
        // Position block; r_ic maps camera to body, so the constant lever
        // term is R_IC * p_CI.
        let z_top = pre.alpha - r_iw_i * (r_wc_next * p_ci) + r_ic * p_ci;
        for r in 0..3 {
            z[row + r] = z_top[r];
        }
        set_block(&mut h, row, 3 * k, &(-Matrix3::identity() * dt)); // v_k (body)
        set_block(&mut h, row, 3 * n, &(-0.5 * dt * dt * r_iw_i)); // gravity
        let s_col = r_iw_i * (p_r1[k + 1] - p_r1[k]);
        for r in 0..3 {
            h[(row + r, 3 * n + 3)] = s_col[r];
        }

        // Velocity block.
        let row = 6 * k + 3;
        for r in 0..3 {
            z[row + r] = pre.beta[r];
        }
        set_block(&mut h, row, 3 * k, &(-Matrix3::identity()));
        set_block(&mut h, row, 3 * (k + 1), &(r_iw_i * r_wi[k + 1]));
        set_block(&mut h, row, 3 * n, &(-dt * r_iw_i));
    }

    // Scale observability: a null scale column means the platform has not
    // translated; the step-one positions are already metric.
    let scale_col_norm = h.column(3 * n + 3).norm();
    let h_scale = h.norm().max(1.0);
    let fix_scale = scale_col_norm < 1e-9 * h_scale;

    let (solution, condition) = if fix_scale {
        let reduced = h.columns(0, cols - 1).into_owned();
        let svd = reduced.svd(true, true);
        let min_sv = svd.singular_values.iter().cloned().fold(f64::INFINITY, f64::min);
        let max_sv = svd.singular_values.iter().cloned().fold(0.0, f64::max);
        let cond = if min_sv > 0.0 { max_sv / min_sv } else { f64::INFINITY };
        let sol = svd
            .solve(&z, 1e-12)
            .map_err(|_| InitError::Deferred("degenerate alignment system"))?;
        let mut full = DVector::zeros(cols);
        full.rows_mut(0, cols - 1).copy_from(&sol);
        full[cols - 1] = 1.0;
        (full, cond)
    } else {
        let svd = h.clone().svd(true, true);
        let min_sv = svd.singular_values.iter().cloned().fold(f64::INFINITY, f64::min);
        let max_sv = svd.singular_values.iter().cloned().fold(0.0, f64::max);
        let cond = if min_sv > 0.0 { max_sv / min_sv } else { f64::INFINITY };
        let sol = svd
            .solve(&z, 1e-12)
            .map_err(|_| InitError::Deferred("degenerate alignment system"))?;
        (sol, cond)
    };

    if !condition.is_finite() || condition > MAX_CONDITION_NUMBER {
        return Err(InitError::Deferred("insufficient excitation (ill-conditioned alignment)"));
    }

    let gravity = Vector3::new(solution[3 * n], solution[3 * n + 1], solution[3 * n + 2]);
    if (gravity.norm() - g_mag).abs() > GRAVITY_TOLERANCE * g_mag {
        return Err(InitError::Rejected("gravity magnitude check failed"));
    }
    let s2 = solution[3 * n + 3];
    if !(s2.is_finite() && s2 > 0.0) {
        return Err(InitError::Rejected("non-positive alignment scale"));
    }

    // Body velocities to odometry-world velocities.
    let velocities: Vec<Vector3<f64>> = (0..n)
        .map(|k| r_wi[k] * Vector3::new(solution[3 * k], solution[3 * k + 1], solution[3 * k + 2]))
        .collect();

    let d0 = buffer
        .frames
        .iter()
        .find_map(|f| f.depth_reading)
        .ok_or(InitError::Deferred("no depth reference"))?;

    // Metric IMU positions in the odometry world.
    let positions: Vec<Vector3<f64>> = (0..n)
        .map(|k| s2 * (/* p_r1 already includes s1 */ p_r1[k]) + buffer.frames[k].cam_pose.rotation * p_ci)
        .collect();

    // Gravity alignment: rotate the odometry world so gravity becomes
    // (0, 0, -g_mag), then anchor the first keyframe at the origin with
    // zero yaw.
    let g_dir = gravity.normalize();
    let target = -Vector3::z();
    let align_q = rotation_between(&g_dir, &target);
    let r_align = align_q.rotation_matrix();

    let mut states = Vec::with_capacity(n);
    for k in 0..n {
        let p = r_align * positions[k];
        let r = r_align * r_wi[k];
        let v = r_align * velocities[k];
        states.push(RobotState {
            position: p,
            orientation: Quaternion::from_rotation_matrix(&r),
            velocity: v,
            gyro_bias: Vector3::zeros(),
            accel_bias: Vector3::zeros(),
        });
    }
    // Anchor: first keyframe at origin, yaw zero.
    let yaw0 = {
        let r0 = states[0].orientation.rotation_matrix();
        let fwd = r0 * Vector3::x();
        fwd.y.atan2(fwd.x)
    };
    let unyaw = crate::geometry::exp_so3(&Vector3::new(0.0, 0.0, -yaw0));
    let origin = states[0].position;
    let anchor = Transform::from_quaternion(&unyaw, Vector3::zeros());
    for s in &mut states {
        s.position = anchor.rotation * (s.position - origin);
        s.orientation = anchor.quaternion().mul(&s.orientation);
        s.velocity = anchor.rotation * s.velocity;
    }

    Ok(InitSolution {
        s1: 1.0, // filled by the caller (gate_and_initialize)
        s2,
        velocities,
        gravity,
        d0,
        states,
    })
}

/// Minimal rotation taking unit vector `from` onto unit vector `to`.
fn rotation_between(from: &Vector3<f64>, to: &Vector3<f64>) -> Quaternion {
    let cross = from.cross(to);
    let dot = from.dot(to).clamp(-1.0, 1.0);
    if cross.norm() < 1e-12 {
        if dot > 0.0 {
            return Quaternion::identity();
        }
        // Opposite directions: rotate half a turn about any perpendicular.
        let axis = if from.x.abs() < 0.9 { Vector3::x() } else { Vector3::y() };
        let perp = from.cross(&axis).normalize();
        return crate::geometry::exp_so3(&(perp * std::f64::consts::PI));
    }
    let angle = dot.acos();
    crate::geometry::exp_so3(&(cross.normalize() * angle))
}

fn set_block(m: &mut DMatrix<f64>, row: usize, col: usize, block: &Matrix3<f64>) {
    for r in 0..3 {
        for c in 0..3 {
            m[(row + r, col + c)] = block[(r, c)];
        }
    }
}

/// Runs the full gate: feature counts, then both refinement steps in order,
/// with the sanity checks of each. On success the returned solution carries
/// metric, gravity-aligned seed states and the depth reference `d0`.
pub fn gate_and_initialize(
    buffer: &InitBuffer,
    calib: &ExtrinsicCalibration,
    g_mag: f64,
) -> Result<InitSolution, InitError> {
    if buffer.frames.len() < 3 {
        return Err(InitError::Deferred("not enough candidate keyframes"));
    }
    if buffer.frames.iter().any(|f| f.feature_count < buffer.min_features) {
        return Err(InitError::Deferred("too few tracked features"));
    }
    let (s1, p_r1) = refine_scale_depth(buffer, calib)?;
    let mut solution = align_visual_inertial(buffer, &p_r1, calib, g_mag)?;
    solution.s1 = s1;
    Ok(solution)
}
