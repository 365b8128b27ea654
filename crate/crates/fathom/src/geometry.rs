//! Rigid-body math: quaternions, homogeneous transforms, and the robot
//! state with its tangent-space perturbations.
//!
//! Conventions used throughout the crate:
//!
//! - Quaternions are Hamilton, scalar-first, and canonicalized to `w >= 0`
//!   on storage (the double cover is collapsed).
//! - Rotation perturbations are right-multiplicative and local:
//!   `q ⊞ δθ = q · exp(δθ)` with `δθ` expressed in the body frame.
//! - Angles are radians, lengths are meters.
//!
//! All values are immutable after construction and safe to share across
//! threads.

use nalgebra::{Matrix3, Matrix4, Matrix6, SVector, Vector3, Vector6};
use thiserror::Error;

/// Tolerance used by validity checks on rotations and quaternions.
pub const ORTHONORMALITY_TOL: f64 = 1e-9;

/// Below this angle the exponential/logarithm maps switch to their Taylor
/// expansions.
const SMALL_ANGLE: f64 = 1e-8;

#[derive(Debug, Error)]
pub enum GeometryError {
    #[error("non-finite component in {0}")]
    NonFinite(&'static str),
}

/// Skew-symmetric (cross-product) matrix of a 3-vector.
pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

// ---------------------------------------------------------------------------
// Quaternion
// ---------------------------------------------------------------------------

/// Unit quaternion, Hamilton convention, scalar-first storage.
///
/// The constructor normalizes and flips the sign so that `w >= 0`; all
/// public operations preserve unit norm to within [`ORTHONORMALITY_TOL`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Quaternion {
    pub w: f64,
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Quaternion {
    pub fn identity() -> Self {
        Quaternion { w: 1.0, x: 0.0, y: 0.0, z: 0.0 }
    }

    /// Builds a unit quaternion from raw components, normalizing and
    /// canonicalizing the sign.
    pub fn new(w: f64, x: f64, y: f64, z: f64) -> Self {
        let q = Quaternion { w, x, y, z };
        q.normalized()
    }

    pub fn norm(&self) -> f64 {
        (self.w * self.w + self.x * self.x + self.y * self.y + self.z * self.z).sqrt()
    }

    /// Unit-norm, sign-canonical copy.
    pub fn normalized(&self) -> Self {
        let n = self.norm();
        assert!(n > 0.0 && n.is_finite(), "cannot normalize zero/non-finite quaternion");
        let mut q = Quaternion { w: self.w / n, x: self.x / n, y: self.y / n, z: self.z / n };
        // Collapse the double cover. For w == 0 the tie is broken on the
        // first nonzero vector component so storage stays deterministic.
        let flip = q.w < 0.0
            || (q.w == 0.0 && (q.x < 0.0 || (q.x == 0.0 && (q.y < 0.0 || (q.y == 0.0 && q.z < 0.0)))));
        if flip {
            q = Quaternion { w: -q.w, x: -q.x, y: -q.y, z: -q.z };
        }
        q
    }

    pub fn conjugate(&self) -> Self {
        Quaternion { w: self.w, x: -self.x, y: -self.y, z: -self.z }.normalized()
    }

    /// Alias for [`Quaternion::conjugate`]; for unit quaternions they agree.
    pub fn inverse(&self) -> Self {
        self.conjugate()
    }

    /// Hamilton product `self * rhs`.
    pub fn mul(&self, rhs: &Quaternion) -> Quaternion {
        let (w1, x1, y1, z1) = (self.w, self.x, self.y, self.z);
        let (w2, x2, y2, z2) = (rhs.w, rhs.x, rhs.y, rhs.z);
        Quaternion::new(
            w1 * w2 - x1 * x2 - y1 * y2 - z1 * z2,
            w1 * x2 + x1 * w2 + y1 * z2 - z1 * y2,
            w1 * y2 - x1 * z2 + y1 * w2 + z1 * x2,
            w1 * z2 + x1 * y2 - y1 * x2 + z1 * w2,
        )
    }

    /// Rotates a vector by this quaternion.
    pub fn rotate(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.rotation_matrix() * v
    }

    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        let (w, x, y, z) = (self.w, self.x, self.y, self.z);
        Matrix3::new(
            1.0 - 2.0 * (y * y + z * z),
            2.0 * (x * y - w * z),
            2.0 * (x * z + w * y),
            2.0 * (x * y + w * z),
            1.0 - 2.0 * (x * x + z * z),
            2.0 * (y * z - w * x),
            2.0 * (x * z - w * y),
            2.0 * (y * z + w * x),
            1.0 - 2.0 * (x * x + y * y),
        )
    }

    /// Recovers a quaternion from an orthonormal rotation matrix
    /// (Shepperd's method).
    pub fn from_rotation_matrix(m: &Matrix3<f64>) -> Quaternion {
        let trace = m[(0, 0)] + m[(1, 1)] + m[(2, 2)];
        let q = if trace > 0.0 {
            let s = (trace + 1.0).sqrt() * 2.0;
            Quaternion {
                w: 0.25 * s,
                x: (m[(2, 1)] - m[(1, 2)]) / s,
                y: (m[(0, 2)] - m[(2, 0)]) / s,
                z: (m[(1, 0)] - m[(0, 1)]) / s,
            }
        } else if m[(0, 0)] > m[(1, 1)] && m[(0, 0)] > m[(2, 2)] {
            let s = (1.0 + m[(0, 0)] - m[(1, 1)] - m[(2, 2)]).sqrt() * 2.0;
            Quaternion {
                w: (m[(2, 1)] - m[(1, 2)]) / s,
                x: 0.25 * s,
                y: (m[(0, 1)] + m[(1, 0)]) / s,
                z: (m[(0, 2)] + m[(2, 0)]) / s,
            }
        } else if m[(1, 1)] > m[(2, 2)] {
            let s = (1.0 + m[(1, 1)] - m[(0, 0)] - m[(2, 2)]).sqrt() * 2.0;
            Quaternion {
                w: (m[(0, 2)] - m[(2, 0)]) / s,
                x: (m[(0, 1)] + m[(1, 0)]) / s,
                y: 0.25 * s,
                z: (m[(1, 2)] + m[(2, 1)]) / s,
            }
        } else {
            let s = (1.0 + m[(2, 2)] - m[(0, 0)] - m[(1, 1)]).sqrt() * 2.0;
            Quaternion {
                w: (m[(1, 0)] - m[(0, 1)]) / s,
                x: (m[(0, 2)] + m[(2, 0)]) / s,
                y: (m[(1, 2)] + m[(2, 1)]) / s,
                z: 0.25 * s,
            }
        };
        q.normalized()
    }

    /// Rotation about the world z axis.
    pub fn from_yaw(yaw: f64) -> Quaternion {
        exp_so3(&Vector3::new(0.0, 0.0, yaw))
    }

    pub fn is_finite(&self) -> bool {
        self.w.is_finite() && self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }

    /// Geodesic rotation angle to another quaternion, in radians.
    pub fn angle_to(&self, other: &Quaternion) -> f64 {
        log_so3(&self.conjugate().mul(other)).norm()
    }
}

/// SO(3) exponential map: rotation vector (axis * angle) to quaternion.
///
/// Valid for `|omega| < pi`; a Taylor branch handles the origin.
pub fn exp_so3(omega: &Vector3<f64>) -> Quaternion {
    let theta = omega.norm();
    let half = 0.5 * theta;
    let (w, k) = if theta < SMALL_ANGLE {
        // sin(x)/x ~ 1 - x^2/6 around 0
        (1.0 - 0.5 * half * half, 0.5 * (1.0 - half * half / 6.0))
    } else {
        (half.cos(), half.sin() / theta)
    };
    Quaternion::new(w, k * omega.x, k * omega.y, k * omega.z)
}

/// SO(3) logarithm map: quaternion to rotation vector with `|result| <= pi`.
pub fn log_so3(q: &Quaternion) -> Vector3<f64> {
    let q = q.normalized();
    let vec_norm = (q.x * q.x + q.y * q.y + q.z * q.z).sqrt();
    if vec_norm < SMALL_ANGLE {
        // theta/sin(theta/2) ~ 2 + theta^2/12; with w ~ 1 this reduces to 2v.
        return 2.0 * Vector3::new(q.x, q.y, q.z);
    }
    let theta = 2.0 * vec_norm.atan2(q.w);
    Vector3::new(q.x, q.y, q.z) * (theta / vec_norm)
}

/// Inverse of the right Jacobian of the SO(3) exponential.
///
/// Satisfies `log(exp(theta) * exp(delta)) ~= theta + Jr_inv(theta) * delta`
/// to first order in `delta`.
pub fn so3_right_jacobian_inv(theta: &Vector3<f64>) -> Matrix3<f64> {
    let angle = theta.norm();
    let sk = skew(theta);
    if angle < 1e-6 {
        return Matrix3::identity() + 0.5 * sk + sk * sk / 12.0;
    }
    let coeff = 1.0 / (angle * angle) - (1.0 + angle.cos()) / (2.0 * angle * angle.sin());
    Matrix3::identity() + 0.5 * sk + coeff * (sk * sk)
}

/// Left Jacobian of the SO(3) exponential, used by the SE(3) maps.
fn so3_left_jacobian(theta: &Vector3<f64>) -> Matrix3<f64> {
    let angle = theta.norm();
    let sk = skew(theta);
    if angle < 1e-6 {
        return Matrix3::identity() + 0.5 * sk + sk * sk / 6.0;
    }
    let a2 = angle * angle;
    Matrix3::identity() + ((1.0 - angle.cos()) / a2) * sk + ((angle - angle.sin()) / (a2 * angle)) * (sk * sk)
}

fn so3_left_jacobian_inv(theta: &Vector3<f64>) -> Matrix3<f64> {
    let angle = theta.norm();
    let sk = skew(theta);
    if angle < 1e-6 {
        return Matrix3::identity() - 0.5 * sk + sk * sk / 12.0;
    }
    let coeff = 1.0 / (angle * angle) - (1.0 + angle.cos()) / (2.0 * angle * angle.sin());
    Matrix3::identity() - 0.5 * sk + coeff * (sk * sk)
}

// ---------------------------------------------------------------------------
// Transform
// ---------------------------------------------------------------------------

/// Rigid-body transform: orthonormal rotation plus translation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Transform {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Transform {
    pub fn identity() -> Self {
        Transform { rotation: Matrix3::identity(), translation: Vector3::zeros() }
    }

    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Self {
        Transform { rotation, translation }
    }

    pub fn from_quaternion(q: &Quaternion, translation: Vector3<f64>) -> Self {
        Transform { rotation: q.rotation_matrix(), translation }
    }

    /// `self · rhs`: applies `rhs` first, then `self`.
    pub fn compose(&self, rhs: &Transform) -> Transform {
        Transform {
            rotation: self.rotation * rhs.rotation,
            translation: self.rotation * rhs.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> Transform {
        let rt = self.rotation.transpose();
        Transform { rotation: rt, translation: -(rt * self.translation) }
    }

    /// Maps a point through the transform.
    pub fn apply(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    pub fn quaternion(&self) -> Quaternion {
        Quaternion::from_rotation_matrix(&self.rotation)
    }

    pub fn matrix(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    /// True when the rotation block is orthonormal with determinant +1
    /// within `tol`.
    pub fn is_valid(&self, tol: f64) -> bool {
        let r = &self.rotation;
        let err = (r.transpose() * r - Matrix3::identity()).norm();
        err <= tol * 10.0 && (r.determinant() - 1.0).abs() <= tol * 10.0
            && self.translation.iter().all(|v| v.is_finite())
    }

    /// Adjoint matrix mapping tangent vectors `[rho, theta]` across the
    /// transform.
    pub fn adjoint(&self) -> Matrix6<f64> {
        let mut adj = Matrix6::zeros();
        adj.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation);
        adj.fixed_view_mut::<3, 3>(3, 3).copy_from(&self.rotation);
        let tr = skew(&self.translation) * self.rotation;
        adj.fixed_view_mut::<3, 3>(0, 3).copy_from(&tr);
        adj
    }
}

impl std::ops::Mul for Transform {
    type Output = Transform;
    fn mul(self, rhs: Transform) -> Transform {
        self.compose(&rhs)
    }
}

/// SE(3) exponential map; the tangent vector stacks `[rho, theta]`.
pub fn exp_se3(xi: &Vector6<f64>) -> Transform {
    let rho = Vector3::new(xi[0], xi[1], xi[2]);
    let theta = Vector3::new(xi[3], xi[4], xi[5]);
    let q = exp_so3(&theta);
    Transform { rotation: q.rotation_matrix(), translation: so3_left_jacobian(&theta) * rho }
}

/// SE(3) logarithm map, inverse of [`exp_se3`].
pub fn log_se3(t: &Transform) -> Vector6<f64> {
    let theta = log_so3(&t.quaternion());
    let rho = so3_left_jacobian_inv(&theta) * t.translation;
    Vector6::new(rho.x, rho.y, rho.z, theta.x, theta.y, theta.z)
}

// ---------------------------------------------------------------------------
// Robot state
// ---------------------------------------------------------------------------

/// Full navigation state of the platform expressed in the world frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RobotState {
    /// Position of the IMU origin, meters.
    pub position: Vector3<f64>,
    /// World-from-IMU attitude.
    pub orientation: Quaternion,
    /// Linear velocity, m/s.
    pub velocity: Vector3<f64>,
    /// Gyroscope bias, rad/s.
    pub gyro_bias: Vector3<f64>,
    /// Accelerometer bias, m/s^2.
    pub accel_bias: Vector3<f64>,
}

impl RobotState {
    pub fn identity() -> Self {
        RobotState {
            position: Vector3::zeros(),
            orientation: Quaternion::identity(),
            velocity: Vector3::zeros(),
            gyro_bias: Vector3::zeros(),
            accel_bias: Vector3::zeros(),
        }
    }

    pub fn pose(&self) -> Transform {
        Transform::from_quaternion(&self.orientation, self.position)
    }

    pub fn is_finite(&self) -> bool {
        self.position.iter().all(|v| v.is_finite())
            && self.orientation.is_finite()
            && self.velocity.iter().all(|v| v.is_finite())
            && self.gyro_bias.iter().all(|v| v.is_finite())
            && self.accel_bias.iter().all(|v| v.is_finite())
    }

    /// Retraction: applies a tangent-space perturbation.
    ///
    /// Position, velocity and biases are added componentwise; the attitude is
    /// composed on the right with `exp(δθ)`.
    pub fn boxplus(&self, delta: &ErrorState) -> Result<RobotState, GeometryError> {
        if !delta.as_vector().iter().all(|v| v.is_finite()) {
            return Err(GeometryError::NonFinite("error-state perturbation"));
        }
        if !self.is_finite() {
            return Err(GeometryError::NonFinite("robot state"));
        }
        Ok(RobotState {
            position: self.position + delta.dp,
            orientation: self.orientation.mul(&exp_so3(&delta.dtheta)),
            velocity: self.velocity + delta.dv,
            gyro_bias: self.gyro_bias + delta.dbg,
            accel_bias: self.accel_bias + delta.dba,
        })
    }

    /// Lift: recovers the perturbation such that
    /// `reference.boxplus(delta) == self`.
    pub fn boxminus(&self, reference: &RobotState) -> ErrorState {
        ErrorState {
            dp: self.position - reference.position,
            dtheta: log_so3(&reference.orientation.conjugate().mul(&self.orientation)),
            dv: self.velocity - reference.velocity,
            dbg: self.gyro_bias - reference.gyro_bias,
            dba: self.accel_bias - reference.accel_bias,
        }
    }
}

/// 15-dimensional tangent-space perturbation of a [`RobotState`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ErrorState {
    pub dp: Vector3<f64>,
    pub dtheta: Vector3<f64>,
    pub dv: Vector3<f64>,
    pub dbg: Vector3<f64>,
    pub dba: Vector3<f64>,
}

impl ErrorState {
    pub const DIM: usize = 15;

    pub fn zero() -> Self {
        ErrorState {
            dp: Vector3::zeros(),
            dtheta: Vector3::zeros(),
            dv: Vector3::zeros(),
            dbg: Vector3::zeros(),
            dba: Vector3::zeros(),
        }
    }

    pub fn from_vector(v: &SVector<f64, 15>) -> Self {
        ErrorState {
            dp: Vector3::new(v[0], v[1], v[2]),
            dtheta: Vector3::new(v[3], v[4], v[5]),
            dv: Vector3::new(v[6], v[7], v[8]),
            dbg: Vector3::new(v[9], v[10], v[11]),
            dba: Vector3::new(v[12], v[13], v[14]),
        }
    }

    pub fn as_vector(&self) -> SVector<f64, 15> {
        let mut v = SVector::<f64, 15>::zeros();
        v.fixed_rows_mut::<3>(0).copy_from(&self.dp);
        v.fixed_rows_mut::<3>(3).copy_from(&self.dtheta);
        v.fixed_rows_mut::<3>(6).copy_from(&self.dv);
        v.fixed_rows_mut::<3>(9).copy_from(&self.dbg);
        v.fixed_rows_mut::<3>(12).copy_from(&self.dba);
        v
    }

    pub fn norm(&self) -> f64 {
        self.as_vector().norm()
    }
}

// ---------------------------------------------------------------------------
// Extrinsics
// ---------------------------------------------------------------------------

/// Mounting transforms of every sensor relative to the IMU frame, plus the
/// vertical offset between the IMU and depth-sensor origins captured at
/// start-up.
#[derive(Debug, Clone, Copy)]
pub struct ExtrinsicCalibration {
    /// IMU-from-left-camera.
    pub t_ic_left: Transform,
    /// IMU-from-right-camera.
    pub t_ic_right: Transform,
    /// IMU-from-sonar.
    pub t_is: Transform,
    /// IMU-from-depth-sensor.
    pub t_id: Transform,
    /// Initial displacement of the depth reference along world z, meters.
    pub init_disp_from_imu: f64,
}

impl ExtrinsicCalibration {
    /// All sensors collocated with the IMU. Useful in tests and as a
    /// starting point for configs.
    pub fn collocated() -> Self {
        ExtrinsicCalibration {
            t_ic_left: Transform::identity(),
            t_ic_right: Transform::identity(),
            t_is: Transform::identity(),
            t_id: Transform::identity(),
            init_disp_from_imu: 0.0,
        }
    }

    /// Forward-looking stereo pair with the given baseline (meters), sonar
    /// and depth sensor at the IMU origin.
    ///
    /// Camera frames use the usual optics convention (z forward, x right,
    /// y down) while the IMU/world frame is x forward, y left, z up.
    pub fn forward_stereo(baseline: f64) -> Self {
        // Columns are the camera axes expressed in IMU coordinates:
        // camera x (right) = -IMU y, camera y (down) = -IMU z,
        // camera z (forward) = IMU x.
        let r_ic = Matrix3::new(
            0.0, 0.0, 1.0, //
            -1.0, 0.0, 0.0, //
            0.0, -1.0, 0.0,
        );
        let left = Transform::new(r_ic, Vector3::new(0.0, baseline / 2.0, 0.0));
        let right = Transform::new(r_ic, Vector3::new(0.0, -baseline / 2.0, 0.0));
        ExtrinsicCalibration {
            t_ic_left: left,
            t_ic_right: right,
            t_is: Transform::identity(),
            t_id: Transform::identity(),
            init_disp_from_imu: 0.0,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};
    use std::f64::consts::PI;

    fn random_quaternion(rng: &mut StdRng) -> Quaternion {
        let axis = Vector3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
        let axis = if axis.norm() < 1e-6 { Vector3::x() } else { axis.normalize() };
        exp_so3(&(axis * rng.gen_range(0.0..3.0)))
    }

    fn random_transform(rng: &mut StdRng) -> Transform {
        Transform::from_quaternion(
            &random_quaternion(rng),
            Vector3::new(rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0)),
        )
    }

    #[test]
    fn exp_of_zero_is_identity() {
        let q = exp_so3(&Vector3::zeros());
        assert_eq!(q, Quaternion::identity());
    }

    #[test]
    fn exp_quarter_turn_about_x() {
        let q = exp_so3(&Vector3::new(PI / 2.0, 0.0, 0.0));
        let rotated = q.rotate(&Vector3::new(0.0, 1.0, 0.0));
        assert_relative_eq!(rotated, Vector3::new(0.0, 0.0, 1.0), epsilon = 1e-12);
    }

    #[test]
    fn exp_log_round_trip_random() {
        let mut rng = StdRng::seed_from_u64(7);
        for _ in 0..1000 {
            let axis = Vector3::new(
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            );
            let axis = if axis.norm() < 1e-9 { Vector3::x() } else { axis.normalize() };
            let omega = axis * rng.gen_range(1e-12..PI - 0.01);
            let back = log_so3(&exp_so3(&omega));
            assert!((back - omega).norm() < 1e-9, "omega={omega:?} back={back:?}");
        }
    }

    #[test]
    fn quaternion_storage_is_sign_canonical() {
        let q = Quaternion::new(-0.5, 0.5, 0.5, 0.5);
        assert!(q.w >= 0.0);
        let mut rng = StdRng::seed_from_u64(3);
        for _ in 0..200 {
            let a = random_quaternion(&mut rng);
            let b = random_quaternion(&mut rng);
            let c = a.mul(&b);
            assert!(c.w >= 0.0);
            assert!((c.norm() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn rotation_matrices_are_orthonormal() {
        let mut rng = StdRng::seed_from_u64(11);
        for _ in 0..500 {
            let q = random_quaternion(&mut rng);
            let r = q.rotation_matrix();
            assert!((r.transpose() * r - Matrix3::identity()).norm() < 1e-9);
            assert!((r.determinant() - 1.0).abs() < 1e-9);
            // matrix -> quaternion -> matrix closes the loop
            let q2 = Quaternion::from_rotation_matrix(&r);
            assert!((q2.rotation_matrix() - r).norm() < 1e-9);
        }
    }

    #[test]
    fn boxplus_zero_is_identity() {
        let mut rng = StdRng::seed_from_u64(5);
        let state = RobotState {
            position: Vector3::new(1.0, -2.0, 3.0),
            orientation: random_quaternion(&mut rng),
            velocity: Vector3::new(0.1, 0.2, -0.3),
            gyro_bias: Vector3::new(1e-3, -2e-3, 0.0),
            accel_bias: Vector3::new(0.01, 0.0, -0.02),
        };
        let out = state.boxplus(&ErrorState::zero()).unwrap();
        assert_relative_eq!(out.position, state.position, epsilon = 1e-15);
        assert!(out.orientation.angle_to(&state.orientation) < 1e-12);
    }

    #[test]
    fn boxplus_pure_translation() {
        let state = RobotState::identity();
        let mut delta = ErrorState::zero();
        delta.dp = Vector3::new(1.0, 0.0, 0.0);
        let out = state.boxplus(&delta).unwrap();
        assert_relative_eq!(out.position, Vector3::new(1.0, 0.0, 0.0), epsilon = 1e-15);
    }

    #[test]
    fn boxplus_rejects_non_finite() {
        let state = RobotState::identity();
        let mut delta = ErrorState::zero();
        delta.dv = Vector3::new(f64::NAN, 0.0, 0.0);
        assert!(state.boxplus(&delta).is_err());
    }

    #[test]
    fn boxplus_boxminus_round_trip() {
        let mut rng = StdRng::seed_from_u64(23);
        for _ in 0..1000 {
            let state = RobotState {
                position: Vector3::new(rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0)),
                orientation: random_quaternion(&mut rng),
                velocity: Vector3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)),
                gyro_bias: Vector3::new(rng.gen_range(-0.01..0.01), 0.0, 0.0),
                accel_bias: Vector3::new(0.0, rng.gen_range(-0.1..0.1), 0.0),
            };
            let mut v = SVector::<f64, 15>::zeros();
            for i in 0..15 {
                v[i] = rng.gen_range(-0.03..0.03);
            }
            let delta = ErrorState::from_vector(&v);
            let lifted = state.boxplus(&delta).unwrap().boxminus(&state);
            assert!((lifted.as_vector() - v).norm() < 1e-9);
        }
    }

    #[test]
    fn transform_group_laws() {
        let mut rng = StdRng::seed_from_u64(31);
        for _ in 0..300 {
            let a = random_transform(&mut rng);
            let b = random_transform(&mut rng);
            let c = random_transform(&mut rng);
            let id = a.compose(&a.inverse());
            assert!((id.rotation - Matrix3::identity()).norm() < 1e-9);
            assert!(id.translation.norm() < 1e-9);
            let lhs = a.compose(&b).compose(&c);
            let rhs = a.compose(&b.compose(&c));
            assert!((lhs.rotation - rhs.rotation).norm() < 1e-9);
            assert!((lhs.translation - rhs.translation).norm() < 1e-9);
            assert!(a.compose(&Transform::identity()) == a || (a.compose(&Transform::identity()).translation - a.translation).norm() < 1e-15);
        }
    }

    #[test]
    fn se3_exp_log_round_trip() {
        let mut rng = StdRng::seed_from_u64(41);
        for _ in 0..500 {
            let mut xi = Vector6::zeros();
            for i in 0..3 {
                xi[i] = rng.gen_range(-3.0..3.0);
            }
            for i in 3..6 {
                xi[i] = rng.gen_range(-0.9..0.9);
            }
            let back = log_se3(&exp_se3(&xi));
            assert!((back - xi).norm() < 1e-9, "xi={xi:?} back={back:?}");
        }
    }

    #[test]
    fn right_jacobian_inverse_first_order() {
        let mut rng = StdRng::seed_from_u64(43);
        for _ in 0..200 {
            let theta = Vector3::new(rng.gen_range(-1.5..1.5), rng.gen_range(-1.5..1.5), rng.gen_range(-1.5..1.5));
            let eps = 1e-6;
            let jr_inv = so3_right_jacobian_inv(&theta);
            for k in 0..3 {
                let mut d = Vector3::zeros();
                d[k] = eps;
                let plus = log_so3(&exp_so3(&theta).mul(&exp_so3(&d)));
                let minus = log_so3(&exp_so3(&theta).mul(&exp_so3(&(-d))));
                let numeric = (plus - minus) / (2.0 * eps);
                assert!((numeric - jr_inv.column(k)).norm() < 1e-5);
            }
        }
    }

    proptest! {
        #[test]
        fn prop_exp_log_round_trip(x in -1.0f64..1.0, y in -1.0f64..1.0, z in -1.0f64..1.0, scale in 0.01f64..0.99) {
            let v = Vector3::new(x, y, z);
            prop_assume!(v.norm() > 1e-6);
            let omega = v.normalize() * (scale * (PI - 0.01));
            let back = log_so3(&exp_so3(&omega));
            prop_assert!((back - omega).norm() < 1e-9);
        }

        #[test]
        fn prop_rotation_matrix_orthonormal(x in -1.0f64..1.0, y in -1.0f64..1.0, z in -1.0f64..1.0) {
            let q = exp_so3(&Vector3::new(x, y, z));
            let r = q.rotation_matrix();
            prop_assert!((r.transpose() * r - Matrix3::identity()).norm() < 1e-9);
            prop_assert!((r.determinant() - 1.0).abs() < 1e-9);
        }
    }
}
