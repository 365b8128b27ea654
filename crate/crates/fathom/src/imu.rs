//! IMU preintegration between consecutive keyframes.
//!
//! Gyro/accelerometer streams are folded into relative motion terms
//! (`alpha`, `beta`, `gamma`) that are independent of the global state, so a
//! keyframe interval only has to be integrated once per bias linearization
//! point. Gravity is *not* baked into the terms; it enters explicitly in
//! [`predict`].

use crate::geometry::{exp_so3, skew, Quaternion, RobotState};
use nalgebra::{Matrix3, SMatrix, Vector3};
use thiserror::Error;

/// One inertial sample. The accelerometer reports specific force (true
/// acceleration minus gravity, in the body frame).
#[derive(Debug, Clone, Copy)]
pub struct ImuSample {
    /// Timestamp, seconds.
    pub t: f64,
    /// Angular rate, rad/s.
    pub gyro: Vector3<f64>,
    /// Specific force, m/s^2.
    pub accel: Vector3<f64>,
}

/// Continuous-time noise densities of the inertial sensor plus the assumed
/// gravity magnitude.
#[derive(Debug, Clone, Copy)]
pub struct ImuNoiseModel {
    /// Gyro white noise density, rad/s/sqrt(Hz).
    pub sigma_g: f64,
    /// Accelerometer white noise density, m/s^2/sqrt(Hz).
    pub sigma_a: f64,
    /// Gyro bias random-walk density, rad/s^2/sqrt(Hz).
    pub sigma_bg: f64,
    /// Accelerometer bias random-walk density, m/s^3/sqrt(Hz).
    pub sigma_ba: f64,
    /// Gravity magnitude, m/s^2.
    pub g_mag: f64,
}

impl Default for ImuNoiseModel {
    fn default() -> Self {
        // Mid-grade MEMS figures.
        ImuNoiseModel {
            sigma_g: 1.7e-4,
            sigma_a: 2.0e-3,
            sigma_bg: 2.0e-5,
            sigma_ba: 3.0e-3,
            g_mag: 9.81,
        }
    }
}

#[derive(Debug, Error)]
pub enum PreintegrationError {
    #[error("need at least two samples, got {0}")]
    TooFewSamples(usize),
    #[error("timestamps must be strictly increasing (sample {index})")]
    NonMonotoneTimestamps { index: usize },
    #[error("non-finite bias")]
    NonFiniteBias,
}

/// Relative motion terms over one keyframe interval with their first-order
/// covariance (9x9 over position/velocity/rotation perturbations, in that
/// order) and the bias linearization point used during integration.
#[derive(Debug, Clone)]
pub struct PreintegratedImu {
    /// Position term, meters.
    pub alpha: Vector3<f64>,
    /// Velocity term, m/s.
    pub beta: Vector3<f64>,
    /// Rotation term.
    pub gamma: Quaternion,
    /// Integrated duration, seconds.
    pub dt: f64,
    /// Covariance over (alpha, beta, gamma) minimal coordinates.
    pub covariance: SMatrix<f64, 9, 9>,
    /// Gyro bias used during integration.
    pub bias_gyro_ref: Vector3<f64>,
    /// Accelerometer bias used during integration.
    pub bias_accel_ref: Vector3<f64>,
    /// Noise model the covariance was propagated with.
    pub noise: ImuNoiseModel,
}

impl PreintegratedImu {
    /// Identity element: no motion, no uncertainty, zero duration.
    pub fn zero() -> Self {
        PreintegratedImu {
            alpha: Vector3::zeros(),
            beta: Vector3::zeros(),
            gamma: Quaternion::identity(),
            dt: 0.0,
            covariance: SMatrix::zeros(),
            bias_gyro_ref: Vector3::zeros(),
            bias_accel_ref: Vector3::zeros(),
            noise: ImuNoiseModel::default(),
        }
    }
}

/// Integrates an inertial stream into relative motion terms with a midpoint
/// rule per sample interval.
///
/// The stream must contain at least two samples with strictly increasing
/// timestamps. The covariance is propagated to first order (Euler
/// discretization of the error dynamics).
pub fn preintegrate(
    samples: &[ImuSample],
    bias_gyro: Vector3<f64>,
    bias_accel: Vector3<f64>,
    noise: &ImuNoiseModel,
) -> Result<PreintegratedImu, PreintegrationError> {
    if samples.len() < 2 {
        return Err(PreintegrationError::TooFewSamples(samples.len()));
    }
    if !(bias_gyro.iter().all(|v| v.is_finite()) && bias_accel.iter().all(|v| v.is_finite())) {
        return Err(PreintegrationError::NonFiniteBias);
    }

    let mut alpha = Vector3::zeros();
    let mut beta = Vector3::zeros();
    let mut gamma = Quaternion::identity();
    let mut cov = SMatrix::<f64, 9, 9>::zeros();

    for (i, pair) in samples.windows(2).enumerate() {
        let (s0, s1) = (&pair[0], &pair[1]);
        let dt = s1.t - s0.t;
        if dt <= 0.0 {
            return Err(PreintegrationError::NonMonotoneTimestamps { index: i + 1 });
        }

        let omega_mid = 0.5 * (s0.gyro + s1.gyro) - bias_gyro;
        let gamma_next = gamma.mul(&exp_so3(&(omega_mid * dt)));

        let accel_0 = gamma.rotate(&(s0.accel - bias_accel));
        let accel_1 = gamma_next.rotate(&(s1.accel - bias_accel));
        let accel_mid = 0.5 * (accel_0 + accel_1);

        // Error-state transition for (d_alpha, d_beta, d_theta). Rotation
        // error is right-multiplicative on gamma.
        let r = gamma.rotation_matrix();
        let a_body = 0.5 * ((s0.accel - bias_accel) + (s1.accel - bias_accel));
        let ra_skew = r * skew(&a_body);
        let mut f = SMatrix::<f64, 9, 9>::identity();
        f.fixed_view_mut::<3, 3>(0, 3).copy_from(&(Matrix3::identity() * dt));
        f.fixed_view_mut::<3, 3>(0, 6).copy_from(&(-0.5 * dt * dt * ra_skew));
        f.fixed_view_mut::<3, 3>(3, 6).copy_from(&(-dt * ra_skew));
        f.fixed_view_mut::<3, 3>(6, 6)
            .copy_from(&(Matrix3::identity() - skew(&(omega_mid * dt))));

        // Additive noise: accel noise enters position/velocity, gyro noise
        // enters rotation. White noise density -> discrete variance sigma^2*dt.
        // Bias drift since the linearization point is not corrected to first
        // order, so it is accounted for as extra input noise growing with the
        // elapsed interval time.
        let elapsed = s0.t - samples[0].t;
        let qa = (noise.sigma_a * noise.sigma_a + noise.sigma_ba * noise.sigma_ba * elapsed) * dt;
        let qg = (noise.sigma_g * noise.sigma_g + noise.sigma_bg * noise.sigma_bg * elapsed) * dt;
        let mut q = SMatrix::<f64, 9, 9>::zeros();
        q.fixed_view_mut::<3, 3>(0, 0).copy_from(&(Matrix3::identity() * (0.25 * dt * dt * qa)));
        q.fixed_view_mut::<3, 3>(0, 3).copy_from(&(Matrix3::identity() * (0.5 * dt * qa)));
        q.fixed_view_mut::<3, 3>(3, 0).copy_from(&(Matrix3::identity() * (0.5 * dt * qa)));
        q.fixed_view_mut::<3, 3>(3, 3).copy_from(&(Matrix3::identity() * qa));
        q.fixed_view_mut::<3, 3>(6, 6).copy_from(&(Matrix3::identity() * qg));

        cov = f * cov * f.transpose() + q;

        alpha += beta * dt + 0.5 * accel_mid * dt * dt;
        beta += accel_mid * dt;
        gamma = gamma_next;
    }

    // Keep the covariance numerically symmetric.
    cov = 0.5 * (cov + cov.transpose());

    Ok(PreintegratedImu {
        alpha,
        beta,
        gamma,
        dt: samples.last().unwrap().t - samples[0].t,
        covariance: cov,
        bias_gyro_ref: bias_gyro,
        bias_accel_ref: bias_accel,
        noise: *noise,
    })
}

/// Propagates a state across a preintegrated interval under gravity `g_w`.
///
/// ```text
/// p' = p + v dt + 1/2 g dt^2 + R alpha
/// v' = v + g dt + R beta
/// q' = q * gamma
/// ```
///
/// Biases are carried forward unchanged.
pub fn predict(state: &RobotState, pre: &PreintegratedImu, g_w: &Vector3<f64>) -> RobotState {
    let r = state.orientation.rotation_matrix();
    let dt = pre.dt;
    RobotState {
        position: state.position + state.velocity * dt + 0.5 * g_w * dt * dt + r * pre.alpha,
        velocity: state.velocity + g_w * dt + r * pre.beta,
        orientation: state.orientation.mul(&pre.gamma),
        gyro_bias: state.gyro_bias,
        accel_bias: state.accel_bias,
    }
}

/// Expresses two bracketing states as the motion terms a preintegral should
/// have produced.
///
/// Returns `(alpha_expected, beta_expected)`:
///
/// ```text
/// alpha = R_i^T (p_j - p_i - v_i dt - 1/2 g dt^2)
/// beta  = R_i^T (v_j - v_i - g dt)
/// ```
pub fn rearranged_terms(
    state_i: &RobotState,
    state_j: &RobotState,
    g_w: &Vector3<f64>,
    dt: f64,
) -> (Vector3<f64>, Vector3<f64>) {
    let r_it = state_i.orientation.rotation_matrix().transpose();
    let alpha = r_it * (state_j.position - state_i.position - state_i.velocity * dt - 0.5 * g_w * dt * dt);
    let beta = r_it * (state_j.velocity - state_i.velocity - g_w * dt);
    (alpha, beta)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::log_so3;
    use approx::assert_relative_eq;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};
    use std::f64::consts::PI;

    fn constant_stream(gyro: Vector3<f64>, accel: Vector3<f64>, duration: f64, hz: f64) -> Vec<ImuSample> {
        let n = (duration * hz).round() as usize;
        (0..=n)
            .map(|k| ImuSample { t: k as f64 / hz, gyro, accel })
            .collect()
    }

    #[test]
    fn null_motion_terms() {
        let samples = constant_stream(Vector3::zeros(), Vector3::zeros(), 1.0, 100.0);
        let pre = preintegrate(&samples, Vector3::zeros(), Vector3::zeros(), &ImuNoiseModel::default()).unwrap();
        assert!(pre.alpha.norm() < 1e-12);
        assert!(pre.beta.norm() < 1e-12);
        assert!(pre.gamma.angle_to(&Quaternion::identity()) < 1e-12);
        assert_relative_eq!(pre.dt, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn constant_acceleration_closed_form() {
        let samples = constant_stream(Vector3::zeros(), Vector3::new(1.0, 0.0, 0.0), 1.0, 100.0);
        let pre = preintegrate(&samples, Vector3::zeros(), Vector3::zeros(), &ImuNoiseModel::default()).unwrap();
        assert!((pre.alpha - Vector3::new(0.5, 0.0, 0.0)).norm() < 1e-3);
        assert!((pre.beta - Vector3::new(1.0, 0.0, 0.0)).norm() < 1e-3);
    }

    #[test]
    fn constant_rate_closed_form() {
        let samples = constant_stream(Vector3::new(0.0, 0.0, PI / 2.0), Vector3::zeros(), 1.0, 100.0);
        let pre = preintegrate(&samples, Vector3::zeros(), Vector3::zeros(), &ImuNoiseModel::default()).unwrap();
        let expected = exp_so3(&Vector3::new(0.0, 0.0, PI / 2.0));
        assert!(pre.gamma.angle_to(&expected) < 1e-6);
    }

    #[test]
    fn rejects_short_and_non_monotone_streams() {
        let one = vec![ImuSample { t: 0.0, gyro: Vector3::zeros(), accel: Vector3::zeros() }];
        assert!(matches!(
            preintegrate(&one, Vector3::zeros(), Vector3::zeros(), &ImuNoiseModel::default()),
            Err(PreintegrationError::TooFewSamples(1))
        ));
        let bad = vec![
            ImuSample { t: 0.0, gyro: Vector3::zeros(), accel: Vector3::zeros() },
            ImuSample { t: 0.2, gyro: Vector3::zeros(), accel: Vector3::zeros() },
            ImuSample { t: 0.1, gyro: Vector3::zeros(), accel: Vector3::zeros() },
        ];
        assert!(matches!(
            preintegrate(&bad, Vector3::zeros(), Vector3::zeros(), &ImuNoiseModel::default()),
            Err(PreintegrationError::NonMonotoneTimestamps { index: 2 })
        ));
    }

    #[test]
    fn predict_identity_on_null_preintegral() {
        let state = RobotState::identity();
        let pre = PreintegratedImu::zero();
        let out = predict(&state, &pre, &Vector3::zeros());
        assert_eq!(out.position, state.position);
        assert_eq!(out.velocity, state.velocity);
    }

    #[test]
    fn predict_free_fall() {
        let state = RobotState::identity();
        let mut pre = PreintegratedImu::zero();
        pre.dt = 1.0;
        let out = predict(&state, &pre, &Vector3::new(0.0, 0.0, -9.81));
        assert_relative_eq!(out.position.z, -4.905, epsilon = 1e-12);
        assert_relative_eq!(out.velocity.z, -9.81, epsilon = 1e-12);
    }

    /// Brute-force oracle: direct fine-step integration of the same stream in
    /// the world frame, oversampled 10x with linear interpolation.
    fn integrate_direct(
        samples: &[ImuSample],
        state: &RobotState,
        g: &Vector3<f64>,
        oversample: usize,
    ) -> RobotState {
        let mut p = state.position;
        let mut v = state.velocity;
        let mut q = state.orientation;
        for pair in samples.windows(2) {
            let (s0, s1) = (&pair[0], &pair[1]);
            let big_dt = s1.t - s0.t;
            let dt = big_dt / oversample as f64;
            for k in 0..oversample {
                let f0 = k as f64 / oversample as f64;
                let f1 = (k + 1) as f64 / oversample as f64;
                let g0 = s0.gyro.lerp(&s1.gyro, f0);
                let g1 = s0.gyro.lerp(&s1.gyro, f1);
                let a0 = s0.accel.lerp(&s1.accel, f0);
                let a1 = s0.accel.lerp(&s1.accel, f1);
                let q_next = q.mul(&exp_so3(&(0.5 * (g0 + g1) * dt)));
                let acc_w = 0.5 * (q.rotate(&a0) + q_next.rotate(&a1)) + g;
                p += v * dt + 0.5 * acc_w * dt * dt;
                v += acc_w * dt;
                q = q_next;
            }
        }
        RobotState { position: p, velocity: v, orientation: q, ..*state }
    }

    #[test]
    fn predict_matches_fine_integration_on_random_stream() {
        let mut rng = StdRng::seed_from_u64(99);
        let g = Vector3::new(0.0, 0.0, -9.81);
        for _ in 0..20 {
            let samples: Vec<ImuSample> = (0..=100)
                .map(|k| {
                    let t = k as f64 / 100.0;
                    ImuSample {
                        t,
                        gyro: Vector3::new(
                            0.4 * (2.0 * t).sin() + rng.gen_range(-0.05..0.05),
                            0.3 * (1.3 * t).cos(),
                            0.5 * t,
                        ),
                        accel: Vector3::new(
                            (3.0 * t).sin() + rng.gen_range(-0.05..0.05),
                            0.5 * (2.0 * t).cos(),
                            9.81 + 0.2 * t,
                        ),
                    }
                })
                .collect();
            let state = RobotState {
                velocity: Vector3::new(0.3, -0.2, 0.1),
                ..RobotState::identity()
            };
            let pre = preintegrate(&samples, Vector3::zeros(), Vector3::zeros(), &ImuNoiseModel::default()).unwrap();
            let predicted = predict(&state, &pre, &g);
            let direct = integrate_direct(&samples, &state, &g, 10);
            assert!(
                (predicted.position - direct.position).norm() < 1e-4,
                "position gap {}",
                (predicted.position - direct.position).norm()
            );
            assert!((predicted.velocity - direct.velocity).norm() < 1e-4);
            assert!(predicted.orientation.angle_to(&direct.orientation) < 1e-4);
        }
    }

    #[test]
    fn rearranged_terms_invert_predict() {
        let mut rng = StdRng::seed_from_u64(123);
        let g = Vector3::new(0.13, -0.2, -9.81);
        for _ in 0..50 {
            let samples: Vec<ImuSample> = (0..=50)
                .map(|k| ImuSample {
                    t: k as f64 * 0.01,
                    gyro: Vector3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)),
                    accel: Vector3::new(rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0), rng.gen_range(5.0..12.0)),
                })
                .collect();
            let state_i = RobotState {
                position: Vector3::new(rng.gen_range(-3.0..3.0), 0.0, 1.0),
                orientation: exp_so3(&Vector3::new(0.2, rng.gen_range(-0.5..0.5), 1.0)),
                velocity: Vector3::new(0.5, rng.gen_range(-1.0..1.0), 0.0),
                ..RobotState::identity()
            };
            let pre = preintegrate(&samples, Vector3::zeros(), Vector3::zeros(), &ImuNoiseModel::default()).unwrap();
            let state_j = predict(&state_i, &pre, &g);
            let (alpha_e, beta_e) = rearranged_terms(&state_i, &state_j, &g, pre.dt);
            assert!((alpha_e - pre.alpha).norm() < 1e-9);
            assert!((beta_e - pre.beta).norm() < 1e-9);
        }
    }

    #[test]
    fn rearranged_terms_direct_formula() {
        // Zero gravity, zero velocity: alpha reduces to the rotated position
        // difference.
        let state_i = RobotState {
            orientation: exp_so3(&Vector3::new(0.0, 0.0, 0.7)),
            ..RobotState::identity()
        };
        let state_j = RobotState {
            position: Vector3::new(2.0, -1.0, 0.5),
            ..state_i
        };
        let (alpha_e, _) = rearranged_terms(&state_i, &state_j, &Vector3::zeros(), 1.0);
        let expected = state_i.orientation.rotation_matrix().transpose() * state_j.position;
        assert!((alpha_e - expected).norm() < 1e-12);
    }

    #[test]
    fn covariance_trace_monotone_in_time() {
        let samples = constant_stream(Vector3::new(0.1, 0.0, 0.2), Vector3::new(0.3, 9.8, 0.0), 2.0, 100.0);
        let noise = ImuNoiseModel::default();
        let mut last_trace = 0.0;
        for n in [20, 50, 100, 150, 200] {
            let pre = preintegrate(&samples[..=n], Vector3::zeros(), Vector3::zeros(), &noise).unwrap();
            let tr = pre.covariance.trace();
            assert!(tr >= last_trace, "trace shrank: {tr} < {last_trace}");
            // symmetric PSD
            assert!((pre.covariance - pre.covariance.transpose()).norm() < 1e-15);
            let eig = pre.covariance.symmetric_eigenvalues();
            assert!(eig.iter().all(|&l| l > -1e-18));
            last_trace = tr;
        }
    }

    #[test]
    fn gamma_log_matches_constant_rate() {
        let omega = Vector3::new(0.3, -0.2, 0.9);
        let samples = constant_stream(omega, Vector3::zeros(), 1.0, 200.0);
        let pre = preintegrate(&samples, Vector3::zeros(), Vector3::zeros(), &ImuNoiseModel::default()).unwrap();
        assert!((log_so3(&pre.gamma) - omega).norm() < 1e-9);
    }
}
