//! Ground-truthed synthetic measurement generation.
//!
//! A [`WorldModel`] holds analytic surfaces (for sonar ray-casting) and
//! landmarks sampled on them, each carrying a stable binary descriptor
//! signature. Sensor streams are synthesized from an analytic
//! [`Trajectory`]: IMU from the second derivatives plus bias random walks,
//! stereo pixels by projection with visibility checks, sonar ranges by
//! closed-form ray-casting against the surfaces, and pressure-depth from
//! the vertical coordinate. Every stream is seeded independently, so a
//! fixed seed reproduces the log byte for byte.

pub mod log;
pub mod presets;
pub mod trajectory;

pub use log::{CameraFeature, LogError, LogRecord, MeasurementLog};
pub use trajectory::{Trajectory, YawMode};

use crate::factors::{DepthMeasurement, SonarMeasurement, StereoCameraModel};
use crate::geometry::{ExtrinsicCalibration, Transform};
use crate::imu::{ImuNoiseModel, ImuSample};
use crate::loop_closure::BinaryDescriptor;
use nalgebra::{Vector2, Vector3};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Analytic surface for sonar ray-casting. Landmarks are sampled on these,
/// so visual patches around a sonar return are coplanar with it by
/// construction.
#[derive(Debug, Clone)]
pub enum Surface {
    /// Cylinder shell around an axis line, with optional axial extent and
    /// an optional angular gap (radians, measured around the axis from a
    /// fixed reference) where the shell is open.
    Cylinder {
        point: Vector3<f64>,
        axis: Vector3<f64>,
        radius: f64,
        span: Option<(f64, f64)>,
        gap: Option<(f64, f64)>,
    },
    /// Finite rectangle spanned by two edge vectors.
    Rect { origin: Vector3<f64>, u: Vector3<f64>, v: Vector3<f64> },
}

impl Surface {
    /// Perpendicular basis of a cylinder axis; the gap angle is measured in
    /// this basis.
    fn axis_basis(axis: &Vector3<f64>) -> (Vector3<f64>, Vector3<f64>) {
        let a = axis.normalize();
        let seed = if a.x.abs() < 0.9 { Vector3::x() } else { Vector3::y() };
        let e1 = (seed - a * seed.dot(&a)).normalize();
        let e2 = a.cross(&e1);
        (e1, e2)
    }

    /// Distance along the ray to the nearest intersection, if any.
    pub fn raycast(&self, origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<f64> {
        match self {
            Surface::Cylinder { point, axis, radius, span, gap } => {
                let a_unit = axis.normalize();
                let (e1, e2) = Self::axis_basis(&a_unit);
                // Work in the plane perpendicular to the axis.
                let rel = origin - point;
                let o = Vector2::new(rel.dot(&e1), rel.dot(&e2));
                let d = Vector2::new(dir.dot(&e1), dir.dot(&e2));
                let a = d.norm_squared();
                if a < 1e-12 {
                    return None; // ray parallel to the axis
                }
                let b = 2.0 * o.dot(&d);
                let c = o.norm_squared() - radius * radius;
                let disc = b * b - 4.0 * a * c;
                if disc < 0.0 {
                    return None;
                }
                let sq = disc.sqrt();
                let candidates = [(-b - sq) / (2.0 * a), (-b + sq) / (2.0 * a)];
                for s in candidates {
                    if s <= 1e-9 {
                        continue;
                    }
                    let hit = origin + dir * s;
                    if let Some((lo, hi)) = span {
                        let along = (hit - point).dot(&a_unit);
                        if along < *lo || along > *hi {
                            continue;
                        }
                    }
                    if let Some((g0, g1)) = gap {
                        let rel_hit = hit - point;
                        let ang = rel_hit
                            .dot(&e2)
                            .atan2(rel_hit.dot(&e1))
                            .rem_euclid(std::f64::consts::TAU);
                        if ang >= *g0 && ang < *g1 {
                            continue; // beam passes through the opening
                        }
                    }
                    return Some(s);
                }
                None
            }
            Surface::Rect { origin: o, u, v } => {
                let normal = u.cross(v);
                let denom = dir.dot(&normal);
                if denom.abs() < 1e-12 {
                    return None;
                }
                let s = (o - origin).dot(&normal) / denom;
                if s <= 1e-9 {
                    return None;
                }
                let hit = origin + dir * s - o;
                let a = hit.dot(u) / u.norm_squared();
                let b = hit.dot(v) / v.norm_squared();
                if (0.0..=1.0).contains(&a) && (0.0..=1.0).contains(&b) {
                    Some(s)
                } else {
                    None
                }
            }
        }
    }

    /// Uniformly samples a point on the surface.
    fn sample_point<R: Rng>(&self, rng: &mut R) -> Vector3<f64> {
        match self {
            Surface::Cylinder { point, axis, radius, span, gap } => {
                let a_unit = axis.normalize();
                let (e1, e2) = Self::axis_basis(&a_unit);
                let (lo, hi) = span.unwrap_or((-1.0, 1.0));
                loop {
                    let theta = rng.gen_range(0.0..std::f64::consts::TAU);
                    if let Some((g0, g1)) = gap {
                        if theta >= *g0 && theta < *g1 {
                            continue;
                        }
                    }
                    let along = rng.gen_range(lo..hi);
                    return point + a_unit * along + (e1 * theta.cos() + e2 * theta.sin()) * *radius;
                }
            }
            Surface::Rect { origin, u, v } => {
                origin + u * rng.gen_range(0.0..1.0) + v * rng.gen_range(0.0..1.0)
            }
        }
    }
}

/// A world landmark with its fixed descriptor signature.
#[derive(Debug, Clone, Copy)]
pub struct SimLandmark {
    pub id: u64,
    pub position: Vector3<f64>,
    pub descriptor: BinaryDescriptor,
}

/// Surfaces, landmarks and gravity.
#[derive(Debug, Clone)]
pub struct WorldModel {
    pub surfaces: Vec<Surface>,
    pub landmarks: Vec<SimLandmark>,
    pub gravity: Vector3<f64>,
}

impl WorldModel {
    /// Nearest surface intersection along a ray.
    pub fn raycast(&self, origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<f64> {
        self.surfaces
            .iter()
            .filter_map(|s| s.raycast(origin, dir))
            .min_by(|a, b| a.partial_cmp(b).unwrap())
    }

    fn sample_landmarks(surfaces: &[Surface], count: usize, seed: u64) -> Vec<SimLandmark> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut landmarks = Vec::with_capacity(count);
        for id in 0..count {
            let surface = &surfaces[id % surfaces.len()];
            landmarks.push(SimLandmark {
                id: id as u64,
                position: surface.sample_point(&mut rng),
                descriptor: BinaryDescriptor::random(&mut rng),
            });
        }
        landmarks
    }

    /// Circular room: a vertical cylinder wall around the origin.
    pub fn circular_room(radius: f64, height: f64, n_landmarks: usize, seed: u64) -> Self {
        let surfaces = vec![Surface::Cylinder {
            point: Vector3::zeros(),
            axis: Vector3::z(),
            radius,
            span: Some((-height / 2.0, height / 2.0)),
            gap: None,
        }];
        let landmarks = Self::sample_landmarks(&surfaces, n_landmarks, seed);
        WorldModel { surfaces, landmarks, gravity: Vector3::new(0.0, 0.0, -9.81) }
    }

    /// Straight tunnel along x: a horizontal cylinder shell.
    pub fn tunnel(radius: f64, length: f64, n_landmarks: usize, seed: u64) -> Self {
        let surfaces = vec![Surface::Cylinder {
            point: Vector3::zeros(),
            axis: Vector3::x(),
            radius,
            span: Some((-length / 2.0, length / 2.0)),
            gap: None,
        }];
        let landmarks = Self::sample_landmarks(&surfaces, n_landmarks, seed);
        WorldModel { surfaces, landmarks, gravity: Vector3::new(0.0, 0.0, -9.81) }
    }

    /// Rectangular room: four flat walls around the origin. Flat surfaces
    /// keep the sonar patch centroid on the ensonified plane, so the
    /// coplanarity assumption is satisfied to second order.
    pub fn box_room(half_x: f64, half_y: f64, height: f64, n_landmarks: usize, seed: u64) -> Self {
        let z0 = -height / 2.0;
        let up = Vector3::new(0.0, 0.0, height);
        let surfaces = vec![
            Surface::Rect {
                origin: Vector3::new(half_x, -half_y, z0),
                u: Vector3::new(0.0, 2.0 * half_y, 0.0),
                v: up,
            },
            Surface::Rect {
                origin: Vector3::new(-half_x, -half_y, z0),
                u: Vector3::new(0.0, 2.0 * half_y, 0.0),
                v: up,
            },
            Surface::Rect {
                origin: Vector3::new(-half_x, half_y, z0),
                u: Vector3::new(2.0 * half_x, 0.0, 0.0),
                v: up,
            },
            Surface::Rect {
                origin: Vector3::new(-half_x, -half_y, z0),
                u: Vector3::new(2.0 * half_x, 0.0, 0.0),
                v: up,
            },
        ];
        let landmarks = Self::sample_landmarks(&surfaces, n_landmarks, seed);
        WorldModel { surfaces, landmarks, gravity: Vector3::new(0.0, 0.0, -9.81) }
    }

    /// Annular corridor between two vertical cylinder walls; suits loop
    /// trajectories that run between the walls.
    pub fn annular_corridor(
        r_inner: f64,
        r_outer: f64,
        height: f64,
        n_landmarks: usize,
        seed: u64,
    ) -> Self {
        let surfaces = vec![
            Surface::Cylinder {
                point: Vector3::zeros(),
                axis: Vector3::z(),
                radius: r_inner,
                span: Some((-height / 2.0, height / 2.0)),
                gap: None,
            },
            Surface::Cylinder {
                point: Vector3::zeros(),
                axis: Vector3::z(),
                radius: r_outer,
                span: Some((-height / 2.0, height / 2.0)),
                gap: None,
            },
        ];
        let landmarks = Self::sample_landmarks(&surfaces, n_landmarks, seed);
        WorldModel { surfaces, landmarks, gravity: Vector3::new(0.0, 0.0, -9.81) }
    }
}

/// Sensor sampling rates, paper-typical hardware defaults.
#[derive(Debug, Clone, Copy)]
pub struct SensorRates {
    pub imu_hz: f64,
    pub camera_hz: f64,
    /// Seconds per full sonar head revolution.
    pub sonar_rev_period: f64,
    /// Ping rate of the scanning head.
    pub sonar_hz: f64,
    pub depth_hz: f64,
    /// Ground-truth channel rate.
    pub truth_hz: f64,
}

impl Default for SensorRates {
    fn default() -> Self {
        SensorRates {
            imu_hz: 100.0,
            camera_hz: 15.0,
            sonar_rev_period: 4.0,
            sonar_hz: 30.0,
            depth_hz: 1.0,
            truth_hz: 15.0,
        }
    }
}

/// Noise configuration; zero everywhere gives measurements exactly
/// consistent with the ground truth.
#[derive(Debug, Clone, Copy)]
pub struct NoiseSpec {
    pub pixel_sigma: f64,
    pub imu: ImuNoiseModel,
    /// Per-axis accelerometer bias random-walk densities (the simulation
    /// side of the scalar model).
    pub accel_bias_walk: Vector3<f64>,
    pub gyro_bias_walk: Vector3<f64>,
    pub sonar_sigma: f64,
    pub depth_sigma: f64,
    /// Probability that each descriptor bit flips per observation.
    pub descriptor_flip_rate: f64,
    pub seed: u64,
}

impl NoiseSpec {
    pub fn zero(seed: u64) -> Self {
        NoiseSpec {
            pixel_sigma: 0.0,
            imu: ImuNoiseModel { sigma_g: 0.0, sigma_a: 0.0, sigma_bg: 0.0, sigma_ba: 0.0, g_mag: 9.81 },
            accel_bias_walk: Vector3::zeros(),
            gyro_bias_walk: Vector3::zeros(),
            sonar_sigma: 0.0,
            depth_sigma: 0.0,
            descriptor_flip_rate: 0.0,
            seed,
        }
    }

    /// Mid-grade sensor noise.
    pub fn nominal(seed: u64) -> Self {
        let imu = ImuNoiseModel::default();
        NoiseSpec {
            pixel_sigma: 0.5,
            imu,
            accel_bias_walk: Vector3::from_element(imu.sigma_ba),
            gyro_bias_walk: Vector3::from_element(imu.sigma_bg),
            sonar_sigma: 0.02,
            depth_sigma: 0.01,
            descriptor_flip_rate: 0.02,
            seed,
        }
    }
}

/// Visibility limits of the synthetic camera.
#[derive(Debug, Clone, Copy)]
pub struct VisionLimits {
    pub min_depth: f64,
    pub max_depth: f64,
    /// Keep at most this many features per frame (nearest first).
    pub max_features: usize,
}

impl Default for VisionLimits {
    fn default() -> Self {
        VisionLimits { min_depth: 0.3, max_depth: 12.0, max_features: 60 }
    }
}

fn gaussian<R: Rng>(rng: &mut R) -> f64 {
    // Box-Muller; consumes two uniforms deterministically.
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Inertial stream with white noise and bias random walks.
///
/// The accelerometer reports specific force `R^T (a - g)` plus bias and
/// noise; the gyro reports the body angular rate.
pub fn synthesize_imu(
    traj: &Trajectory,
    gravity: &Vector3<f64>,
    noise: &NoiseSpec,
    duration: f64,
    rates: &SensorRates,
) -> Vec<ImuSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(noise.seed.wrapping_add(0x494d55));
    let dt = 1.0 / rates.imu_hz;
    let n = (duration * rates.imu_hz).round() as usize;
    let mut bias_g = Vector3::zeros();
    let mut bias_a = Vector3::zeros();
    let white_g = noise.imu.sigma_g * rates.imu_hz.sqrt();
    let white_a = noise.imu.sigma_a * rates.imu_hz.sqrt();
    let mut out = Vec::with_capacity(n + 1);
    for k in 0..=n {
        let t = k as f64 * dt;
        let r_t = traj.orientation(t).rotation_matrix().transpose();
        let gyro = traj.angular_velocity(t)
            + bias_g
            + Vector3::new(gaussian(&mut rng), gaussian(&mut rng), gaussian(&mut rng)) * white_g;
        let accel = r_t * (traj.acceleration(t) - gravity)
            + bias_a
            + Vector3::new(gaussian(&mut rng), gaussian(&mut rng), gaussian(&mut rng)) * white_a;
        out.push(ImuSample { t, gyro, accel });
        let sq = dt.sqrt();
        bias_g += Vector3::new(
            noise.gyro_bias_walk.x * sq * gaussian(&mut rng),
            noise.gyro_bias_walk.y * sq * gaussian(&mut rng),
            noise.gyro_bias_walk.z * sq * gaussian(&mut rng),
        );
        bias_a += Vector3::new(
            noise.accel_bias_walk.x * sq * gaussian(&mut rng),
            noise.accel_bias_walk.y * sq * gaussian(&mut rng),
            noise.accel_bias_walk.z * sq * gaussian(&mut rng),
        );
    }
    out
}

/// Stereo feature observations per frame: landmarks projected into both
/// cameras with frustum, depth-range and image-bound checks; pixel noise
/// and per-observation descriptor bit flips applied.
pub fn synthesize_vision(
    traj: &Trajectory,
    world: &WorldModel,
    camera: &StereoCameraModel,
    calib: &ExtrinsicCalibration,
    noise: &NoiseSpec,
    limits: &VisionLimits,
    duration: f64,
    rates: &SensorRates,
) -> Vec<(f64, u64, Vec<CameraFeature>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(noise.seed.wrapping_add(0x43414d));
    let n = (duration * rates.camera_hz).floor() as usize;
    let mut frames = Vec::with_capacity(n + 1);
    for k in 0..=n {
        let t = k as f64 / rates.camera_hz;
        let state = traj.state(t);
        let body_inv = state.pose().inverse();
        let t_cl = calib.t_ic_left.inverse();
        let t_cr = calib.t_ic_right.inverse();

        let mut visible: Vec<(f64, &SimLandmark, Vector2<f64>, Vector2<f64>)> = Vec::new();
        for lm in &world.landmarks {
            let in_body = body_inv.apply(&lm.position);
            let left_cam = t_cl.apply(&in_body);
            let right_cam = t_cr.apply(&in_body);
            if left_cam.z < limits.min_depth || left_cam.z > limits.max_depth {
                continue;
            }
            let (Some(lp), Some(rp)) =
                (camera.left.project(&left_cam), camera.right.project(&right_cam))
            else {
                continue;
            };
            if camera.in_view(&lp) && camera.in_view(&rp) {
                visible.push((left_cam.z, lm, lp, rp));
            }
        }
        visible.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.id.cmp(&b.1.id)));
        visible.truncate(limits.max_features);
        // Deterministic output order by landmark id.
        visible.sort_by_key(|(_, lm, _, _)| lm.id);

        let mut features = Vec::with_capacity(visible.len());
        for (_, lm, lp, rp) in visible {
            let jitter = |px: Vector2<f64>, rng: &mut ChaCha8Rng| {
                Vector2::new(
                    px.x + noise.pixel_sigma * gaussian(rng),
                    px.y + noise.pixel_sigma * gaussian(rng),
                )
            };
            let descriptor = if noise.descriptor_flip_rate > 0.0 {
                lm.descriptor.with_bit_flips(&mut rng, noise.descriptor_flip_rate)
            } else {
                lm.descriptor
            };
            features.push(CameraFeature {
                landmark_id: lm.id,
                left_px: jitter(lp, &mut rng),
                right_px: jitter(rp, &mut rng),
                descriptor,
            });
        }
        frames.push((t, k as u64, features));
    }
    frames
}

/// Maximum sonar range, meters.
pub const SONAR_MAX_RANGE: f64 = 20.0;

/// Scanning sonar pings: the head angle advances continuously (one
/// revolution per `sonar_rev_period`); each ping ray-casts the world in the
/// sonar's x-y plane. Rays that miss every surface produce no measurement.
pub fn synthesize_sonar(
    traj: &Trajectory,
    world: &WorldModel,
    calib: &ExtrinsicCalibration,
    noise: &NoiseSpec,
    duration: f64,
    rates: &SensorRates,
) -> Vec<SonarMeasurement> {
    let mut rng = ChaCha8Rng::seed_from_u64(noise.seed.wrapping_add(0x534f4e));
    let n = (duration * rates.sonar_hz).floor() as usize;
    let mut out = Vec::new();
    for k in 0..=n {
        let t = k as f64 / rates.sonar_hz;
        let head =
            (std::f64::consts::TAU * t / rates.sonar_rev_period).rem_euclid(std::f64::consts::TAU);
        let state = traj.state(t);
        let t_ws: Transform = state.pose().compose(&calib.t_is);
        let origin = t_ws.translation;
        let dir = t_ws.rotation * Vector3::new(head.cos(), head.sin(), 0.0);
        if let Some(range) = world.raycast(&origin, &dir) {
            if range <= SONAR_MAX_RANGE {
                let measured = range + noise.sonar_sigma * gaussian(&mut rng);
                if measured > 0.0 {
                    out.push(SonarMeasurement { t, range: measured, head_angle: head });
                }
            }
        }
    }
    out
}

/// Pressure-depth stream: raw reading grows as the platform descends.
/// `d_surface` is the reading at world z = 0.
pub fn synthesize_depth(
    traj: &Trajectory,
    noise: &NoiseSpec,
    d_surface: f64,
    duration: f64,
    rates: &SensorRates,
) -> Vec<DepthMeasurement> {
    let mut rng = ChaCha8Rng::seed_from_u64(noise.seed.wrapping_add(0x444550));
    let n = (duration * rates.depth_hz).floor() as usize;
    (0..=n)
        .map(|k| {
            let t = k as f64 / rates.depth_hz;
            let z = traj.position(t).z;
            DepthMeasurement { t, reading: d_surface - z + noise.depth_sigma * gaussian(&mut rng) }
        })
        .collect()
}

/// Full scenario: all sensor streams merged into one time-sorted log with a
/// ground-truth channel.
pub struct Scenario {
    pub trajectory: Trajectory,
    pub world: WorldModel,
    pub camera: StereoCameraModel,
    pub calib: ExtrinsicCalibration,
    pub noise: NoiseSpec,
    pub limits: VisionLimits,
    pub rates: SensorRates,
    pub duration: f64,
    /// Pressure reading at world z = 0.
    pub d_surface: f64,
}

impl Scenario {
    pub fn generate(&self) -> MeasurementLog {
        let mut log = MeasurementLog::default();
        for s in
            synthesize_imu(&self.trajectory, &self.world.gravity, &self.noise, self.duration, &self.rates)
        {
            log.records.push(LogRecord::Imu(s));
        }
        for (t, frame_id, features) in synthesize_vision(
            &self.trajectory,
            &self.world,
            &self.camera,
            &self.calib,
            &self.noise,
            &self.limits,
            self.duration,
            &self.rates,
        ) {
            for feature in features {
                log.records.push(LogRecord::Camera { t, frame_id, feature });
            }
        }
        for s in synthesize_sonar(
            &self.trajectory,
            &self.world,
            &self.calib,
            &self.noise,
            self.duration,
            &self.rates,
        ) {
            log.records.push(LogRecord::Sonar(s));
        }
        for d in synthesize_depth(&self.trajectory, &self.noise, self.d_surface, self.duration, &self.rates)
        {
            log.records.push(LogRecord::Depth(d));
        }
        let n_truth = (self.duration * self.rates.truth_hz).floor() as usize;
        for k in 0..=n_truth {
            let t = k as f64 / self.rates.truth_hz;
            log.records.push(LogRecord::GroundTruth { t, state: self.trajectory.state(t) });
        }
        log.sort();
        log
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::factors::depth_from_raw;
    use crate::geometry::{exp_so3, RobotState};
    use crate::imu::{predict, preintegrate};
    use approx::assert_relative_eq;

    fn default_camera() -> StereoCameraModel {
        StereoCameraModel::symmetric(400.0, 400.0, 320.0, 240.0, 640, 480)
    }

    #[test]
    fn static_trajectory_measures_gravity_only() {
        let traj = Trajectory::Line {
            start: Vector3::new(1.0, 2.0, -3.0),
            velocity: Vector3::zeros(),
            yaw: YawMode::Fixed(0.0),
        };
        let noise = NoiseSpec::zero(1);
        let samples =
            synthesize_imu(&traj, &Vector3::new(0.0, 0.0, -9.81), &noise, 1.0, &SensorRates::default());
        for s in &samples {
            assert!(s.gyro.norm() < 1e-9);
            assert_relative_eq!(s.accel, Vector3::new(0.0, 0.0, 9.81), epsilon = 1e-6);
        }
    }

    #[test]
    fn circular_orbit_centripetal_magnitude() {
        let traj = Trajectory::Circle {
            center: Vector3::zeros(),
            radius: 2.0,
            period: 10.0,
            z_amplitude: 0.0,
            z_period: 1.0,
            yaw: YawMode::Fixed(0.0),
        };
        let noise = NoiseSpec::zero(2);
        let g = Vector3::new(0.0, 0.0, -9.81);
        let samples = synthesize_imu(&traj, &g, &noise, 10.0, &SensorRates::default());
        let expected = 4.0 * std::f64::consts::PI * std::f64::consts::PI * 2.0 / 100.0;
        for s in samples.iter().step_by(97) {
            let lateral = Vector3::new(s.accel.x, s.accel.y, 0.0);
            assert!((lateral.norm() - expected).abs() < 1e-3, "{} vs {expected}", lateral.norm());
        }
    }

    #[test]
    fn reintegrating_noiseless_stream_reproduces_trajectory() {
        let traj = Trajectory::Circle {
            center: Vector3::new(0.0, 0.0, -1.0),
            radius: 3.0,
            period: 15.0,
            z_amplitude: 0.5,
            z_period: 7.0,
            yaw: YawMode::FollowVelocity,
        };
        let g = Vector3::new(0.0, 0.0, -9.81);
        let noise = NoiseSpec::zero(3);
        let rates = SensorRates::default();
        let samples = synthesize_imu(&traj, &g, &noise, 20.0, &rates);

        // Integrate one second at a time through the preintegration path.
        let mut state = traj.state(0.0);
        let chunk = rates.imu_hz as usize;
        let mut idx = 0;
        while idx + chunk < samples.len() {
            let pre = preintegrate(
                &samples[idx..=idx + chunk],
                Vector3::zeros(),
                Vector3::zeros(),
                &noise.imu,
            )
            .unwrap();
            state = predict(&state, &pre, &g);
            idx += chunk;
        }
        let t_end = samples[idx].t;
        let expected = traj.position(t_end);
        assert!(
            (state.position - expected).norm() < 1e-3,
            "drift {} after {t_end} s",
            (state.position - expected).norm()
        );
    }

    #[test]
    fn landmark_on_axis_projects_to_principal_point() {
        let mut world = WorldModel::circular_room(20.0, 10.0, 1, 4);
        world.landmarks[0].position = Vector3::new(2.0, 0.0, 0.0);
        let traj = Trajectory::Line {
            start: Vector3::zeros(),
            velocity: Vector3::zeros(),
            yaw: YawMode::Fixed(0.0),
        };
        let calib = ExtrinsicCalibration::forward_stereo(0.0);
        let frames = synthesize_vision(
            &traj,
            &world,
            &default_camera(),
            &calib,
            &NoiseSpec::zero(5),
            &VisionLimits::default(),
            0.2,
            &SensorRates::default(),
        );
        let f = &frames[0].2[0];
        assert_relative_eq!(f.left_px, Vector2::new(320.0, 240.0), epsilon = 1e-9);
    }

    #[test]
    fn behind_camera_landmarks_absent() {
        let mut world = WorldModel::circular_room(20.0, 10.0, 1, 6);
        world.landmarks[0].position = Vector3::new(-5.0, 0.0, 0.0);
        let traj = Trajectory::Line {
            start: Vector3::zeros(),
            velocity: Vector3::zeros(),
            yaw: YawMode::Fixed(0.0),
        };
        let frames = synthesize_vision(
            &traj,
            &world,
            &default_camera(),
            &ExtrinsicCalibration::forward_stereo(0.1),
            &NoiseSpec::zero(7),
            &VisionLimits::default(),
            0.2,
            &SensorRates::default(),
        );
        assert!(frames[0].2.is_empty());
    }

    #[test]
    fn stereo_disparity_matches_depth() {
        let baseline = 0.12;
        let mut world = WorldModel::circular_room(20.0, 10.0, 1, 8);
        world.landmarks[0].position = Vector3::new(5.0, 0.3, -0.2);
        let traj = Trajectory::Line {
            start: Vector3::zeros(),
            velocity: Vector3::zeros(),
            yaw: YawMode::Fixed(0.0),
        };
        let camera = default_camera();
        let frames = synthesize_vision(
            &traj,
            &world,
            &camera,
            &ExtrinsicCalibration::forward_stereo(baseline),
            &NoiseSpec::zero(9),
            &VisionLimits::default(),
            0.2,
            &SensorRates::default(),
        );
        let f = &frames[0].2[0];
        let disparity = f.left_px.x - f.right_px.x;
        assert_relative_eq!(disparity, 400.0 * baseline / 5.0, epsilon = 1e-9);
    }

    #[test]
    fn sonar_sees_circular_wall_at_constant_range() {
        let world = WorldModel::circular_room(3.0, 6.0, 10, 10);
        let traj = Trajectory::Line {
            start: Vector3::zeros(),
            velocity: Vector3::zeros(),
            yaw: YawMode::Fixed(0.0),
        };
        let pings = synthesize_sonar(
            &traj,
            &world,
            &ExtrinsicCalibration::collocated(),
            &NoiseSpec::zero(11),
            8.0,
            &SensorRates::default(),
        );
        assert!(!pings.is_empty());
        for p in &pings {
            assert_relative_eq!(p.range, 3.0, epsilon = 1e-9);
        }
        // Head makes a full revolution every 4 seconds.
        let at_4s = pings.iter().find(|p| (p.t - 4.0).abs() < 1e-9).unwrap();
        assert_relative_eq!(at_4s.head_angle, 0.0, epsilon = 1e-9);
    }

    #[test]
    fn sonar_beam_through_gap_drops_measurement() {
        let world = WorldModel {
            surfaces: vec![Surface::Cylinder {
                point: Vector3::zeros(),
                axis: Vector3::z(),
                radius: 3.0,
                span: None,
                gap: Some((0.0, 0.5)),
            }],
            landmarks: vec![],
            gravity: Vector3::new(0.0, 0.0, -9.81),
        };
        // Beam straight along +x (angle 0) passes through the opening.
        assert!(world.raycast(&Vector3::zeros(), &Vector3::x()).is_none());
        // Beam along +y hits the wall.
        assert_relative_eq!(
            world.raycast(&Vector3::zeros(), &Vector3::y()).unwrap(),
            3.0,
            epsilon = 1e-9
        );
    }

    #[test]
    fn raycast_matches_brute_force() {
        let world = WorldModel::annular_corridor(5.0, 9.0, 6.0, 40, 13);
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..200 {
            let origin = Vector3::new(
                rng.gen_range(-8.0..8.0),
                rng.gen_range(-8.0..8.0),
                rng.gen_range(-2.0..2.0),
            );
            let angle = rng.gen_range(0.0..std::f64::consts::TAU);
            let dir = Vector3::new(angle.cos(), angle.sin(), 0.0);
            let fast = world.raycast(&origin, &dir);

            // Brute force: march along the ray for the first wall crossing,
            // then refine by bisection.
            let radial = |p: &Vector3<f64>| Vector3::new(p.x, p.y, 0.0).norm();
            let region = |p: &Vector3<f64>| -> u8 {
                let r = radial(p);
                if r < 5.0 {
                    0
                } else if r < 9.0 {
                    1
                } else {
                    2
                }
            };
            let start = region(&origin);
            let step = 1e-3;
            let mut s = step;
            let mut brute: Option<f64> = None;
            while s < 30.0 {
                if region(&(origin + dir * s)) != start {
                    let (mut lo, mut hi) = (s - step, s);
                    for _ in 0..60 {
                        let mid = 0.5 * (lo + hi);
                        if region(&(origin + dir * mid)) != start {
                            hi = mid;
                        } else {
                            lo = mid;
                        }
                    }
                    brute = Some(hi);
                    break;
                }
                s += step;
            }
            match (fast, brute) {
                (Some(a), Some(b)) => assert!((a - b).abs() < 1e-6, "{a} vs {b}"),
                (None, None) => {}
                (a, b) => {
                    panic!("raycast mismatch: fast {a:?} brute {b:?} origin {origin:?} dir {dir:?}")
                }
            }
        }
    }

    #[test]
    fn depth_stream_tracks_vertical_motion() {
        let traj = Trajectory::Line {
            start: Vector3::new(0.0, 0.0, -1.0),
            velocity: Vector3::new(0.0, 0.0, -0.2),
            yaw: YawMode::Fixed(0.0),
        };
        let stream = synthesize_depth(&traj, &NoiseSpec::zero(15), 10.0, 10.0, &SensorRates::default());
        // Descending 2 m raises the raw reading by 2.
        assert_relative_eq!(stream[0].reading, 11.0, epsilon = 1e-12);
        assert_relative_eq!(stream.last().unwrap().reading, 13.0, epsilon = 1e-12);
        // Round trip through the conversion recovers z(t).
        let d0 = stream[0].reading;
        for d in &stream {
            let z = depth_from_raw(d.reading, d0, 0.0) + traj.position(0.0).z;
            assert_relative_eq!(z, traj.position(d.t).z, epsilon = 1e-9);
        }
    }

    #[test]
    fn logs_are_bit_reproducible_under_seed() {
        let scenario = Scenario {
            trajectory: Trajectory::Circle {
                center: Vector3::new(0.0, 0.0, -2.0),
                radius: 4.0,
                period: 20.0,
                z_amplitude: 0.4,
                z_period: 9.0,
                yaw: YawMode::FollowVelocity,
            },
            world: WorldModel::circular_room(8.0, 8.0, 120, 42),
            camera: default_camera(),
            calib: ExtrinsicCalibration::forward_stereo(0.12),
            noise: NoiseSpec::nominal(42),
            limits: VisionLimits::default(),
            rates: SensorRates::default(),
            duration: 3.0,
            d_surface: 10.0,
        };
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.log");
        let p2 = dir.path().join("b.log");
        scenario.generate().write(&p1).unwrap();
        scenario.generate().write(&p2).unwrap();
        let a = std::fs::read(&p1).unwrap();
        let b = std::fs::read(&p2).unwrap();
        assert_eq!(a, b);
        // Parse back and spot-check types.
        let log = MeasurementLog::read(&p1).unwrap();
        assert!(log.records.iter().any(|r| matches!(r, LogRecord::Imu(_))));
        assert!(log.records.iter().any(|r| matches!(r, LogRecord::Camera { .. })));
        assert!(log.records.iter().any(|r| matches!(r, LogRecord::Sonar(_))));
        assert!(log.records.iter().any(|r| matches!(r, LogRecord::Depth(_))));
        assert!(log.records.iter().any(|r| matches!(r, LogRecord::GroundTruth { .. })));
        for pair in log.records.windows(2) {
            assert!(pair[1].t() >= pair[0].t());
        }
    }

    #[test]
    fn zero_noise_log_residuals_vanish_at_truth() {
        // Reprojection and depth residuals evaluated at ground truth are
        // numerically zero for a noiseless log; a sonar return whose patch
        // is exactly the hit point likewise.
        use crate::factors::{self, CameraSide, Landmark};
        let calib = ExtrinsicCalibration::forward_stereo(0.12);
        let camera = default_camera();
        let world = WorldModel::circular_room(6.0, 8.0, 100, 21);
        let traj = Trajectory::Circle {
            center: Vector3::new(0.0, 0.0, -1.0),
            radius: 2.0,
            period: 12.0,
            z_amplitude: 0.3,
            z_period: 5.0,
            yaw: YawMode::FollowVelocity,
        };
        let noise = NoiseSpec::zero(33);
        let frames = synthesize_vision(
            &traj,
            &world,
            &camera,
            &calib,
            &noise,
            &VisionLimits::default(),
            2.0,
            &SensorRates::default(),
        );
        let mut checked = 0;
        for (t, _, features) in &frames {
            let state = traj.state(*t);
            for f in features {
                let lm = Landmark::new(f.landmark_id, world.landmarks[f.landmark_id as usize].position);
                for (side, px) in [(CameraSide::Left, f.left_px), (CameraSide::Right, f.right_px)] {
                    let factor =
                        factors::reprojection_residual(0, &state, &calib, &camera, side, &lm, &px, 1.0)
                            .expect("visible landmark");
                    assert!(factor.residual.norm() < 1e-8, "residual {}", factor.residual.norm());
                    checked += 1;
                }
            }
        }
        assert!(checked > 100, "too few observations checked: {checked}");

        let depth_stream = synthesize_depth(&traj, &noise, 10.0, 2.0, &SensorRates::default());
        let d0 = depth_stream[0].reading;
        let z0 = traj.position(0.0).z;
        for d in &depth_stream {
            let state = traj.state(d.t);
            let world_z = factors::depth_from_raw(d.reading, d0, 0.0) + z0;
            let factor = factors::depth_residual(0, &state, world_z, 0.01);
            assert!(factor.residual[0].abs() < 1e-8);
        }

        let pings = synthesize_sonar(&traj, &world, &calib, &noise, 2.0, &SensorRates::default());
        let mut sonar_checked = 0;
        for p in pings.iter().take(20) {
            let state = traj.state(p.t);
            let hit = factors::sonar_landmark(p, &state, &calib);
            let patch = vec![Landmark::new(9999, hit)];
            let cov = nalgebra::Matrix3::identity() * 0.01;
            if let Some(factor) = factors::sonar_range_residual(0, &state, p, &patch, &cov) {
                // Sonar collocated with the IMU: patch distance equals range.
                assert!(factor.residual[0].abs() < 1e-8, "sonar residual {}", factor.residual[0]);
                sonar_checked += 1;
            }
        }
        assert!(sonar_checked > 0);
    }

    #[test]
    fn imu_stream_with_zero_noise_is_exactly_reproducible() {
        let traj = Trajectory::Lissajous {
            center: Vector3::zeros(),
            amplitude: Vector3::new(1.0, 0.7, 0.4),
            angular_rate: Vector3::new(0.9, 1.3, 1.7),
            phase: Vector3::new(0.0, 0.5, 1.0),
            yaw: YawMode::Spin(0.2),
        };
        let g = Vector3::new(0.0, 0.0, -9.81);
        let a = synthesize_imu(&traj, &g, &NoiseSpec::zero(1), 1.0, &SensorRates::default());
        let b = synthesize_imu(&traj, &g, &NoiseSpec::zero(1), 1.0, &SensorRates::default());
        for (x, y) in a.iter().zip(b.iter()) {
            assert_eq!(x.accel, y.accel);
            assert_eq!(x.gyro, y.gyro);
        }
    }

    #[test]
    fn yaw_only_attitude_consistency() {
        let traj = Trajectory::Circle {
            center: Vector3::zeros(),
            radius: 1.0,
            period: 5.0,
            z_amplitude: 0.0,
            z_period: 1.0,
            yaw: YawMode::FollowVelocity,
        };
        for t in [0.1, 1.7, 4.2] {
            let q = traj.orientation(t);
            let expected = exp_so3(&Vector3::new(0.0, 0.0, traj.yaw(t)));
            assert!(q.angle_to(&expected) < 1e-12);
        }
        let s: RobotState = traj.state(1.0);
        assert!(s.is_finite());
    }
}
