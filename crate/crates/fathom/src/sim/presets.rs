//! Canonical simulation scenarios shared by the CLI, the examples and the
//! acceptance suite.

use super::{NoiseSpec, Scenario, SensorRates, Trajectory, VisionLimits, WorldModel, YawMode};
use crate::eval::RunSettings;
use nalgebra::Vector3;

fn rig() -> (crate::factors::StereoCameraModel, crate::geometry::ExtrinsicCalibration) {
    let settings = RunSettings::default();
    (settings.camera(), settings.calibration())
}

/// Circular orbit with gentle bobbing inside a flat-walled room; the
/// general-purpose tracking scenario.
pub fn orbit(duration: f64, noise: NoiseSpec, world_seed: u64) -> Scenario {
    let (camera, calib) = rig();
    Scenario {
        trajectory: Trajectory::Circle {
            center: Vector3::new(0.0, 0.0, -2.0),
            radius: 3.0,
            period: 24.0,
            z_amplitude: 0.4,
            z_period: 30.0,
            yaw: YawMode::FollowVelocity,
        },
        world: WorldModel::box_room(6.5, 6.5, 10.0, 300, world_seed),
        camera,
        calib,
        noise,
        limits: VisionLimits::default(),
        rates: SensorRates::default(),
        duration,
        d_surface: 12.0,
    }
}

/// Straight run through a narrow tunnel with few, far visual features; the
/// regime where the sonar carries real weight.
pub fn tunnel_sparse(duration: f64, noise: NoiseSpec, world_seed: u64) -> Scenario {
    let (camera, calib) = rig();
    let length = duration * 0.5 + 30.0;
    Scenario {
        trajectory: Trajectory::Weave {
            start: Vector3::new(-length / 2.0 + 5.0, 0.0, 0.0),
            velocity: Vector3::new(0.4, 0.0, 0.0),
            sway_amplitude: Vector3::new(0.0, 0.5, 0.25),
            sway_rate: Vector3::new(0.0, 0.23, 0.31),
            yaw: YawMode::Fixed(0.0),
        },
        world: WorldModel::tunnel(3.0, length, (length * 22.0) as usize, world_seed),
        camera,
        calib,
        noise,
        limits: VisionLimits { min_depth: 0.5, max_depth: 10.0, max_features: 10 },
        rates: SensorRates::default(),
        duration,
        d_surface: 12.0,
    }
}

/// Rounded-square loop (about 100 m around) inside an annular corridor,
/// revisiting its start; the loop-closure scenario.
pub fn square_loop(duration: f64, noise: NoiseSpec, world_seed: u64) -> Scenario {
    let (camera, calib) = rig();
    Scenario {
        trajectory: Trajectory::RoundedSquare {
            center: Vector3::zeros(),
            half_side: 12.5,
            period: duration.max(30.0),
            sharpness: 3.0,
            z_amplitude: 0.0,
            z_period: 1.0,
            yaw: YawMode::FollowVelocity,
        },
        world: WorldModel::annular_corridor(9.0, 17.0, 8.0, 700, world_seed),
        camera,
        calib,
        noise,
        limits: VisionLimits::default(),
        rates: SensorRates::default(),
        duration,
        d_surface: 12.0,
    }
}

/// Three-axis oscillation with slow spin; rich excitation for
/// initialization studies.
pub fn excited(duration: f64, noise: NoiseSpec, world_seed: u64) -> Scenario {
    let (camera, calib) = rig();
    Scenario {
        trajectory: Trajectory::Lissajous {
            center: Vector3::new(0.0, 0.0, -2.0),
            amplitude: Vector3::new(1.2, 0.9, 0.6),
            angular_rate: Vector3::new(0.9, 1.3, 0.5),
            phase: Vector3::new(0.0, 0.7, 1.9),
            yaw: YawMode::Spin(0.15),
        },
        world: WorldModel::circular_room(6.5, 10.0, 260, world_seed),
        camera,
        calib,
        noise,
        limits: VisionLimits::default(),
        rates: SensorRates::default(),
        duration,
        d_surface: 12.0,
    }
}
