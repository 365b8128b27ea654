//! Analytic trajectory primitives for sensor synthesis.
//!
//! Positions are twice differentiable so inertial streams can be derived;
//! velocity/acceleration come from five-point central differences of the
//! analytic position (exact closed forms are not needed at the accuracy the
//! oracles demand).

use crate::geometry::{Quaternion, RobotState};
use nalgebra::Vector3;

/// Yaw behavior along the path.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum YawMode {
    /// Constant heading.
    Fixed(f64),
    /// Face along the horizontal velocity.
    FollowVelocity,
    /// Constant spin rate, rad/s.
    Spin(f64),
}

/// Parametric pose curve.
#[derive(Debug, Clone, Copy)]
pub enum Trajectory {
    /// Straight line at constant velocity.
    Line {
        start: Vector3<f64>,
        velocity: Vector3<f64>,
        yaw: YawMode,
    },
    /// Horizontal circle with optional vertical bobbing.
    Circle {
        center: Vector3<f64>,
        radius: f64,
        period: f64,
        z_amplitude: f64,
        z_period: f64,
        yaw: YawMode,
    },
    /// Smooth (tanh-rounded) square loop in the horizontal plane; `sharpness`
    /// around 3 gives gently rounded corners.
    RoundedSquare {
        center: Vector3<f64>,
        half_side: f64,
        period: f64,
        sharpness: f64,
        z_amplitude: f64,
        z_period: f64,
        yaw: YawMode,
    },
    /// Forward run with sinusoidal sway: a straight transit with enough
    /// lateral/vertical motion to keep alignment well-posed.
    Weave {
        start: Vector3<f64>,
        velocity: Vector3<f64>,
        sway_amplitude: Vector3<f64>,
        sway_rate: Vector3<f64>,
        yaw: YawMode,
    },
    /// Three-axis oscillation; rich excitation for initialization runs.
    Lissajous {
        center: Vector3<f64>,
        amplitude: Vector3<f64>,
        angular_rate: Vector3<f64>,
        phase: Vector3<f64>,
        yaw: YawMode,
    },
}

const FD_STEP: f64 = 1e-3;

impl Trajectory {
    pub fn position(&self, t: f64) -> Vector3<f64> {
        match *self {
            Trajectory::Line { start, velocity, .. } => start + velocity * t,
            Trajectory::Circle { center, radius, period, z_amplitude, z_period, .. } => {
                let w = std::f64::consts::TAU / period;
                let z = if z_amplitude != 0.0 {
                    z_amplitude * (std::f64::consts::TAU / z_period * t).sin()
                } else {
                    0.0
                };
                center + Vector3::new(radius * (w * t).cos(), radius * (w * t).sin(), z)
            }
            Trajectory::RoundedSquare {
                center,
                half_side,
                period,
                sharpness,
                z_amplitude,
                z_period,
                ..
            } => {
                let w = std::f64::consts::TAU / period;
                let k = sharpness;
                let s = |u: f64| (k * u).tanh() / k.tanh();
                let z = if z_amplitude != 0.0 {
                    z_amplitude * (std::f64::consts::TAU / z_period * t).sin()
                } else {
                    0.0
                };
                center
                    + Vector3::new(
                        half_side * s((w * t).cos()),
                        half_side * s((w * t).sin()),
                        z,
                    )
            }
            Trajectory::Weave { start, velocity, sway_amplitude, sway_rate, .. } => {
                start
                    + velocity * t
                    + Vector3::new(
                        sway_amplitude.x * (sway_rate.x * t).sin(),
                        sway_amplitude.y * (sway_rate.y * t).sin(),
                        sway_amplitude.z * (sway_rate.z * t).sin(),
                    )
            }
            Trajectory::Lissajous { center, amplitude, angular_rate, phase, .. } => {
                center
                    + Vector3::new(
                        amplitude.x * (angular_rate.x * t + phase.x).sin(),
                        amplitude.y * (angular_rate.y * t + phase.y).sin(),
                        amplitude.z * (angular_rate.z * t + phase.z).sin(),
                    )
            }
        }
    }

    pub fn velocity(&self, t: f64) -> Vector3<f64> {
        let h = FD_STEP;
        (-self.position(t + 2.0 * h) + 8.0 * self.position(t + h) - 8.0 * self.position(t - h)
            + self.position(t - 2.0 * h))
            / (12.0 * h)
    }

    pub fn acceleration(&self, t: f64) -> Vector3<f64> {
        let h = FD_STEP;
        (-self.position(t + 2.0 * h) + 16.0 * self.position(t + h) - 30.0 * self.position(t)
            + 16.0 * self.position(t - h)
            - self.position(t - 2.0 * h))
            / (12.0 * h * h)
    }

    fn yaw_mode(&self) -> YawMode {
        match *self {
            Trajectory::Line { yaw, .. }
            | Trajectory::Circle { yaw, .. }
            | Trajectory::RoundedSquare { yaw, .. }
            | Trajectory::Weave { yaw, .. }
            | Trajectory::Lissajous { yaw, .. } => yaw,
        }
    }

    pub fn yaw(&self, t: f64) -> f64 {
        match self.yaw_mode() {
            YawMode::Fixed(y) => y,
            YawMode::Spin(rate) => rate * t,
            YawMode::FollowVelocity => {
                let v = self.velocity(t);
                if v.x.hypot(v.y) < 1e-9 {
                    0.0
                } else {
                    v.y.atan2(v.x)
                }
            }
        }
    }

    /// Body angular rate; attitude is yaw-only, so this is the yaw rate
    /// about z.
    pub fn angular_velocity(&self, t: f64) -> Vector3<f64> {
        let rate = match self.yaw_mode() {
            YawMode::Fixed(_) => 0.0,
            YawMode::Spin(rate) => rate,
            YawMode::FollowVelocity => {
                // d/dt atan2(vy, vx) = (vx ay - vy ax) / (vx^2 + vy^2)
                let v = self.velocity(t);
                let a = self.acceleration(t);
                let denom = v.x * v.x + v.y * v.y;
                if denom < 1e-12 {
                    0.0
                } else {
                    (v.x * a.y - v.y * a.x) / denom
                }
            }
        };
        Vector3::new(0.0, 0.0, rate)
    }

    pub fn orientation(&self, t: f64) -> Quaternion {
        Quaternion::from_yaw(self.yaw(t))
    }

    pub fn state(&self, t: f64) -> RobotState {
        RobotState {
            position: self.position(t),
            orientation: self.orientation(t),
            velocity: self.velocity(t),
            gyro_bias: Vector3::zeros(),
            accel_bias: Vector3::zeros(),
        }
    }
}
