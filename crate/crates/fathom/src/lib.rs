//! Tightly-coupled sonar-visual-inertial-depth state estimation.
//!
//! `fathom` is a keyframe-based sliding-window backend for underwater
//! vehicles carrying a stereo camera, an IMU, a pressure-depth sensor, and a
//! mechanical scanning sonar. Any of the acoustic/depth sensors can be
//! disabled, in which case the system degrades to a stereo visual-inertial
//! estimator.
//!
//! The crate is organised around the estimation pipeline:
//!
//! - [`geometry`]: quaternions, rigid transforms, the robot state and its
//!   tangent-space perturbations.
//! - [`imu`]: IMU preintegration between keyframes.
//! - [`factors`]: residuals, analytic Jacobians and information matrices for
//!   the reprojection, inertial, sonar-range and depth error terms.
//! - [`estimator`]: the fixed-lag window, damped Gauss-Newton solver and
//!   Schur-complement marginalization.
//! - [`init`]: two-step scale refinement and velocity/gravity bootstrap.
//! - [`loop_closure`]: bag-of-binary-words place recognition, PnP RANSAC
//!   geometric validation, relocalization and 6-DoF pose-graph optimization.
//! - [`preprocessing`]: CLAHE image enhancement.
//! - [`sim`]: ground-truthed synthetic measurement logs.
//! - [`pipeline`]: the log-replay driver tying everything together.
//! - [`eval`]: trajectory alignment, ATE RMSE and the run orchestration used
//!   by the CLI.
//!
//! Every major capability has a runnable demo under `examples/`; start with
//! `cargo run --example simulate_log` and `cargo run --example replay_tunnel`.

pub mod estimator;
pub mod eval;
pub mod factors;
pub mod geometry;
pub mod imu;
pub mod init;
pub mod loop_closure;
pub mod pipeline;
pub mod preprocessing;
pub mod sim;
