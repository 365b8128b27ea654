//! Trajectory alignment and error metrics, plus the log-replay run driver
//! used by the CLI.

use crate::geometry::{ExtrinsicCalibration, Quaternion, Transform};
use crate::imu::ImuNoiseModel;
use crate::pipeline::{InitMode, Pipeline, PipelineConfig, PipelineError};
use crate::sim::MeasurementLog;
use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum AlignError {
    #[error("need at least 3 point pairs, got {0}")]
    TooFewPoints(usize),
    #[error("degenerate point set (collinear or coincident)")]
    Degenerate,
    #[error("no temporal associations between the trajectories")]
    NoAssociations,
}

/// Timestamped pose sample of a trajectory.
#[derive(Debug, Clone, Copy)]
pub struct PoseSample {
    pub t: f64,
    pub position: Vector3<f64>,
    pub orientation: Quaternion,
}

/// Closed-form least-squares alignment of two point sets:
/// `dst ~= s * R * src + t`. With `with_scale` false, `s` is fixed to 1.
///
/// Returns `(rotation, translation, scale)`.
pub fn umeyama_points(
    src: &[Vector3<f64>],
    dst: &[Vector3<f64>],
    with_scale: bool,
) -> Result<(Matrix3<f64>, Vector3<f64>, f64), AlignError> {
    if src.len() < 3 || src.len() != dst.len() {
        return Err(AlignError::TooFewPoints(src.len().min(dst.len())));
    }
    let n = src.len() as f64;
    let mu_s: Vector3<f64> = src.iter().sum::<Vector3<f64>>() / n;
    let mu_d: Vector3<f64> = dst.iter().sum::<Vector3<f64>>() / n;

    let mut sigma = Matrix3::zeros();
    let mut var_s = 0.0;
    for (s, d) in src.iter().zip(dst.iter()) {
        let sc = s - mu_s;
        let dc = d - mu_d;
        sigma += dc * sc.transpose();
        var_s += sc.norm_squared();
    }
    sigma /= n;
    var_s /= n;
    if var_s < 1e-18 {
        return Err(AlignError::Degenerate);
    }

    let svd = sigma.svd(true, true);
    let u = svd.u.ok_or(AlignError::Degenerate)?;
    let v_t = svd.v_t.ok_or(AlignError::Degenerate)?;
    // Rank-1 covariance means the points are collinear: rotation about the
    // line is unobservable.
    if svd.singular_values[1] < 1e-12 * svd.singular_values[0].max(1e-300) {
        return Err(AlignError::Degenerate);
    }
    let mut s_fix = Matrix3::identity();
    if (u.determinant() * v_t.determinant()) < 0.0 {
        s_fix[(2, 2)] = -1.0;
    }
    let rotation = u * s_fix * v_t;
    let scale = if with_scale {
        (svd.singular_values[0] * s_fix[(0, 0)]
            + svd.singular_values[1] * s_fix[(1, 1)]
            + svd.singular_values[2] * s_fix[(2, 2)])
            / var_s
    } else {
        1.0
    };
    let translation = mu_d - rotation * mu_s * scale;
    Ok((rotation, translation, scale))
}

/// Rigid/similarity alignment of an estimated trajectory onto ground truth.
#[derive(Debug, Clone, Copy)]
pub struct Alignment {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
    pub scale: f64,
}

impl Alignment {
    pub fn apply(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.scale * (self.rotation * p) + self.translation
    }

    pub fn transform(&self) -> Transform {
        Transform::new(self.rotation, self.translation)
    }
}

/// Maximum timestamp gap for associating estimate and truth samples,
/// seconds.
pub const ASSOCIATION_WINDOW: f64 = 0.02;

/// Associates samples by nearest timestamp within the window. Both
/// sequences must be time-sorted.
pub fn associate(estimate: &[PoseSample], truth: &[PoseSample]) -> Vec<(usize, usize)> {
    let mut pairs = Vec::new();
    let mut j = 0usize;
    for (i, e) in estimate.iter().enumerate() {
        while j + 1 < truth.len() && (truth[j + 1].t - e.t).abs() <= (truth[j].t - e.t).abs() {
            j += 1;
        }
        if !truth.is_empty() && (truth[j].t - e.t).abs() <= ASSOCIATION_WINDOW {
            pairs.push((i, j));
        }
    }
    pairs
}

/// Umeyama alignment of the estimate onto the truth over temporally
/// associated samples.
pub fn umeyama_align(
    estimate: &[PoseSample],
    truth: &[PoseSample],
    with_scale: bool,
) -> Result<Alignment, AlignError> {
    let pairs = associate(estimate, truth);
    if pairs.is_empty() {
        return Err(AlignError::NoAssociations);
    }
    let src: Vec<Vector3<f64>> = pairs.iter().map(|(i, _)| estimate[*i].position).collect();
    let dst: Vec<Vector3<f64>> = pairs.iter().map(|(_, j)| truth[*j].position).collect();
    let (rotation, translation, scale) = umeyama_points(&src, &dst, with_scale)?;
    Ok(Alignment { rotation, translation, scale })
}

/// Absolute trajectory error: root-mean-square position error over the
/// associated pairs of an (already aligned) estimate.
pub fn compute_ate_rmse(
    aligned_estimate: &[PoseSample],
    truth: &[PoseSample],
) -> Result<f64, AlignError> {
    let pairs = associate(aligned_estimate, truth);
    if pairs.is_empty() {
        return Err(AlignError::NoAssociations);
    }
    let sum: f64 = pairs
        .iter()
        .map(|(i, j)| (aligned_estimate[*i].position - truth[*j].position).norm_squared())
        .sum();
    Ok((sum / pairs.len() as f64).sqrt())
}

/// Per-axis RMSE over associated pairs.
pub fn per_axis_rmse(
    aligned_estimate: &[PoseSample],
    truth: &[PoseSample],
) -> Result<Vector3<f64>, AlignError> {
    let pairs = associate(aligned_estimate, truth);
    if pairs.is_empty() {
        return Err(AlignError::NoAssociations);
    }
    let mut acc = Vector3::zeros();
    for (i, j) in &pairs {
        let d = aligned_estimate[*i].position - truth[*j].position;
        acc += d.component_mul(&d);
    }
    acc /= pairs.len() as f64;
    Ok(Vector3::new(acc.x.sqrt(), acc.y.sqrt(), acc.z.sqrt()))
}

/// Applies an alignment to a trajectory.
pub fn apply_alignment(estimate: &[PoseSample], alignment: &Alignment) -> Vec<PoseSample> {
    let q_align = Transform::new(alignment.rotation, alignment.translation).quaternion();
    estimate
        .iter()
        .map(|s| PoseSample {
            t: s.t,
            position: alignment.apply(&s.position),
            orientation: q_align.mul(&s.orientation),
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Run driver
// ---------------------------------------------------------------------------

/// Sensor rig description; the subset of settings a replay needs beyond the
/// log itself. Field names double as the config-file keys.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct RigSettings {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub image_width: u32,
    pub image_height: u32,
    pub stereo_baseline: f64,
    pub imu_sigma_g: f64,
    pub imu_sigma_a: f64,
    pub imu_sigma_bg: f64,
    pub imu_sigma_ba: f64,
    pub gravity_magnitude: f64,
}

impl Default for RigSettings {
    fn default() -> Self {
        let imu = ImuNoiseModel::default();
        RigSettings {
            fx: 400.0,
            fy: 400.0,
            cx: 320.0,
            cy: 240.0,
            image_width: 640,
            image_height: 480,
            stereo_baseline: 0.12,
            imu_sigma_g: imu.sigma_g,
            imu_sigma_a: imu.sigma_a,
            imu_sigma_bg: imu.sigma_bg,
            imu_sigma_ba: imu.sigma_ba,
            gravity_magnitude: imu.g_mag,
        }
    }
}

/// Replay settings that can be overridden from a config file. Every key is
/// optional; unset keys keep their defaults.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct RunSettings {
    pub rig: RigSettings,
    pub window_size: Option<usize>,
    pub keyframe_overlap: Option<f64>,
    pub keyframe_max_interval: Option<f64>,
    pub init_keyframes: Option<usize>,
    pub min_init_features: Option<usize>,
    pub pixel_sigma: Option<f64>,
    pub depth_sigma: Option<f64>,
    pub stereo_scale_corruption: Option<f64>,
    pub vocab_branching: Option<u32>,
    pub vocab_depth: Option<u32>,
    pub vocab_corpus: Option<usize>,
    pub loop_cooldown: Option<u64>,
}

impl RunSettings {
    pub fn load(path: &Path) -> Result<RunSettings, RunError> {
        let text = std::fs::read_to_string(path)?;
        toml::from_str(&text).map_err(|e| RunError::Config(e.to_string()))
    }

    pub fn imu_model(&self) -> ImuNoiseModel {
        ImuNoiseModel {
            sigma_g: self.rig.imu_sigma_g,
            sigma_a: self.rig.imu_sigma_a,
            sigma_bg: self.rig.imu_sigma_bg,
            sigma_ba: self.rig.imu_sigma_ba,
            g_mag: self.rig.gravity_magnitude,
        }
    }

    pub fn camera(&self) -> crate::factors::StereoCameraModel {
        crate::factors::StereoCameraModel::symmetric(
            self.rig.fx,
            self.rig.fy,
            self.rig.cx,
            self.rig.cy,
            self.rig.image_width,
            self.rig.image_height,
        )
    }

    pub fn calibration(&self) -> ExtrinsicCalibration {
        ExtrinsicCalibration::forward_stereo(self.rig.stereo_baseline)
    }

    /// Folds the overrides into a pipeline configuration.
    pub fn apply(&self, mut config: PipelineConfig) -> PipelineConfig {
        if let Some(v) = self.window_size {
            config.window_size = v;
        }
        if let Some(v) = self.keyframe_overlap {
            config.keyframe_overlap = v;
        }
        if let Some(v) = self.keyframe_max_interval {
            config.keyframe_max_interval = v;
        }
        if let Some(v) = self.init_keyframes {
            config.init_keyframes = v;
        }
        if let Some(v) = self.min_init_features {
            config.min_init_features = v;
        }
        if let Some(v) = self.pixel_sigma {
            config.solver.pixel_sigma = v;
        }
        if let Some(v) = self.depth_sigma {
            config.solver.depth_sigma = v;
        }
        if let Some(v) = self.stereo_scale_corruption {
            config.stereo_scale_corruption = v;
        }
        if let Some(v) = self.vocab_branching {
            config.vocab_branching = v;
        }
        if let Some(v) = self.vocab_depth {
            config.vocab_depth = v;
        }
        if let Some(v) = self.vocab_corpus {
            config.vocab_corpus = v;
        }
        if let Some(v) = self.loop_cooldown {
            config.loop_cooldown = v;
        }
        config
    }
}

/// One evaluation run: log replay, alignment and error reporting.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub log_path: PathBuf,
    pub output_dir: Option<PathBuf>,
    pub use_sonar: bool,
    pub use_depth: bool,
    pub use_loop: bool,
    /// Similarity (scaled) alignment instead of rigid.
    pub with_scale: bool,
    pub init_mode: InitMode,
    pub seed: u64,
    /// Replays the log this many times (seed incremented) and reports the
    /// best RMSE.
    pub best_of: usize,
    pub settings: RunSettings,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            log_path: PathBuf::new(),
            output_dir: None,
            use_sonar: true,
            use_depth: true,
            use_loop: true,
            with_scale: false,
            init_mode: InitMode::TwoStep,
            seed: 0,
            best_of: 1,
            settings: RunSettings::default(),
        }
    }
}

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("config: {0}")]
    Config(String),
    #[error("log: {0}")]
    Log(#[from] crate::sim::LogError),
    #[error("initialization failed: {0}")]
    Init(String),
    #[error("solver failed: {0}")]
    Solver(String),
    #[error(transparent)]
    Align(#[from] AlignError),
}

impl RunError {
    /// Process exit code contract: 2 for initialization failures, 3 for
    /// solver failures, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            RunError::Init(_) => 2,
            RunError::Solver(_) => 3,
            _ => 1,
        }
    }
}

/// Aligned-error report of one run.
#[derive(Debug, Clone)]
pub struct TrajectoryReport {
    pub ate_rmse: f64,
    pub per_axis: Vector3<f64>,
    pub alignment: Alignment,
    pub wall_time: f64,
    pub keyframes: usize,
    pub loop_closures: usize,
    pub total_scale: Option<f64>,
    pub seed: u64,
}

impl TrajectoryReport {
    /// Machine-parseable key=value lines.
    pub fn to_key_values(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("ate_rmse={:.9}\n", self.ate_rmse));
        out.push_str(&format!("rmse_x={:.9}\n", self.per_axis.x));
        out.push_str(&format!("rmse_y={:.9}\n", self.per_axis.y));
        out.push_str(&format!("rmse_z={:.9}\n", self.per_axis.z));
        out.push_str(&format!("alignment_scale={:.9}\n", self.alignment.scale));
        out.push_str(&format!(
            "alignment_translation={:.9} {:.9} {:.9}\n",
            self.alignment.translation.x, self.alignment.translation.y, self.alignment.translation.z
        ));
        if let Some(s) = self.total_scale {
            out.push_str(&format!("initial_total_scale={s:.9}\n"));
        }
        out.push_str(&format!("keyframes={}\n", self.keyframes));
        out.push_str(&format!("loop_closures={}\n", self.loop_closures));
        out.push_str(&format!("seed={}\n", self.seed));
        out.push_str(&format!("wall_time_s={:.3}\n", self.wall_time));
        out
    }
}

fn write_trajectory_csv(path: &Path, samples: &[PoseSample]) -> Result<(), RunError> {
    use std::io::Write;
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "t,x,y,z,qw,qx,qy,qz")?;
    for s in samples {
        writeln!(
            w,
            "{:.9},{:.9},{:.9},{:.9},{:.9},{:.9},{:.9},{:.9}",
            s.t,
            s.position.x,
            s.position.y,
            s.position.z,
            s.orientation.w,
            s.orientation.x,
            s.orientation.y,
            s.orientation.z
        )?;
    }
    Ok(())
}

/// Reads a trajectory CSV produced by [`write_trajectory_csv`].
pub fn read_trajectory_csv(path: &Path) -> Result<Vec<PoseSample>, RunError> {
    let text = std::fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || (i == 0 && line.starts_with('t')) {
            continue;
        }
        let vals: Vec<f64> = line
            .split(',')
            .map(|v| v.trim().parse::<f64>())
            .collect::<Result<_, _>>()
            .map_err(|e| RunError::Config(format!("line {}: {e}", i + 1)))?;
        if vals.len() != 8 {
            return Err(RunError::Config(format!("line {}: expected 8 fields", i + 1)));
        }
        out.push(PoseSample {
            t: vals[0],
            position: Vector3::new(vals[1], vals[2], vals[3]),
            orientation: Quaternion::new(vals[4], vals[5], vals[6], vals[7]),
        });
    }
    Ok(out)
}

/// Replays a log once with the given seed; used by [`run`] and the paired
/// experiments in the test suites.
pub fn replay_once(
    config: &RunConfig,
    log: &MeasurementLog,
    seed: u64,
) -> Result<(crate::pipeline::PipelineOutput, f64, Alignment, Vector3<f64>), RunError> {
    let mut pipeline_config = config.settings.apply(PipelineConfig::default());
    pipeline_config.use_sonar = config.use_sonar;
    pipeline_config.use_depth = config.use_depth;
    pipeline_config.use_loop = config.use_loop;
    pipeline_config.init_mode = config.init_mode;
    pipeline_config.seed = seed;
    pipeline_config.loop_config.pnp.seed = seed;

    let output = Pipeline::replay(
        pipeline_config,
        config.settings.calibration(),
        config.settings.camera(),
        config.settings.imu_model(),
        &log.records,
    )
    .map_err(|e| match e {
        PipelineError::InitFailure(m) => RunError::Init(m),
        PipelineError::SolverFailure(m) => RunError::Solver(m),
        PipelineError::Window(w) => RunError::Solver(w.to_string()),
    })?;

    let alignment = umeyama_align(&output.estimate, &output.truth, config.with_scale)?;
    let aligned = apply_alignment(&output.estimate, &alignment);
    let rmse = compute_ate_rmse(&aligned, &output.truth)?;
    let per_axis = per_axis_rmse(&aligned, &output.truth)?;
    Ok((output, rmse, alignment, per_axis))
}

/// Full evaluation: replays the log (best of N seeds), writes the estimated,
/// ground-truth and aligned trajectory CSVs plus the report, and returns the
/// report.
pub fn run(config: &RunConfig) -> Result<TrajectoryReport, RunError> {
    let started = std::time::Instant::now();
    let log = MeasurementLog::read(&config.log_path)?;

    let mut best: Option<(TrajectoryReport, crate::pipeline::PipelineOutput, Alignment)> = None;
    let runs = config.best_of.max(1);
    for k in 0..runs {
        let seed = config.seed + k as u64;
        let (output, rmse, alignment, per_axis) = replay_once(config, &log, seed)?;
        let report = TrajectoryReport {
            ate_rmse: rmse,
            per_axis,
            alignment,
            wall_time: 0.0,
            keyframes: output.keyframes,
            loop_closures: output.loop_closures,
            total_scale: output.total_scale,
            seed,
        };
        if best.as_ref().map_or(true, |(b, _, _)| report.ate_rmse < b.ate_rmse) {
            best = Some((report, output, alignment));
        }
    }
    let (mut report, output, alignment) = best.expect("at least one run");
    report.wall_time = started.elapsed().as_secs_f64();

    if let Some(dir) = &config.output_dir {
        std::fs::create_dir_all(dir)?;
        write_trajectory_csv(&dir.join("estimate.csv"), &output.estimate)?;
        write_trajectory_csv(&dir.join("truth.csv"), &output.truth)?;
        let aligned = apply_alignment(&output.estimate, &alignment);
        write_trajectory_csv(&dir.join("aligned.csv"), &aligned)?;
        std::fs::write(dir.join("report.txt"), report.to_key_values())?;
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::exp_so3;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn helix(n: usize) -> Vec<PoseSample> {
        (0..n)
            .map(|k| {
                let t = k as f64 * 0.1;
                PoseSample {
                    t,
                    position: Vector3::new((0.3 * t).cos() * 4.0, (0.3 * t).sin() * 4.0, 0.2 * t),
                    orientation: Quaternion::identity(),
                }
            })
            .collect()
    }

    #[test]
    fn self_alignment_is_identity() {
        let traj = helix(100);
        let a = umeyama_align(&traj, &traj, false).unwrap();
        assert!((a.rotation - Matrix3::identity()).norm() < 1e-12);
        assert!(a.translation.norm() < 1e-12);
        let rmse = compute_ate_rmse(&traj, &traj).unwrap();
        assert_eq!(rmse, 0.0);
    }

    #[test]
    fn recovers_rigid_transform_exactly() {
        let truth = helix(200);
        let rot = exp_so3(&Vector3::new(0.2, -0.4, 1.1)).rotation_matrix();
        let trans = Vector3::new(5.0, -2.0, 3.0);
        // estimate = R^T (truth - t): aligning estimate onto truth recovers
        // (R, t).
        let estimate: Vec<PoseSample> = truth
            .iter()
            .map(|s| PoseSample {
                t: s.t,
                position: rot.transpose() * (s.position - trans),
                orientation: s.orientation,
            })
            .collect();
        let a = umeyama_align(&estimate, &truth, false).unwrap();
        assert!((a.rotation - rot).norm() < 1e-9);
        assert!((a.translation - trans).norm() < 1e-9);
        let aligned = apply_alignment(&estimate, &a);
        assert!(compute_ate_rmse(&aligned, &truth).unwrap() < 1e-9);
    }

    #[test]
    fn recovers_similarity_scale() {
        let truth = helix(150);
        let estimate: Vec<PoseSample> = truth
            .iter()
            .map(|s| PoseSample { position: s.position / 0.7, ..*s })
            .collect();
        let a = umeyama_align(&estimate, &truth, true).unwrap();
        assert!((a.scale - 0.7).abs() < 1e-9);
    }

    #[test]
    fn noisy_copy_rmse_matches_expectation() {
        // Isotropic sigma per axis leaves a residual RMSE of about
        // sqrt(3) * sigma after rigid alignment.
        let mut rng = StdRng::seed_from_u64(42);
        let truth = helix(1000);
        let sigma = 0.05;
        let gauss = |rng: &mut StdRng| -> f64 {
            // Box-Muller
            let u1: f64 = rng.gen_range(1e-12..1.0);
            let u2: f64 = rng.gen_range(0.0..1.0);
            (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
        };
        let estimate: Vec<PoseSample> = truth
            .iter()
            .map(|s| PoseSample {
                position: s.position
                    + Vector3::new(
                        sigma * gauss(&mut rng),
                        sigma * gauss(&mut rng),
                        sigma * gauss(&mut rng),
                    ),
                ..*s
            })
            .collect();
        let a = umeyama_align(&estimate, &truth, false).unwrap();
        let aligned = apply_alignment(&estimate, &a);
        let rmse = compute_ate_rmse(&aligned, &truth).unwrap();
        let expected = sigma * 3.0_f64.sqrt();
        assert!(
            (rmse - expected).abs() / expected < 0.1,
            "rmse {rmse} vs expected {expected}"
        );
    }

    #[test]
    fn alignment_invariant_to_pair_order() {
        let truth = helix(60);
        let rot = exp_so3(&Vector3::new(0.0, 0.0, 0.5)).rotation_matrix();
        let estimate: Vec<PoseSample> = truth
            .iter()
            .map(|s| PoseSample { position: rot.transpose() * s.position, ..*s })
            .collect();
        let src: Vec<Vector3<f64>> = estimate.iter().map(|s| s.position).collect();
        let dst: Vec<Vector3<f64>> = truth.iter().map(|s| s.position).collect();
        let (r1, t1, _) = umeyama_points(&src, &dst, false).unwrap();
        let mut order: Vec<usize> = (0..src.len()).collect();
        order.reverse();
        let src2: Vec<Vector3<f64>> = order.iter().map(|&i| src[i]).collect();
        let dst2: Vec<Vector3<f64>> = order.iter().map(|&i| dst[i]).collect();
        let (r2, t2, _) = umeyama_points(&src2, &dst2, false).unwrap();
        assert!((r1 - r2).norm() < 1e-12);
        assert!((t1 - t2).norm() < 1e-12);
    }

    #[test]
    fn degenerate_sets_rejected() {
        let line: Vec<Vector3<f64>> = (0..10).map(|k| Vector3::new(k as f64, 0.0, 0.0)).collect();
        assert!(matches!(umeyama_points(&line, &line, false), Err(AlignError::Degenerate)));
        let two = vec![Vector3::zeros(), Vector3::x()];
        assert!(matches!(umeyama_points(&two, &two, false), Err(AlignError::TooFewPoints(2))));
    }

    #[test]
    fn association_respects_window() {
        let truth = helix(50);
        let mut shifted = helix(50);
        for s in &mut shifted {
            s.t += 0.543; // off the sample grid, outside the 20 ms window
        }
        assert!(compute_ate_rmse(&shifted, &truth).is_err());
    }

    #[test]
    fn brute_force_alignment_cross_check() {
        // A constant offset on a curved segment: the closed form must beat
        // or match every candidate on a small grid of rigid transforms.
        let truth = helix(120);
        let estimate: Vec<PoseSample> = truth
            .iter()
            .map(|s| PoseSample { position: s.position + Vector3::new(0.1, 0.0, 0.0), ..*s })
            .collect();
        let a = umeyama_align(&estimate, &truth, false).unwrap();
        let aligned = apply_alignment(&estimate, &a);
        let best = compute_ate_rmse(&aligned, &truth).unwrap();

        let mut grid_best = f64::INFINITY;
        for dx in [-0.12, -0.1, -0.08, 0.0, 0.08, 0.1, 0.12] {
            for yaw in [-0.02, -0.01, 0.0, 0.01, 0.02] {
                let al = Alignment {
                    rotation: exp_so3(&Vector3::new(0.0, 0.0, yaw)).rotation_matrix(),
                    translation: Vector3::new(dx, 0.0, 0.0),
                    scale: 1.0,
                };
                let candidate = apply_alignment(&estimate, &al);
                grid_best = grid_best.min(compute_ate_rmse(&candidate, &truth).unwrap());
            }
        }
        assert!(best <= grid_best + 1e-12, "closed form {best} vs grid {grid_best}");
    }
}
