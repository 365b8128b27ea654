//! Log-replay driver: measurement ingestion, keyframe selection,
//! initialization gating, sliding-window estimation and loop closing.
//!
//! The pipeline consumes a time-sorted measurement stream. Before
//! initialization it accumulates candidate keyframes with stereo odometry,
//! depth readings and preintegrals; once the two-step initialization
//! succeeds the window is seeded and subsequent frames run through keyframe
//! selection, triangulation, window optimization and (optionally) the loop
//! closer. The whole replay is deterministic for a fixed log and
//! configuration.

use crate::estimator::{
    Keyframe, KeypointObservation, OptimizationWindow, SolverConfig, WindowError,
};
use crate::eval::{umeyama_points, PoseSample};
use crate::factors::{
    DepthMeasurement, Landmark, LandmarkId, SonarMeasurement, StereoCameraModel,
};
use crate::geometry::{exp_so3, ExtrinsicCalibration, Quaternion, RobotState, Transform};
use crate::imu::{preintegrate, ImuNoiseModel, ImuSample};
use crate::init::{gate_and_initialize, InitBuffer, InitError, InitFrame};
use crate::loop_closure::{
    BinaryDescriptor, KeyframeSnapshot, LoopCloser, LoopCloserConfig, SnapshotObservation,
    Vocabulary,
};
use crate::sim::{CameraFeature, LogRecord};
use nalgebra::Vector3;
use std::collections::{BTreeMap, BTreeSet, VecDeque};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InitMode {
    /// Two-step scale refinement from stereo, depth and IMU.
    TwoStep,
    /// Seed directly from the ground-truth channel (consistency checks).
    GroundTruth,
}

#[derive(Debug, Clone)]
pub struct PipelineConfig {
    pub window_size: usize,
    pub solver: SolverConfig,
    pub use_sonar: bool,
    pub use_depth: bool,
    pub use_loop: bool,
    pub init_mode: InitMode,
    /// New keyframe when tracked-landmark overlap with the last keyframe
    /// falls below this fraction.
    pub keyframe_overlap: f64,
    /// ... or when this much time has elapsed, seconds.
    pub keyframe_max_interval: f64,
    pub min_init_features: usize,
    /// Candidate keyframes gathered before initialization is attempted.
    pub init_keyframes: usize,
    /// Multiplies the stereo odometry scale during initialization; models a
    /// miscalibrated baseline that the initializer must recover.
    pub stereo_scale_corruption: f64,
    pub vocab_branching: u32,
    pub vocab_depth: u32,
    /// Descriptors collected before the vocabulary is trained.
    pub vocab_corpus: usize,
    /// Keyframes to wait between loop closures.
    pub loop_cooldown: u64,
    pub loop_config: LoopCloserConfig,
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            window_size: 5,
            solver: SolverConfig::default(),
            use_sonar: true,
            use_depth: true,
            use_loop: true,
            init_mode: InitMode::TwoStep,
            keyframe_overlap: 0.6,
            keyframe_max_interval: 0.5,
            min_init_features: crate::init::MIN_INIT_FEATURES,
            init_keyframes: 6,
            stereo_scale_corruption: 1.0,
            vocab_branching: 10,
            vocab_depth: 2,
            vocab_corpus: 600,
            loop_cooldown: 10,
            loop_config: LoopCloserConfig::default(),
            seed: 0,
        }
    }
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("initialization never succeeded: {0}")]
    InitFailure(String),
    #[error("window solver failed: {0}")]
    SolverFailure(String),
    #[error("window error: {0}")]
    Window(#[from] WindowError),
}

/// Replay result: estimated keyframe trajectory plus the ground truth
/// channel and run statistics.
#[derive(Debug)]
pub struct PipelineOutput {
    pub estimate: Vec<PoseSample>,
    pub truth: Vec<PoseSample>,
    pub keyframes: usize,
    pub loop_closures: usize,
    pub total_scale: Option<f64>,
    pub recovered_gravity: Option<Vector3<f64>>,
}

/// Per-candidate data kept while waiting for initialization.
struct CandidateData {
    features: Vec<CameraFeature>,
    imu_samples: Vec<ImuSample>,
}

enum Phase {
    Collecting { buffer: InitBuffer, data: Vec<CandidateData>, odometry: Option<Transform> },
    Running,
}

pub struct Pipeline {
    config: PipelineConfig,
    calib: ExtrinsicCalibration,
    camera: StereoCameraModel,
    imu_noise: ImuNoiseModel,
    gravity: Vector3<f64>,

    phase: Phase,
    window: Option<OptimizationWindow>,
    d0: Option<f64>,

    // Stream buffers.
    imu_buffer: Vec<ImuSample>,
    recent_sonar: VecDeque<SonarMeasurement>,
    recent_depth: VecDeque<DepthMeasurement>,
    /// Keyframes awaiting a depth association (need a bracketing sample).
    pending_depth: Vec<(u64, f64)>,
    /// Depth reference deferred until the stream brackets the first
    /// keyframe: (timestamp, seeded world z of that keyframe).
    pending_d0: Option<(f64, f64)>,
    latest_truth: Option<RobotState>,
    truth: Vec<PoseSample>,
    frame_acc: Option<(f64, u64, Vec<CameraFeature>)>,

    // Keyframe bookkeeping.
    next_kf_id: u64,
    last_kf: Option<(u64, f64, BTreeSet<LandmarkId>)>,
    history: BTreeMap<u64, PoseSample>,

    // Loop closing.
    closer: Option<LoopCloser>,
    vocab_corpus: Vec<BinaryDescriptor>,
    pending_snapshots: Vec<KeyframeSnapshot>,
    last_loop_at: u64,
    loop_closures: usize,

    total_scale: Option<f64>,
    recovered_gravity: Option<Vector3<f64>>,
    last_init_error: Option<InitError>,
}

impl Pipeline {
    pub fn new(
        config: PipelineConfig,
        calib: ExtrinsicCalibration,
        camera: StereoCameraModel,
        imu_noise: ImuNoiseModel,
    ) -> Self {
        let gravity = Vector3::new(0.0, 0.0, -imu_noise.g_mag);
        let min_features = config.min_init_features;
        Pipeline {
            config,
            calib,
            camera,
            imu_noise,
            gravity,
            phase: Phase::Collecting {
                buffer: InitBuffer::new(min_features),
                data: Vec::new(),
                odometry: None,
            },
            window: None,
            d0: None,
            imu_buffer: Vec::new(),
            recent_sonar: VecDeque::new(),
            recent_depth: VecDeque::new(),
            pending_depth: Vec::new(),
            pending_d0: None,
            latest_truth: None,
            truth: Vec::new(),
            frame_acc: None,
            next_kf_id: 0,
            last_kf: None,
            history: BTreeMap::new(),
            closer: None,
            vocab_corpus: Vec::new(),
            pending_snapshots: Vec::new(),
            last_loop_at: 0,
            loop_closures: 0,
            total_scale: None,
            recovered_gravity: None,
            last_init_error: None,
        }
    }

    /// Replays a full log.
    pub fn replay(
        config: PipelineConfig,
        calib: ExtrinsicCalibration,
        camera: StereoCameraModel,
        imu_noise: ImuNoiseModel,
        records: &[LogRecord],
    ) -> Result<PipelineOutput, PipelineError> {
        let mut pipeline = Pipeline::new(config, calib, camera, imu_noise);
        for record in records {
            pipeline.process(record)?;
        }
        pipeline.finish()
    }

    pub fn process(&mut self, record: &LogRecord) -> Result<(), PipelineError> {
        match record {
            LogRecord::Imu(s) => self.imu_buffer.push(*s),
            LogRecord::Depth(d) => {
                self.recent_depth.push_back(*d);
                while self.recent_depth.len() > 16 {
                    self.recent_depth.pop_front();
                }
                self.resolve_depth();
            }
            LogRecord::Sonar(s) => {
                self.recent_sonar.push_back(*s);
                while self.recent_sonar.len() > 256 {
                    self.recent_sonar.pop_front();
                }
            }
            LogRecord::GroundTruth { t, state } => {
                self.latest_truth = Some(*state);
                self.truth.push(PoseSample {
                    t: *t,
                    position: state.position,
                    orientation: state.orientation,
                });
            }
            LogRecord::Camera { t, frame_id, feature } => {
                let flush = match &self.frame_acc {
                    Some((ft, _, _)) => (*ft - *t).abs() > 1e-9,
                    None => false,
                };
                if flush {
                    self.flush_frame()?;
                }
                self.frame_acc
                    .get_or_insert_with(|| (*t, *frame_id, Vec::new()))
                    .2
                    .push(feature.clone());
            }
        }
        Ok(())
    }

    /// Read-only view of the live window (diagnostics).
    pub fn window_ref(&self) -> Option<&OptimizationWindow> {
        self.window.as_ref()
    }

    pub fn finish(mut self) -> Result<PipelineOutput, PipelineError> {
        self.flush_frame()?;
        if matches!(self.phase, Phase::Collecting { .. }) {
            let reason = self
                .last_init_error
                .map(|e| e.to_string())
                .unwrap_or_else(|| "log ended before enough candidate keyframes".into());
            return Err(PipelineError::InitFailure(reason));
        }
        if let Some(window) = &self.window {
            for kf in window.keyframes() {
                self.history.insert(
                    kf.id,
                    PoseSample {
                        t: kf.t,
                        position: kf.state.position,
                        orientation: kf.state.orientation,
                    },
                );
            }
        }
        let mut estimate: Vec<PoseSample> = self.history.values().cloned().collect();
        estimate.sort_by(|a, b| a.t.partial_cmp(&b.t).unwrap());
        Ok(PipelineOutput {
            estimate,
            truth: self.truth,
            keyframes: self.history.len(),
            loop_closures: self.loop_closures,
            total_scale: self.total_scale,
            recovered_gravity: self.recovered_gravity,
        })
    }

    fn flush_frame(&mut self) -> Result<(), PipelineError> {
        let Some((t, _frame_id, features)) = self.frame_acc.take() else {
            return Ok(());
        };
        // Grow the descriptor corpus until the vocabulary can be trained.
        if self.config.use_loop && self.closer.is_none() {
            for f in &features {
                if self.vocab_corpus.len() < self.config.vocab_corpus {
                    self.vocab_corpus.push(f.descriptor);
                }
            }
            self.maybe_build_vocabulary();
        }
        match &self.phase {
            Phase::Collecting { .. } => self.collect_frame(t, features),
            Phase::Running => self.running_frame(t, features),
        }
    }

    fn maybe_build_vocabulary(&mut self) {
        if self.closer.is_some() || !self.config.use_loop {
            return;
        }
        let need = (self.config.vocab_branching as usize).pow(self.config.vocab_depth);
        if self.vocab_corpus.len() < self.config.vocab_corpus.max(need) {
            return;
        }
        if let Ok(vocab) = Vocabulary::build(
            &self.vocab_corpus,
            self.config.vocab_branching,
            self.config.vocab_depth,
            self.config.seed,
        ) {
            let mut closer = LoopCloser::new(
                vocab,
                *self.camera.intrinsics(crate::factors::CameraSide::Left),
                self.calib.t_ic_left,
                self.config.loop_config.clone(),
            );
            for snap in self.pending_snapshots.drain(..) {
                closer.add_keyframe(snap);
            }
            self.closer = Some(closer);
        }
    }

    /// Linear interpolation of the inertial stream at an exact timestamp.
    fn imu_at(&self, t: f64) -> Option<ImuSample> {
        let buf = &self.imu_buffer;
        if buf.is_empty() {
            return None;
        }
        if t <= buf[0].t {
            return Some(ImuSample { t, ..buf[0] });
        }
        if t >= buf[buf.len() - 1].t {
            let last = buf[buf.len() - 1];
            return Some(ImuSample { t, ..last });
        }
        let idx = buf.partition_point(|s| s.t < t);
        let (a, b) = (&buf[idx - 1], &buf[idx]);
        let w = (t - a.t) / (b.t - a.t).max(1e-12);
        Some(ImuSample { t, gyro: a.gyro.lerp(&b.gyro, w), accel: a.accel.lerp(&b.accel, w) })
    }

    /// Samples spanning exactly `[t0, t1]`, with interpolated endpoints so
    /// the preintegral duration matches the keyframe gap.
    fn imu_interval(&self, t0: f64, t1: f64) -> Option<Vec<ImuSample>> {
        let first = self.imu_at(t0)?;
        let last = self.imu_at(t1)?;
        let mut samples = vec![first];
        for s in &self.imu_buffer {
            if s.t > t0 + 1e-12 && s.t < t1 - 1e-12 {
                samples.push(*s);
            }
        }
        samples.push(last);
        if samples.len() < 2 {
            None
        } else {
            Some(samples)
        }
    }

    fn drop_imu_before(&mut self, t: f64) {
        // Keep one sample before the cut for interpolation.
        let cut = self.imu_buffer.partition_point(|s| s.t < t);
        if cut > 1 {
            self.imu_buffer.drain(0..cut - 1);
        }
    }

    /// Interpolates the raw pressure reading at an arbitrary time.
    /// Catmull-Rom over four bracketing samples when available, linear over
    /// two otherwise; `None` until the stream brackets `t` with enough
    /// margin for the cubic (one trailing sample), so associations wait for
    /// the accurate fit rather than settling for the linear one.
    fn interp_depth(&self, t: f64) -> Option<f64> {
        let d = &self.recent_depth;
        if d.len() < 2 {
            return None;
        }
        let i = d.iter().position(|s| s.t > t)?; // first sample after t
        if i == 0 {
            return None; // t precedes the buffered stream
        }
        if i >= 2 && i + 1 >= d.len() {
            // A trailing sample will arrive shortly and upgrade the fit.
            return None;
        }
        let (a, b) = (&d[i - 1], &d[i]);
        let u = ((t - a.t) / (b.t - a.t).max(1e-12)).clamp(0.0, 1.0);
        if i >= 2 && i + 1 < d.len() {
            // Catmull-Rom through the four samples around [a, b].
            let (p0, p1, p2, p3) = (d[i - 2].reading, a.reading, b.reading, d[i + 1].reading);
            let u2 = u * u;
            let u3 = u2 * u;
            Some(
                0.5 * ((2.0 * p1)
                    + (-p0 + p2) * u
                    + (2.0 * p0 - 5.0 * p1 + 4.0 * p2 - p3) * u2
                    + (-p0 + 3.0 * p1 - 3.0 * p2 + p3) * u3),
            )
        } else {
            Some(a.reading + (b.reading - a.reading) * u)
        }
    }

    /// Resolves the deferred depth reference and any keyframes waiting for
    /// a depth association.
    fn resolve_depth(&mut self) {
        if let Some((t0, z0)) = self.pending_d0 {
            if let Some(reading) = self.interp_depth(t0) {
                self.d0 = Some(reading + z0);
                self.pending_d0 = None;
            }
        }
        let Some(d0) = self.d0 else { return };
        let mut resolved = Vec::new();
        for (idx, (kf_id, t)) in self.pending_depth.iter().enumerate() {
            if let Some(reading) = self.interp_depth(*t) {
                let world_z = crate::factors::depth_from_raw(reading, d0, 0.0);
                if let Some(window) = &mut self.window {
                    window.set_keyframe_depth(*kf_id, world_z);
                }
                resolved.push(idx);
            }
        }
        for idx in resolved.into_iter().rev() {
            self.pending_depth.remove(idx);
        }
        // Entries that can no longer resolve (stream moved past them).
        let oldest = self.recent_depth.front().map(|d| d.t).unwrap_or(f64::NEG_INFINITY);
        self.pending_depth.retain(|(_, t)| *t >= oldest);
    }

    // ----- initialization phase ---------------------------------------

    fn collect_frame(&mut self, t: f64, features: Vec<CameraFeature>) -> Result<(), PipelineError> {
        if self.config.init_mode == InitMode::GroundTruth {
            return self.initialize_from_truth(t, features);
        }

        let due = {
            let Phase::Collecting { buffer, .. } = &self.phase else { unreachable!() };
            match buffer.frames.last() {
                Some(f) => t - f.t >= self.config.keyframe_max_interval - 1e-9,
                None => !self.imu_buffer.is_empty(),
            }
        };
        if !due {
            return Ok(());
        }

        // Stereo odometry pose of this candidate.
        let corruption = self.config.stereo_scale_corruption;
        let points: BTreeMap<LandmarkId, Vector3<f64>> = features
            .iter()
            .filter_map(|f| {
                triangulate_body(&self.camera, &self.calib, f, corruption).map(|p| (f.landmark_id, p))
            })
            .collect();

        let accel_mean: Vector3<f64> = if self.imu_buffer.is_empty() {
            Vector3::z()
        } else {
            self.imu_buffer.iter().map(|s| s.accel).sum::<Vector3<f64>>()
                / self.imu_buffer.len() as f64
        };

        let body_pose = {
            let Phase::Collecting { data, odometry, .. } = &self.phase else { unreachable!() };
            match (odometry.as_ref(), data.last()) {
                (None, _) => {
                    // First candidate: roll/pitch from the gravity direction
                    // seen by the accelerometer.
                    let q0 = attitude_from_gravity(&accel_mean);
                    Transform::from_quaternion(&q0, Vector3::zeros())
                }
                (Some(prev_pose), Some(prev_data)) => {
                    let prev_points: BTreeMap<LandmarkId, Vector3<f64>> = prev_data
                        .features
                        .iter()
                        .filter_map(|f| {
                            triangulate_body(&self.camera, &self.calib, f, corruption)
                                .map(|p| (f.landmark_id, p))
                        })
                        .collect();
                    let mut src = Vec::new();
                    let mut dst = Vec::new();
                    for (id, p_cur) in &points {
                        if let Some(p_prev) = prev_points.get(id) {
                            src.push(*p_cur);
                            dst.push(*p_prev);
                        }
                    }
                    match umeyama_points(&src, &dst, false) {
                        Ok((r, trans, _)) => prev_pose.compose(&Transform::new(r, trans)),
                        Err(_) => *prev_pose, // no motion estimate; stay put
                    }
                }
                _ => unreachable!(),
            }
        };

        let pre_samples = {
            let Phase::Collecting { buffer, .. } = &self.phase else { unreachable!() };
            match buffer.frames.last() {
                Some(prev) => self.imu_interval(prev.t, t),
                None => None,
            }
        };
        let pre = match pre_samples {
            Some(s) => Some((
                preintegrate(&s, Vector3::zeros(), Vector3::zeros(), &self.imu_noise)
                    .map_err(|e| PipelineError::InitFailure(e.to_string()))?,
                s,
            )),
            None => None,
        };

        let cam_pose = body_pose.compose(&self.calib.t_ic_left);

        // Candidate depth values are interpolated at the candidate
        // timestamps; readings bracket a candidate only a little later, so
        // the values are filled in retroactively below.
        let interp_at: Vec<(usize, Option<f64>)> = {
            let Phase::Collecting { buffer, .. } = &self.phase else { unreachable!() };
            buffer
                .frames
                .iter()
                .enumerate()
                .filter(|(_, f)| f.depth_reading.is_none())
                .map(|(i, f)| (i, self.interp_depth(f.t)))
                .collect()
        };
        let this_depth = self.interp_depth(t);

        let ready = {
            let Phase::Collecting { buffer, data, odometry } = &mut self.phase else {
                unreachable!()
            };
            *odometry = Some(body_pose);
            for (i, reading) in interp_at {
                buffer.frames[i].depth_reading = reading;
            }
            buffer.push(InitFrame {
                t,
                cam_pose,
                depth_reading: this_depth,
                feature_count: features.len(),
                pre_from_prev: pre.as_ref().map(|(p, _)| p.clone()),
            });
            data.push(CandidateData {
                features,
                imu_samples: pre.map(|(_, s)| s).unwrap_or_default(),
            });
            buffer.len() >= self.config.init_keyframes
        };

        if ready {
            let solution = {
                let Phase::Collecting { buffer, .. } = &self.phase else { unreachable!() };
                gate_and_initialize(buffer, &self.calib, self.imu_noise.g_mag)
            };
            match solution {
                Ok(solution) => self.seed_window_from_init(solution)?,
                Err(e) => {
                    self.last_init_error = Some(e);
                    let cap = 4 * self.config.init_keyframes;
                    let Phase::Collecting { buffer, data, .. } = &mut self.phase else {
                        unreachable!()
                    };
                    // Bound the buffer so a degenerate start cannot grow it
                    // without limit.
                    if buffer.len() > cap {
                        buffer.frames.remove(0);
                        data.remove(0);
                        buffer.frames[0].pre_from_prev = None;
                        data[0].imu_samples.clear();
                    }
                }
            }
        }
        Ok(())
    }

    fn initialize_from_truth(
        &mut self,
        t: f64,
        features: Vec<CameraFeature>,
    ) -> Result<(), PipelineError> {
        let Some(state) = self.latest_truth else { return Ok(()) };
        if self.config.use_depth {
            // Depth reference anchored at the seed state's vertical position,
            // resolved once the stream brackets this timestamp.
            self.pending_d0 = Some((t, state.position.z));
        }
        let mut window = OptimizationWindow::new(
            self.config.window_size,
            self.gravity,
            self.calib,
            self.camera,
            self.imu_noise,
        );
        let kf_id = self.next_kf_id;
        self.next_kf_id += 1;
        let observations = self.build_observations(&mut window, &state, &features);
        let ids: BTreeSet<LandmarkId> = observations.iter().map(|o| o.landmark_id).collect();
        let kf = Keyframe {
            id: kf_id,
            t,
            state,
            observations,
            sonar: self.take_sonar(t, None, &state),
            depth_world_z: None,
        };
        window.add_keyframe(kf, None)?;
        if self.config.use_depth {
            self.pending_depth.push((kf_id, t));
        }
        self.record_window(&window);
        self.snapshot_keyframe(&window, kf_id);
        self.window = Some(window);
        self.last_kf = Some((kf_id, t, ids));
        self.drop_imu_before(t);
        self.phase = Phase::Running;
        Ok(())
    }

    fn seed_window_from_init(
        &mut self,
        solution: crate::init::InitSolution,
    ) -> Result<(), PipelineError> {
        let Phase::Collecting { buffer, data, .. } = &mut self.phase else { unreachable!() };
        let buffer = std::mem::take(buffer);
        let data = std::mem::take(data);

        self.total_scale = Some(solution.total_scale());
        self.recovered_gravity = Some(solution.gravity);
        self.d0 = Some(solution.d0);

        let mut window = OptimizationWindow::new(
            self.config.window_size,
            Vector3::new(0.0, 0.0, -solution.gravity.norm()),
            self.calib,
            self.camera,
            self.imu_noise,
        );

        let mut last: Option<(u64, f64, BTreeSet<LandmarkId>)> = None;
        let mut seeded_ids = Vec::new();
        for (k, (frame, cand)) in buffer.frames.iter().zip(data.iter()).enumerate() {
            let state = solution.states[k];
            let kf_id = self.next_kf_id;
            self.next_kf_id += 1;
            let observations = self.build_observations(&mut window, &state, &cand.features);
            let ids: BTreeSet<LandmarkId> = observations.iter().map(|o| o.landmark_id).collect();
            let kf = Keyframe {
                id: kf_id,
                t: frame.t,
                state,
                observations,
                // Sonar plays no part in initialization.
                sonar: Vec::new(),
                depth_world_z: if self.config.use_depth {
                    frame
                        .depth_reading
                        .map(|d| crate::factors::depth_from_raw(d, solution.d0, 0.0))
                } else {
                    None
                },
            };
            let pre = if k == 0 {
                None
            } else {
                let samples = cand.imu_samples.clone();
                let pre =
                    preintegrate(&samples, Vector3::zeros(), Vector3::zeros(), &self.imu_noise)
                        .map_err(|e| PipelineError::InitFailure(e.to_string()))?;
                Some((pre, samples))
            };
            window.add_keyframe(kf, pre)?;
            last = Some((kf_id, frame.t, ids));
            seeded_ids.push(kf_id);
        }

        window
            .optimize(&self.config.solver)
            .map_err(|e| PipelineError::SolverFailure(e.to_string()))?;
        self.record_window(&window);
        for id in seeded_ids {
            self.snapshot_keyframe(&window, id);
        }
        if let Some((_, t, _)) = &last {
            self.drop_imu_before(*t);
        }
        self.window = Some(window);
        self.last_kf = last;
        self.phase = Phase::Running;
        Ok(())
    }

    // ----- running phase ------------------------------------------------

    fn running_frame(&mut self, t: f64, features: Vec<CameraFeature>) -> Result<(), PipelineError> {
        let Some((_, last_t, last_ids)) = &self.last_kf else { return Ok(()) };
        let ids: BTreeSet<LandmarkId> = features.iter().map(|f| f.landmark_id).collect();
        let shared = ids.intersection(last_ids).count();
        let overlap =
            if last_ids.is_empty() { 0.0 } else { shared as f64 / last_ids.len() as f64 };
        let elapsed = t - last_t;
        let is_keyframe = overlap < self.config.keyframe_overlap
            || elapsed >= self.config.keyframe_max_interval - 1e-9;
        if !is_keyframe || elapsed < 1e-3 {
            return Ok(());
        }

        let last_t = *last_t;
        let samples = self.imu_interval(last_t, t).ok_or_else(|| {
            PipelineError::SolverFailure("no inertial data over keyframe gap".into())
        })?;

        let mut window = self.window.take().expect("running phase has a window");
        let last_state = window.keyframes().last().expect("window non-empty").state;
        let pre =
            preintegrate(&samples, last_state.gyro_bias, last_state.accel_bias, &self.imu_noise)
                .map_err(|e| PipelineError::SolverFailure(e.to_string()))?;
        let state = crate::imu::predict(&last_state, &pre, &window.gravity);

        let kf_id = self.next_kf_id;
        self.next_kf_id += 1;
        let observations = self.build_observations(&mut window, &state, &features);
        let ids: BTreeSet<LandmarkId> = observations.iter().map(|o| o.landmark_id).collect();
        let kf = Keyframe {
            id: kf_id,
            t,
            state,
            observations,
            sonar: self.take_sonar(t, Some((&last_state, last_t)), &state),
            depth_world_z: None,
        };
        window.add_keyframe(kf, Some((pre, samples)))?;
        if self.config.use_depth {
            self.pending_depth.push((kf_id, t));
        }
        window
            .optimize(&self.config.solver)
            .map_err(|e| PipelineError::SolverFailure(e.to_string()))?;
        self.record_window(&window);
        self.snapshot_keyframe(&window, kf_id);
        self.drop_imu_before(t);
        self.last_kf = Some((kf_id, t, ids));

        if self.config.use_loop {
            self.try_close_loop(&mut window, kf_id);
        }
        self.window = Some(window);
        Ok(())
    }

    fn try_close_loop(&mut self, window: &mut OptimizationWindow, query: u64) {
        let Some(closer) = &mut self.closer else { return };
        for kf in window.keyframes() {
            closer.update_pose(kf.id, kf.state.pose());
        }
        if query.saturating_sub(self.last_loop_at) < self.config.loop_cooldown {
            return;
        }
        let window_ids: BTreeSet<u64> = window.keyframes().iter().map(|k| k.id).collect();
        let Some(candidate) = closer.detect(query, &window_ids) else { return };
        let query_pose = match window.keyframe(query) {
            Some(kf) => kf.state.pose(),
            None => return,
        };
        let landmarks: BTreeMap<LandmarkId, Vector3<f64>> =
            window.landmarks().iter().map(|(id, lm)| (*id, lm.position)).collect();
        let Some(validated) = closer.validate_geometry(candidate, &query_pose, &landmarks) else {
            return;
        };
        let Some(correction) = closer.relocalize(window, &validated, &self.config.solver) else {
            return;
        };
        // Guard against a wildly wrong (yet self-consistent) consensus.
        if correction.translation.norm() > 10.0 {
            return;
        }
        for kf in window.keyframes() {
            closer.update_pose(kf.id, kf.state.pose());
        }
        if closer.close_loop(&validated, &window_ids).is_ok() {
            self.loop_closures += 1;
            self.last_loop_at = query;
            // Pull the corrected history.
            let ids: Vec<u64> = closer.graph.node_ids().collect();
            for id in ids {
                if let (Some(pose), Some(sample)) =
                    (closer.graph.pose(id), self.history.get_mut(&id))
                {
                    sample.position = pose.translation;
                    sample.orientation = pose.quaternion();
                }
            }
        }
        self.record_window(window);
    }

    // ----- shared helpers -------------------------------------------------

    /// Builds keypoint observations, inserting newly seen landmarks by
    /// stereo triangulation at the given state.
    fn build_observations(
        &self,
        window: &mut OptimizationWindow,
        state: &RobotState,
        features: &[CameraFeature],
    ) -> Vec<KeypointObservation> {
        let mut observations = Vec::with_capacity(features.len());
        for f in features {
            if !window.landmarks().contains_key(&f.landmark_id) {
                let Some(p_body) = triangulate_body(&self.camera, &self.calib, f, 1.0) else {
                    continue;
                };
                let p_world = state.pose().apply(&p_body);
                window.insert_landmark(Landmark::new(f.landmark_id, p_world));
            }
            observations.push(KeypointObservation {
                landmark_id: f.landmark_id,
                left_px: Some(f.left_px),
                right_px: Some(f.right_px),
                descriptor: f.descriptor,
            });
        }
        observations
    }

    /// Sonar pings in the trailing window of the keyframe timestamp,
    /// re-expressed in the keyframe's sonar frame. A ping taken up to 150 ms
    /// before the keyframe would otherwise be measured from the wrong
    /// position; the return point is reconstructed at the interpolated ping
    /// pose and converted back to a range/head-angle pair at the keyframe.
    fn take_sonar(
        &mut self,
        t: f64,
        prev: Option<(&RobotState, f64)>,
        state: &RobotState,
    ) -> Vec<SonarMeasurement> {
        if !self.config.use_sonar {
            return Vec::new();
        }
        let lo = t - 0.15;
        let picked: Vec<SonarMeasurement> =
            self.recent_sonar.iter().filter(|s| s.t >= lo && s.t <= t + 1e-9).cloned().collect();
        while self.recent_sonar.front().map_or(false, |s| s.t < t - 0.5) {
            self.recent_sonar.pop_front();
        }
        let t_ws_kf = state.pose().compose(&self.calib.t_is);
        let inv_kf = t_ws_kf.inverse();
        picked
            .into_iter()
            .filter_map(|meas| {
                let ping_state = match prev {
                    Some((prev_state, prev_t)) if t > prev_t + 1e-9 => {
                        interpolate_state(prev_state, prev_t, state, t, meas.t)
                    }
                    _ => *state,
                };
                let hit = crate::factors::sonar_landmark(&meas, &ping_state, &self.calib);
                let in_sonar = inv_kf.apply(&hit);
                let range = in_sonar.x.hypot(in_sonar.y);
                if range < 0.05 {
                    return None;
                }
                let head = in_sonar.y.atan2(in_sonar.x).rem_euclid(std::f64::consts::TAU);
                Some(SonarMeasurement { t: meas.t, range, head_angle: head })
            })
            .collect()
    }

    fn record_window(&mut self, window: &OptimizationWindow) {
        for kf in window.keyframes() {
            self.history.insert(
                kf.id,
                PoseSample {
                    t: kf.t,
                    position: kf.state.position,
                    orientation: kf.state.orientation,
                },
            );
        }
    }

    fn snapshot_keyframe(&mut self, window: &OptimizationWindow, kf_id: u64) {
        if !self.config.use_loop {
            return;
        }
        let Some(kf) = window.keyframe(kf_id) else { return };
        let observations: Vec<SnapshotObservation> = kf
            .observations
            .iter()
            .filter_map(|o| {
                o.left_px.map(|px| SnapshotObservation {
                    landmark_id: o.landmark_id,
                    pixel: px,
                    descriptor: o.descriptor,
                })
            })
            .collect();
        let snapshot =
            KeyframeSnapshot { id: kf.id, t: kf.t, pose: kf.state.pose(), observations };
        match &mut self.closer {
            Some(closer) => closer.add_keyframe(snapshot),
            None => self.pending_snapshots.push(snapshot),
        }
    }
}

/// Roll/pitch-only attitude whose body-frame gravity direction matches the
/// averaged accelerometer reading.
pub fn attitude_from_gravity(accel_mean: &Vector3<f64>) -> Quaternion {
    let a = accel_mean.normalize();
    let target = Vector3::z();
    let cross = a.cross(&target);
    let dot = a.dot(&target).clamp(-1.0, 1.0);
    if cross.norm() < 1e-12 {
        if dot > 0.0 {
            return Quaternion::identity();
        }
        return exp_so3(&(Vector3::x() * std::f64::consts::PI));
    }
    // Rotating the body by this takes its measured gravity direction onto
    // world +z.
    exp_so3(&(cross.normalize() * dot.acos())).conjugate()
}

/// Linear pose interpolation between two keyframe states.
fn interpolate_state(
    a: &RobotState,
    t_a: f64,
    b: &RobotState,
    t_b: f64,
    t: f64,
) -> RobotState {
    let w = ((t - t_a) / (t_b - t_a)).clamp(0.0, 1.0);
    let dq = crate::geometry::log_so3(&a.orientation.conjugate().mul(&b.orientation));
    RobotState {
        position: a.position.lerp(&b.position, w),
        orientation: a.orientation.mul(&exp_so3(&(dq * w))),
        velocity: a.velocity.lerp(&b.velocity, w),
        gyro_bias: a.gyro_bias,
        accel_bias: a.accel_bias,
    }
}

/// Stereo triangulation into the body frame; `scale` models a baseline
/// calibration error.
fn triangulate_body(
    camera: &StereoCameraModel,
    calib: &ExtrinsicCalibration,
    feature: &CameraFeature,
    scale: f64,
) -> Option<Vector3<f64>> {
    let disparity = feature.left_px.x - feature.right_px.x;
    if disparity < 0.5 {
        return None;
    }
    let baseline = camera.baseline(calib);
    let depth = camera.left.fx * baseline / disparity;
    if !(0.1..=40.0).contains(&depth) {
        return None;
    }
    let p_cam = camera.left.back_project(&feature.left_px, depth) * scale;
    Some(calib.t_ic_left.apply(&p_cam))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::{NoiseSpec, Scenario, SensorRates, Trajectory, VisionLimits, WorldModel, YawMode};

    fn camera() -> StereoCameraModel {
        StereoCameraModel::symmetric(400.0, 400.0, 320.0, 240.0, 640, 480)
    }

    fn orbit_scenario(noise: NoiseSpec, duration: f64) -> Scenario {
        Scenario {
            trajectory: Trajectory::Circle {
                center: Vector3::new(0.0, 0.0, -2.0),
                radius: 3.0,
                period: 24.0,
                z_amplitude: 0.4,
                z_period: 30.0,
                yaw: YawMode::FollowVelocity,
            },
            world: WorldModel::circular_room(6.5, 10.0, 260, 7),
            camera: camera(),
            calib: ExtrinsicCalibration::forward_stereo(0.12),
            noise,
            limits: VisionLimits::default(),
            rates: SensorRates::default(),
            duration,
            d_surface: 12.0,
        }
    }

    #[test]
    fn sonar_residuals_at_truth_probe() {
        let mut scenario = orbit_scenario(NoiseSpec::zero(3), 30.0);
        scenario.world = WorldModel::box_room(6.5, 6.5, 10.0, 300, 4);
        let log = scenario.generate();
        let config = PipelineConfig {
            init_mode: InitMode::GroundTruth,
            use_loop: false,
            use_depth: false,
            seed: 3,
            ..PipelineConfig::default()
        };
        let mut pipeline =
            Pipeline::new(config, scenario.calib, scenario.camera, scenario.noise.imu);
        for r in &log.records {
            pipeline.process(r).unwrap();
        }
        // Probe the live window: evaluate every sonar term at the TRUE state.
        let window = pipeline.window.as_ref().unwrap();
        let mut worst: f64 = 0.0;
        let mut sum = 0.0;
        let mut n = 0;
        for term in window.build_cost() {
            if let crate::estimator::CostTerm::SonarRange { kf, measurement, patch, .. } = term {
                let t = window.keyframe(kf).unwrap().t;
                let truth_state = scenario.trajectory.state(t);
                let mut centroid = Vector3::zeros();
                for lm in &patch {
                    centroid += lm.position;
                }
                centroid /= patch.len() as f64;
                let resid = (truth_state.position - centroid).norm() - measurement.range;
                eprintln!("DBG kf={kf} t={t:.2} head={:.2} r={:.3} resid={resid:.4} patch={}", measurement.head_angle, measurement.range, patch.len());
                worst = worst.max(resid.abs());
                sum += resid;
                n += 1;
            }
        }
        eprintln!("DBG mean={} worst={worst} n={n}", sum / n.max(1) as f64);
    }

    #[test]
    fn ground_truth_replay_tracks_exactly() {
        let scenario = orbit_scenario(NoiseSpec::zero(3), 10.0);
        let log = scenario.generate();
        let config = PipelineConfig {
            init_mode: InitMode::GroundTruth,
            use_loop: false,
            seed: 3,
            ..PipelineConfig::default()
        };
        let out =
            Pipeline::replay(config, scenario.calib, scenario.camera, scenario.noise.imu, &log.records)
                .expect("replay");
        assert!(out.keyframes >= 15, "keyframes {}", out.keyframes);
        let aligned = crate::eval::umeyama_align(&out.estimate, &out.truth, false).unwrap();
        let est = crate::eval::apply_alignment(&out.estimate, &aligned);
        let rmse = crate::eval::compute_ate_rmse(&est, &out.truth).unwrap();
        assert!(rmse < 1e-3, "rmse {rmse}");
    }

    #[test]
    fn two_step_init_replay_recovers_scale() {
        let scenario = Scenario {
            trajectory: Trajectory::Lissajous {
                center: Vector3::new(0.0, 0.0, -2.0),
                amplitude: Vector3::new(1.2, 0.9, 0.5),
                angular_rate: Vector3::new(0.9, 1.3, 1.6),
                phase: Vector3::new(0.0, 0.7, 1.9),
                yaw: YawMode::Spin(0.15),
            },
            world: WorldModel::circular_room(6.5, 10.0, 260, 11),
            camera: camera(),
            calib: ExtrinsicCalibration::forward_stereo(0.12),
            noise: NoiseSpec::zero(5),
            limits: VisionLimits::default(),
            rates: SensorRates::default(),
            duration: 12.0,
            d_surface: 12.0,
        };
        let log = scenario.generate();
        let config = PipelineConfig {
            init_mode: InitMode::TwoStep,
            stereo_scale_corruption: 0.7,
            use_loop: false,
            use_sonar: false,
            seed: 5,
            ..PipelineConfig::default()
        };
        let out =
            Pipeline::replay(config, scenario.calib, scenario.camera, scenario.noise.imu, &log.records)
                .expect("replay");
        let total = out.total_scale.expect("initialized");
        let expected = 1.0 / 0.7;
        assert!((total - expected).abs() / expected < 0.02, "total scale {total} vs {expected}");
        // Post-initialization trajectory still follows the truth.
        let aligned = crate::eval::umeyama_align(&out.estimate, &out.truth, false).unwrap();
        let est = crate::eval::apply_alignment(&out.estimate, &aligned);
        let rmse = crate::eval::compute_ate_rmse(&est, &out.truth).unwrap();
        assert!(rmse < 0.05, "rmse {rmse}");
    }

    #[test]
    fn init_failure_reported_when_log_too_short() {
        let scenario = orbit_scenario(NoiseSpec::zero(9), 1.0);
        let log = scenario.generate();
        let config =
            PipelineConfig { init_mode: InitMode::TwoStep, seed: 9, ..PipelineConfig::default() };
        let err =
            Pipeline::replay(config, scenario.calib, scenario.camera, scenario.noise.imu, &log.records)
                .unwrap_err();
        assert!(matches!(err, PipelineError::InitFailure(_)));
    }

    #[test]
    fn replay_is_deterministic() {
        let scenario = orbit_scenario(NoiseSpec::nominal(17), 8.0);
        let log = scenario.generate();
        let config = PipelineConfig {
            init_mode: InitMode::GroundTruth,
            seed: 17,
            ..PipelineConfig::default()
        };
        let a = Pipeline::replay(
            config.clone(),
            scenario.calib,
            scenario.camera,
            scenario.noise.imu,
            &log.records,
        )
        .expect("first");
        let b =
            Pipeline::replay(config, scenario.calib, scenario.camera, scenario.noise.imu, &log.records)
                .expect("second");
        assert_eq!(a.estimate.len(), b.estimate.len());
        for (x, y) in a.estimate.iter().zip(b.estimate.iter()) {
            assert_eq!(x.position, y.position);
        }
    }
}
