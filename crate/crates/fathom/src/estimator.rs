//! Fixed-lag sliding-window estimator.
//!
//! Keyframes enter the window together with the preintegrated inertial
//! interval since their predecessor; the window assembles the joint cost
//! over stereo reprojection, IMU, sonar-range and depth factors plus the
//! marginalization prior, and minimizes it with damped Gauss-Newton
//! (Levenberg-Marquardt). When the window exceeds its capacity the oldest
//! keyframe and its exclusive landmarks are folded into a Gaussian prior by
//! Schur complement.
//!
//! The estimator is a single-writer state machine: one thread ingests
//! measurements and optimizes. Read-only keyframe snapshots may be handed to
//! other workers (loop closure) by value.

use crate::factors::{
    self, BlockKey, CameraSide, FactorResidual, KeyframeId, Landmark, LandmarkId,
    SonarMeasurement, StereoCameraModel,
};
use crate::geometry::{
    log_so3, so3_right_jacobian_inv, ErrorState, ExtrinsicCalibration, RobotState, Transform,
};
use crate::imu::{preintegrate, ImuNoiseModel, ImuSample, PreintegratedImu};
use crate::loop_closure::BinaryDescriptor;
use nalgebra::{DMatrix, DVector, Matrix3, Vector2, Vector3};
use std::collections::BTreeMap;
use thiserror::Error;

/// One tracked keypoint in a keyframe: stereo pixel measurements plus the
/// binary descriptor computed during local tracking.
#[derive(Debug, Clone)]
pub struct KeypointObservation {
    pub landmark_id: LandmarkId,
    pub left_px: Option<Vector2<f64>>,
    pub right_px: Option<Vector2<f64>>,
    pub descriptor: BinaryDescriptor,
}

/// A camera frame promoted to an optimization node.
#[derive(Debug, Clone)]
pub struct Keyframe {
    pub id: KeyframeId,
    pub t: f64,
    pub state: RobotState,
    pub observations: Vec<KeypointObservation>,
    pub sonar: Vec<SonarMeasurement>,
    /// World-frame z derived from the pressure sensor, if a reading was
    /// associated with this keyframe.
    pub depth_world_z: Option<f64>,
}

/// Solver knobs. All values must be positive.
#[derive(Debug, Clone, Copy)]
pub struct SolverConfig {
    pub max_iterations: usize,
    /// Initial Levenberg-Marquardt damping.
    pub initial_damping: f64,
    /// Terminate when the max-abs gradient entry falls below this.
    pub gradient_tol: f64,
    /// Terminate when the step norm falls below this.
    pub step_tol: f64,
    /// Huber width for reprojection terms, in whitened units.
    pub huber_reprojection: f64,
    pub pixel_sigma: f64,
    pub depth_sigma: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            max_iterations: 12,
            initial_damping: 1e-4,
            gradient_tol: 1e-10,
            step_tol: 1e-10,
            huber_reprojection: 3.0,
            pixel_sigma: factors::DEFAULT_PIXEL_SIGMA,
            depth_sigma: factors::DEFAULT_DEPTH_SIGMA,
        }
    }
}

/// Cost term emitted by [`OptimizationWindow::build_cost`].
///
/// Sonar terms freeze their visual patch (copied landmark positions) at
/// build time so the residual stays a consistent function of the keyframe
/// position during one solve.
#[derive(Debug, Clone)]
pub enum CostTerm {
    Reprojection {
        kf: KeyframeId,
        side: CameraSide,
        landmark: LandmarkId,
        observed: Vector2<f64>,
    },
    Imu {
        kf_i: KeyframeId,
        kf_j: KeyframeId,
        pre: PreintegratedImu,
        gap: f64,
    },
    SonarRange {
        kf: KeyframeId,
        measurement: SonarMeasurement,
        patch: Vec<Landmark>,
        position_cov: Matrix3<f64>,
    },
    Depth {
        kf: KeyframeId,
        world_z: f64,
    },
    /// Marginalization prior over the retained blocks.
    Marginal,
    /// Gauge fixation of the first keyframe: position plus rotation about
    /// world z.
    Gauge {
        kf: KeyframeId,
        anchor: RobotState,
    },
}

#[derive(Debug, Error)]
pub enum WindowError {
    #[error("keyframe {id} is out of order: t={t} does not exceed the last keyframe")]
    OutOfOrder { id: KeyframeId, t: f64 },
    #[error("keyframe {id} needs a preintegrated interval covering the gap to its predecessor")]
    MissingPreintegral { id: KeyframeId },
    #[error("observation references unknown landmark {0}")]
    UnknownLandmark(LandmarkId),
}

#[derive(Debug, Error)]
pub enum SolverError {
    #[error("normal equations stayed indefinite after {0} damping increases")]
    Indefinite(usize),
    #[error("state update produced a non-finite state")]
    NonFiniteState,
}

/// Gaussian prior left behind by marginalization.
///
/// Cost is `delta^T H delta + 2 b^T delta + c` where `delta` stacks the
/// boxminus of each block value against its stored linearization point.
#[derive(Debug, Clone)]
pub struct MarginalPrior {
    pub keys: Vec<BlockKey>,
    pub hessian: DMatrix<f64>,
    pub gradient: DVector<f64>,
    pub constant: f64,
    pub lin_states: BTreeMap<KeyframeId, RobotState>,
    pub lin_landmarks: BTreeMap<LandmarkId, Vector3<f64>>,
}

impl MarginalPrior {
    pub fn dim(&self) -> usize {
        self.keys.iter().map(|k| k.dim()).sum()
    }

    /// Stacked boxminus of the current values against the linearization
    /// point.
    fn delta(&self, values: &WindowValues) -> DVector<f64> {
        let mut d = DVector::zeros(self.dim());
        let mut off = 0;
        for key in &self.keys {
            match key {
                BlockKey::Pose(k) => {
                    let cur = &values.states[k];
                    let lin = &self.lin_states[k];
                    d.fixed_rows_mut::<3>(off).copy_from(&(cur.position - lin.position));
                    d.fixed_rows_mut::<3>(off + 3)
                        .copy_from(&log_so3(&lin.orientation.conjugate().mul(&cur.orientation)));
                }
                BlockKey::VelBias(k) => {
                    let cur = &values.states[k];
                    let lin = &self.lin_states[k];
                    d.fixed_rows_mut::<3>(off).copy_from(&(cur.velocity - lin.velocity));
                    d.fixed_rows_mut::<3>(off + 3).copy_from(&(cur.gyro_bias - lin.gyro_bias));
                    d.fixed_rows_mut::<3>(off + 6).copy_from(&(cur.accel_bias - lin.accel_bias));
                }
                BlockKey::Landmark(l) => {
                    let cur = values.landmarks[l];
                    let lin = self.lin_landmarks[l];
                    d.fixed_rows_mut::<3>(off).copy_from(&(cur - lin));
                }
            }
            off += key.dim();
        }
        d
    }

    pub fn cost(&self, values: &WindowValues) -> f64 {
        if self.keys.is_empty() {
            return self.constant;
        }
        let d = self.delta(values);
        (d.transpose() * &self.hessian * &d)[(0, 0)] + 2.0 * self.gradient.dot(&d) + self.constant
    }

    /// Lift Jacobian of the stacked delta with respect to local
    /// perturbations of the current values (identity except on rotation
    /// rows).
    fn lift_jacobian(&self, values: &WindowValues) -> DMatrix<f64> {
        let n = self.dim();
        let mut g = DMatrix::identity(n, n);
        let mut off = 0;
        for key in &self.keys {
            if let BlockKey::Pose(k) = key {
                let cur = &values.states[k];
                let lin = &self.lin_states[k];
                let theta = log_so3(&lin.orientation.conjugate().mul(&cur.orientation));
                let jr_inv = so3_right_jacobian_inv(&theta);
                for r in 0..3 {
                    for c in 0..3 {
                        g[(off + 3 + r, off + 3 + c)] = jr_inv[(r, c)];
                    }
                }
            }
            off += key.dim();
        }
        g
    }

    /// Rigidly re-anchors the prior after a world-frame correction has been
    /// applied to the window: linearization points move with the correction
    /// and the quadratic form is rotated accordingly, so the prior cost at
    /// the corrected states is unchanged.
    pub fn apply_rigid_correction(&mut self, correction: &Transform) {
        for s in self.lin_states.values_mut() {
            *s = transform_state(s, correction);
        }
        for l in self.lin_landmarks.values_mut() {
            *l = correction.apply(l);
        }
        // delta' = D delta with D block-diagonal: R on translation-like
        // 3-blocks, I on rotation and bias blocks.
        let n = self.dim();
        let mut d = DMatrix::identity(n, n);
        let mut off = 0;
        let r = &self.rotation_of(correction);
        for key in &self.keys {
            match key {
                BlockKey::Pose(_) => put3(&mut d, off, off, r),
                BlockKey::VelBias(_) => put3(&mut d, off, off, r),
                BlockKey::Landmark(_) => put3(&mut d, off, off, r),
            }
            off += key.dim();
        }
        self.hessian = &d * &self.hessian * d.transpose();
        self.gradient = &d * &self.gradient;
    }

    fn rotation_of(&self, correction: &Transform) -> Matrix3<f64> {
        correction.rotation
    }
}

fn put3(m: &mut DMatrix<f64>, row: usize, col: usize, block: &Matrix3<f64>) {
    for r in 0..3 {
        for c in 0..3 {
            m[(row + r, col + c)] = block[(r, c)];
        }
    }
}

/// Applies a world-frame rigid correction to a state (velocity rotates with
/// the frame, biases are body-frame quantities and stay put).
pub fn transform_state(state: &RobotState, correction: &Transform) -> RobotState {
    let q_corr = correction.quaternion();
    RobotState {
        position: correction.apply(&state.position),
        orientation: q_corr.mul(&state.orientation),
        velocity: correction.rotation * state.velocity,
        gyro_bias: state.gyro_bias,
        accel_bias: state.accel_bias,
    }
}

/// Current values of every optimizable block, detached from the window so
/// the solver can evaluate trial steps.
#[derive(Debug, Clone)]
pub struct WindowValues {
    pub states: BTreeMap<KeyframeId, RobotState>,
    pub landmarks: BTreeMap<LandmarkId, Vector3<f64>>,
}

/// Result of one window solve.
#[derive(Debug, Clone)]
pub struct SolveReport {
    pub initial_cost: f64,
    pub final_cost: f64,
    pub iterations: usize,
    /// Root-mean-square of the whitened residual vector at the solution.
    pub rms_residual: f64,
    /// Marginal position covariance per keyframe at the solution.
    pub position_covariances: BTreeMap<KeyframeId, Matrix3<f64>>,
    /// Accepted-step costs, non-increasing.
    pub cost_trace: Vec<f64>,
}

struct IntervalData {
    kf_i: KeyframeId,
    kf_j: KeyframeId,
    pre: PreintegratedImu,
    samples: Vec<ImuSample>,
    gap: f64,
}

/// Fixed-lag keyframe window.
pub struct OptimizationWindow {
    pub max_keyframes: usize,
    pub gravity: Vector3<f64>,
    pub calib: ExtrinsicCalibration,
    pub camera: StereoCameraModel,
    pub imu_noise: ImuNoiseModel,
    keyframes: Vec<Keyframe>,
    intervals: Vec<IntervalData>,
    landmarks: BTreeMap<LandmarkId, Landmark>,
    prior: Option<MarginalPrior>,
    gauge: Option<(KeyframeId, RobotState)>,
    /// Marginal position covariance per keyframe from the previous solve;
    /// feeds the sonar information matrices.
    position_cov: BTreeMap<KeyframeId, Matrix3<f64>>,
    /// Bias movement beyond this re-triggers preintegration of an interval.
    pub bias_reintegration_threshold: f64,
}

impl OptimizationWindow {
    pub fn new(
        max_keyframes: usize,
        gravity: Vector3<f64>,
        calib: ExtrinsicCalibration,
        camera: StereoCameraModel,
        imu_noise: ImuNoiseModel,
    ) -> Self {
        OptimizationWindow {
            max_keyframes,
            gravity,
            calib,
            camera,
            imu_noise,
            keyframes: Vec::new(),
            intervals: Vec::new(),
            landmarks: BTreeMap::new(),
            prior: None,
            gauge: None,
            position_cov: BTreeMap::new(),
            bias_reintegration_threshold: 1e-3,
        }
    }

    pub fn keyframes(&self) -> &[Keyframe] {
        &self.keyframes
    }

    pub fn keyframes_mut(&mut self) -> &mut [Keyframe] {
        &mut self.keyframes
    }

    pub fn landmarks(&self) -> &BTreeMap<LandmarkId, Landmark> {
        &self.landmarks
    }

    pub fn prior(&self) -> Option<&MarginalPrior> {
        self.prior.as_ref()
    }

    pub fn contains_keyframe(&self, id: KeyframeId) -> bool {
        self.keyframes.iter().any(|k| k.id == id)
    }

    pub fn keyframe(&self, id: KeyframeId) -> Option<&Keyframe> {
        self.keyframes.iter().find(|k| k.id == id)
    }

    pub fn insert_landmark(&mut self, lm: Landmark) {
        self.landmarks.insert(lm.id, lm);
    }

    /// Attaches (or replaces) the depth-derived world z of a keyframe that
    /// is still in the window. Depth readings arrive slower than keyframes,
    /// so the association is often resolved after insertion.
    pub fn set_keyframe_depth(&mut self, id: KeyframeId, world_z: f64) -> bool {
        for kf in &mut self.keyframes {
            if kf.id == id {
                kf.depth_world_z = Some(world_z);
                return true;
            }
        }
        false
    }

    pub fn position_covariance(&self, kf: KeyframeId) -> Matrix3<f64> {
        self.position_cov.get(&kf).copied().unwrap_or_else(|| {
            Matrix3::identity() * factors::SONAR_SEED_SIGMA * factors::SONAR_SEED_SIGMA
        })
    }

    /// Inserts a keyframe. All but the first require the preintegrated
    /// interval (and its raw samples, for bias re-integration) spanning the
    /// gap since the previous keyframe. Exceeding the capacity marginalizes
    /// the oldest keyframe first.
    pub fn add_keyframe(
        &mut self,
        kf: Keyframe,
        pre: Option<(PreintegratedImu, Vec<ImuSample>)>,
    ) -> Result<(), WindowError> {
        if let Some(last) = self.keyframes.last() {
            if kf.t <= last.t || kf.id <= last.id {
                return Err(WindowError::OutOfOrder { id: kf.id, t: kf.t });
            }
            let (pre, samples) = pre.ok_or(WindowError::MissingPreintegral { id: kf.id })?;
            let gap = kf.t - last.t;
            if (pre.dt - gap).abs() > 1e-6 {
                return Err(WindowError::MissingPreintegral { id: kf.id });
            }
            self.intervals.push(IntervalData { kf_i: last.id, kf_j: kf.id, pre, samples, gap });
        }
        for obs in &kf.observations {
            if !self.landmarks.contains_key(&obs.landmark_id) {
                return Err(WindowError::UnknownLandmark(obs.landmark_id));
            }
        }
        if self.gauge.is_none() && self.keyframes.is_empty() {
            self.gauge = Some((kf.id, kf.state));
        }
        self.keyframes.push(kf);
        if self.keyframes.len() > self.max_keyframes {
            self.marginalize_oldest();
        }
        Ok(())
    }

    pub fn values(&self) -> WindowValues {
        WindowValues {
            states: self.keyframes.iter().map(|k| (k.id, k.state)).collect(),
            landmarks: self.landmarks.iter().map(|(id, lm)| (*id, lm.position)).collect(),
        }
    }

    fn set_values(&mut self, values: &WindowValues) {
        for kf in &mut self.keyframes {
            kf.state = values.states[&kf.id];
        }
        for (id, lm) in &mut self.landmarks {
            lm.position = values.landmarks[id];
        }
    }

    /// Emits every measurement term of the joint cost plus the
    /// marginalization prior. Sonar and depth terms are attached to every
    /// keyframe that carries measurements.
    pub fn build_cost(&self) -> Vec<CostTerm> {
        let mut terms = Vec::new();
        for kf in &self.keyframes {
            for obs in &kf.observations {
                if let Some(px) = obs.left_px {
                    terms.push(CostTerm::Reprojection {
                        kf: kf.id,
                        side: CameraSide::Left,
                        landmark: obs.landmark_id,
                        observed: px,
                    });
                }
                if let Some(px) = obs.right_px {
                    terms.push(CostTerm::Reprojection {
                        kf: kf.id,
                        side: CameraSide::Right,
                        landmark: obs.landmark_id,
                        observed: px,
                    });
                }
            }
        }
        for iv in &self.intervals {
            terms.push(CostTerm::Imu {
                kf_i: iv.kf_i,
                kf_j: iv.kf_j,
                pre: iv.pre.clone(),
                gap: iv.gap,
            });
        }
        for kf in &self.keyframes {
            let cov = self.position_covariance(kf.id);
            for meas in &kf.sonar {
                let patch = self.sonar_patch(kf, meas);
                if !patch.is_empty() {
                    terms.push(CostTerm::SonarRange {
                        kf: kf.id,
                        measurement: *meas,
                        patch,
                        position_cov: cov,
                    });
                }
            }
            if let Some(z) = kf.depth_world_z {
                terms.push(CostTerm::Depth { kf: kf.id, world_z: z });
            }
        }
        if self.prior.is_some() {
            terms.push(CostTerm::Marginal);
        }
        terms
    }

    /// Landmarks within the patch radius of the sonar return, evaluated at
    /// the keyframe's current state. Members whose distance to the platform
    /// disagrees with the measured range are excluded: the range factor
    /// assumes the patch sits at the ensonified distance, and at oblique
    /// incidence a landmark can be inside the patch radius yet clearly
    /// nearer or farther along the beam. The residual is a relative
    /// robot-to-landmark quantity, so the gate stays valid under global
    /// drift.
    pub fn sonar_patch(&self, kf: &Keyframe, meas: &SonarMeasurement) -> Vec<Landmark> {
        let hit = factors::sonar_landmark(meas, &kf.state, &self.calib);
        self.landmarks
            .values()
            .filter(|lm| (lm.position - hit).norm() <= factors::SONAR_PATCH_RADIUS)
            .filter(|lm| {
                ((lm.position - kf.state.position).norm() - meas.range).abs()
                    <= factors::SONAR_PATCH_CONSISTENCY
            })
            .cloned()
            .collect()
    }

    fn gauge_term(&self) -> Option<CostTerm> {
        let (id, anchor) = self.gauge.as_ref()?;
        if self.contains_keyframe(*id) {
            Some(CostTerm::Gauge { kf: *id, anchor: *anchor })
        } else {
            None
        }
    }

    /// Public evaluation hook for diagnostics and tests.
    pub fn evaluate_term_pub(&self, term: &CostTerm, values: &WindowValues) -> Option<FactorResidual> {
        self.evaluate_term(term, values)
    }

    fn evaluate_term(&self, term: &CostTerm, values: &WindowValues) -> Option<FactorResidual> {
        match term {
            CostTerm::Reprojection { kf, side, landmark, observed } => {
                let state = &values.states[kf];
                let lm = Landmark::new(*landmark, values.landmarks[landmark]);
                // Unit sigma here; the solver scales by its configured pixel
                // noise at assembly time.
                factors::reprojection_residual(
                    *kf, state, &self.calib, &self.camera, *side, &lm, observed, 1.0,
                )
            }
            CostTerm::Imu { kf_i, kf_j, pre, gap } => factors::imu_residual(
                *kf_i,
                *kf_j,
                &values.states[kf_i],
                &values.states[kf_j],
                pre,
                &self.gravity,
                *gap,
            )
            .ok(),
            CostTerm::SonarRange { kf, measurement, patch, position_cov } => {
                factors::sonar_range_residual(*kf, &values.states[kf], measurement, patch, position_cov)
            }
            CostTerm::Depth { kf, world_z } => {
                Some(factors::depth_residual(*kf, &values.states[kf], *world_z, 1.0))
            }
            CostTerm::Marginal => None,
            CostTerm::Gauge { kf, anchor } => Some(gauge_residual(*kf, &values.states[kf], anchor)),
        }
    }

    /// Levenberg-Marquardt minimization of the window cost. Accepted steps
    /// never increase the (robustified) total cost.
    pub fn optimize(&mut self, config: &SolverConfig) -> Result<SolveReport, SolverError> {
        self.refresh_preintegrals();
        let mut terms = self.build_cost();
        if let Some(g) = self.gauge_term() {
            terms.push(g);
        }
        let report = self.run_lm(config, &terms, true)?;
        Ok(report)
    }

    /// Optimizes a caller-supplied subset of cost terms (the gauge term is
    /// appended automatically). Used by relocalization refinement.
    pub fn optimize_terms(
        &mut self,
        config: &SolverConfig,
        mut terms: Vec<CostTerm>,
    ) -> Result<SolveReport, SolverError> {
        if let Some(g) = self.gauge_term() {
            terms.push(g);
        }
        self.run_lm(config, &terms, false)
    }

    fn run_lm(
        &mut self,
        config: &SolverConfig,
        terms: &[CostTerm],
        want_covariances: bool,
    ) -> Result<SolveReport, SolverError> {
        let mut values = self.values();
        let (layout, mut cost, initial_cost, mut cost_trace, report);
        {
            let problem = Problem { window: self, terms, config };
            layout = problem.layout(&values);
            cost = problem.total_cost(&values);
            initial_cost = cost;
            cost_trace = vec![cost];

            if layout.dim == 0 {
                return Ok(SolveReport {
                    initial_cost,
                    final_cost: cost,
                    iterations: 0,
                    rms_residual: problem.rms_residual(&values),
                    position_covariances: BTreeMap::new(),
                    cost_trace,
                });
            }

            let mut lambda = config.initial_damping;
            let mut iterations = 0;
            let mut last_hessian: Option<DMatrix<f64>> = None;
            let mut converged = false;

            while iterations < config.max_iterations && !converged {
                let (h, g) = problem.assemble(&values, &layout);
                last_hessian = Some(h.clone());
                if g.amax() < config.gradient_tol {
                    break;
                }
                let mut accepted = false;
                let mut factorized = false;
                let mut rejects = 0;
                while rejects < 12 {
                    let mut damped = h.clone();
                    for i in 0..damped.nrows() {
                        damped[(i, i)] += lambda * damped[(i, i)].max(1e-9);
                    }
                    let Some(chol) = damped.cholesky() else {
                        lambda *= 10.0;
                        rejects += 1;
                        continue;
                    };
                    factorized = true;
                    let step = chol.solve(&(-&g));
                    let candidate = apply_step(&values, &layout, &step)
                        .map_err(|_| SolverError::NonFiniteState)?;
                    let new_cost = problem.total_cost(&candidate);
                    if new_cost.is_finite() && new_cost <= cost {
                        values = candidate;
                        cost = new_cost;
                        cost_trace.push(cost);
                        lambda = (lambda * 0.3).max(1e-12);
                        accepted = true;
                        iterations += 1;
                        if step.norm() < config.step_tol {
                            converged = true;
                        }
                        break;
                    }
                    lambda *= 10.0;
                    rejects += 1;
                }
                if !accepted {
                    if !factorized {
                        return Err(SolverError::Indefinite(rejects));
                    }
                    break;
                }
            }

            // Marginal covariances at the solution feed the next round of
            // sonar information matrices.
            let mut position_covariances = BTreeMap::new();
            if want_covariances {
                let h = match last_hessian {
                    Some(h) => h,
                    None => problem.assemble(&values, &layout).0,
                };
                let mut damped = h;
                for i in 0..damped.nrows() {
                    damped[(i, i)] += 1e-9;
                }
                if let Some(chol) = damped.cholesky() {
                    let cov = chol.inverse();
                    for kf in &self.keyframes {
                        if let Some(&off) = layout.offsets.get(&BlockKey::Pose(kf.id)) {
                            let block = cov.view((off, off), (3, 3)).into_owned();
                            position_covariances
                                .insert(kf.id, Matrix3::from_iterator(block.iter().cloned()));
                        }
                    }
                }
            }

            report = SolveReport {
                initial_cost,
                final_cost: cost,
                iterations,
                rms_residual: problem.rms_residual(&values),
                position_covariances,
                cost_trace,
            };
        }
        self.set_values(&values);
        if want_covariances {
            self.position_cov = report.position_covariances.clone();
        }
        Ok(report)
    }

    /// Re-integrates any interval whose keyframe bias estimate moved beyond
    /// the threshold since the interval was integrated.
    fn refresh_preintegrals(&mut self) {
        let states: BTreeMap<KeyframeId, RobotState> =
            self.keyframes.iter().map(|k| (k.id, k.state)).collect();
        for iv in &mut self.intervals {
            let Some(state_i) = states.get(&iv.kf_i) else { continue };
            let moved = (state_i.gyro_bias - iv.pre.bias_gyro_ref).norm()
                + (state_i.accel_bias - iv.pre.bias_accel_ref).norm();
            if moved > self.bias_reintegration_threshold && iv.samples.len() >= 2 {
                if let Ok(pre) =
                    preintegrate(&iv.samples, state_i.gyro_bias, state_i.accel_bias, &self.imu_noise)
                {
                    iv.pre = pre;
                }
            }
        }
    }

    /// Folds the oldest keyframe and its exclusive landmarks into the
    /// marginalization prior via Schur complement, then drops them from the
    /// window.
    pub fn marginalize_oldest(&mut self) {
        let Some(old) = self.keyframes.first().cloned() else { return };

        // Landmarks seen only by the outgoing keyframe.
        let mut exclusive: Vec<LandmarkId> = Vec::new();
        for obs in &old.observations {
            let seen_elsewhere = self
                .keyframes
                .iter()
                .skip(1)
                .any(|kf| kf.observations.iter().any(|o| o.landmark_id == obs.landmark_id));
            if !seen_elsewhere {
                exclusive.push(obs.landmark_id);
            }
        }
        exclusive.sort_unstable();
        exclusive.dedup();

        let mut marg_keys: Vec<BlockKey> =
            vec![BlockKey::Pose(old.id), BlockKey::VelBias(old.id)];
        marg_keys.extend(exclusive.iter().map(|l| BlockKey::Landmark(*l)));

        // Every cost term touching a marginalized block gets eliminated; the
        // existing prior and the gauge participate too.
        let mut terms: Vec<CostTerm> = Vec::new();
        for term in self.build_cost() {
            if term_touches(&term, &marg_keys, self.prior.as_ref()) {
                terms.push(term);
            }
        }
        if let Some(g) = self.gauge_term() {
            if term_touches(&g, &marg_keys, self.prior.as_ref()) {
                terms.push(g);
            }
        }

        let config = SolverConfig::default();
        let values = self.values();

        // Keys spanned by the eliminated terms, marginalized blocks first.
        let mut keys: Vec<BlockKey> = Vec::new();
        for term in &terms {
            for key in term_keys(term, self.prior.as_ref()) {
                if !keys.contains(&key) {
                    keys.push(key);
                }
            }
        }
        keys.sort();
        let mut ordered: Vec<BlockKey> =
            marg_keys.iter().filter(|k| keys.contains(k)).cloned().collect();
        for k in &keys {
            if !ordered.contains(k) {
                ordered.push(*k);
            }
        }
        let m_dim: usize =
            ordered.iter().filter(|k| marg_keys.contains(k)).map(|k| k.dim()).sum();
        let layout = BlockLayout::from_keys(&ordered);
        let (h, g, c) = {
            let problem = Problem { window: self, terms: &terms, config: &config };
            problem.assemble_with_constant(&values, &layout)
        };

        let n = layout.dim;
        let k_dim = n - m_dim;
        let keep_keys: Vec<BlockKey> =
            ordered.iter().filter(|k| !marg_keys.contains(k)).cloned().collect();

        let new_prior = if k_dim == 0 {
            None
        } else {
            let h_mm = h.view((0, 0), (m_dim, m_dim)).into_owned();
            let h_mk = h.view((0, m_dim), (m_dim, k_dim)).into_owned();
            let h_kk = h.view((m_dim, m_dim), (k_dim, k_dim)).into_owned();
            let b_m = g.rows(0, m_dim).into_owned();
            let b_k = g.rows(m_dim, k_dim).into_owned();

            let chol = match h_mm.clone().cholesky() {
                Some(c) => c,
                None => {
                    log::warn!(
                        "singular elimination block while marginalizing keyframe {}; regularizing",
                        old.id
                    );
                    let mut reg = h_mm.clone();
                    for i in 0..m_dim {
                        reg[(i, i)] += 1e-9;
                    }
                    reg.cholesky().expect("regularized elimination block still singular")
                }
            };
            let h_mm_inv_mk = chol.solve(&h_mk);
            let h_mm_inv_bm = chol.solve(&b_m);
            let mut h_star = h_kk - h_mk.transpose() * &h_mm_inv_mk;
            h_star = 0.5 * (&h_star + h_star.transpose());
            let b_star = b_k - h_mk.transpose() * &h_mm_inv_bm;
            let c_star = c - b_m.dot(&h_mm_inv_bm);

            let mut lin_states = BTreeMap::new();
            let mut lin_landmarks = BTreeMap::new();
            for key in &keep_keys {
                match key {
                    BlockKey::Pose(k) | BlockKey::VelBias(k) => {
                        lin_states.insert(*k, values.states[k]);
                    }
                    BlockKey::Landmark(l) => {
                        lin_landmarks.insert(*l, values.landmarks[l]);
                    }
                }
            }
            Some(MarginalPrior {
                keys: keep_keys,
                hessian: h_star,
                gradient: b_star,
                constant: c_star,
                lin_states,
                lin_landmarks,
            })
        };

        self.prior = new_prior;
        self.keyframes.remove(0);
        self.intervals.retain(|iv| iv.kf_i != old.id && iv.kf_j != old.id);
        for l in &exclusive {
            self.landmarks.remove(l);
        }
        self.position_cov.remove(&old.id);
    }

    /// Applies a world-frame rigid correction to every keyframe state,
    /// landmark, the gauge anchor and the prior. Used by relocalization
    /// drift feedback.
    pub fn apply_rigid_correction(&mut self, correction: &Transform) {
        for kf in &mut self.keyframes {
            kf.state = transform_state(&kf.state, correction);
        }
        for lm in self.landmarks.values_mut() {
            lm.position = correction.apply(&lm.position);
        }
        if let Some(prior) = &mut self.prior {
            prior.apply_rigid_correction(correction);
        }
        if let Some((_, anchor)) = &mut self.gauge {
            *anchor = transform_state(anchor, correction);
        }
    }

    /// Total robustified cost at the current states (measurement terms,
    /// prior and gauge).
    pub fn current_cost(&self, config: &SolverConfig) -> f64 {
        let mut terms = self.build_cost();
        if let Some(g) = self.gauge_term() {
            terms.push(g);
        }
        let problem = Problem { window: self, terms: &terms, config };
        problem.total_cost(&self.values())
    }
}

/// Gauge residual pinning the anchor keyframe: position (3 rows) plus the
/// rotation component about world z (1 row). Roll and pitch stay free, they
/// are observable through gravity.
fn gauge_residual(kf: KeyframeId, state: &RobotState, anchor: &RobotState) -> FactorResidual {
    let theta = log_so3(&anchor.orientation.conjugate().mul(&state.orientation));
    // World z expressed in the anchor body frame.
    let w_z = anchor.orientation.rotation_matrix().transpose() * Vector3::z();
    let mut residual = DVector::zeros(4);
    residual.fixed_rows_mut::<3>(0).copy_from(&(state.position - anchor.position));
    residual[3] = w_z.dot(&theta);

    let jr_inv = so3_right_jacobian_inv(&theta);
    let row = w_z.transpose() * jr_inv;
    let mut j_pose = DMatrix::zeros(4, 6);
    for i in 0..3 {
        j_pose[(i, i)] = 1.0;
        j_pose[(3, 3 + i)] = row[(0, i)];
    }
    FactorResidual {
        residual,
        jacobians: vec![(BlockKey::Pose(kf), j_pose)],
        information: DMatrix::identity(4, 4) * 1e8,
    }
}

fn term_keys(term: &CostTerm, prior: Option<&MarginalPrior>) -> Vec<BlockKey> {
    match term {
        CostTerm::Reprojection { kf, landmark, .. } => {
            vec![BlockKey::Pose(*kf), BlockKey::Landmark(*landmark)]
        }
        CostTerm::Imu { kf_i, kf_j, .. } => vec![
            BlockKey::Pose(*kf_i),
            BlockKey::VelBias(*kf_i),
            BlockKey::Pose(*kf_j),
            BlockKey::VelBias(*kf_j),
        ],
        CostTerm::SonarRange { kf, .. } | CostTerm::Depth { kf, .. } => vec![BlockKey::Pose(*kf)],
        CostTerm::Gauge { kf, .. } => vec![BlockKey::Pose(*kf)],
        CostTerm::Marginal => prior.map(|p| p.keys.clone()).unwrap_or_default(),
    }
}

fn term_touches(term: &CostTerm, marg_keys: &[BlockKey], prior: Option<&MarginalPrior>) -> bool {
    match term {
        // The prior always participates in marginalization.
        CostTerm::Marginal => true,
        _ => term_keys(term, prior).iter().any(|k| marg_keys.contains(k)),
    }
}

struct BlockLayout {
    keys: Vec<BlockKey>,
    offsets: BTreeMap<BlockKey, usize>,
    dim: usize,
}

impl BlockLayout {
    fn from_keys(keys: &[BlockKey]) -> Self {
        let mut offsets = BTreeMap::new();
        let mut dim = 0;
        for k in keys {
            offsets.insert(*k, dim);
            dim += k.dim();
        }
        BlockLayout { keys: keys.to_vec(), offsets, dim }
    }
}

fn apply_step(
    values: &WindowValues,
    layout: &BlockLayout,
    step: &DVector<f64>,
) -> Result<WindowValues, crate::geometry::GeometryError> {
    let mut out = values.clone();
    for key in &layout.keys {
        let off = layout.offsets[key];
        match key {
            BlockKey::Pose(k) => {
                let mut es = ErrorState::zero();
                es.dp = Vector3::new(step[off], step[off + 1], step[off + 2]);
                es.dtheta = Vector3::new(step[off + 3], step[off + 4], step[off + 5]);
                let s = out.states[k].boxplus(&es)?;
                out.states.insert(*k, s);
            }
            BlockKey::VelBias(k) => {
                let mut es = ErrorState::zero();
                es.dv = Vector3::new(step[off], step[off + 1], step[off + 2]);
                es.dbg = Vector3::new(step[off + 3], step[off + 4], step[off + 5]);
                es.dba = Vector3::new(step[off + 6], step[off + 7], step[off + 8]);
                let s = out.states[k].boxplus(&es)?;
                out.states.insert(*k, s);
            }
            BlockKey::Landmark(l) => {
                let d = Vector3::new(step[off], step[off + 1], step[off + 2]);
                let p = out.landmarks[l] + d;
                if !p.iter().all(|v| v.is_finite()) {
                    return Err(crate::geometry::GeometryError::NonFinite("landmark step"));
                }
                out.landmarks.insert(*l, p);
            }
        }
    }
    Ok(out)
}

/// A window plus the cost terms and config it is being solved under.
struct Problem<'a> {
    window: &'a OptimizationWindow,
    terms: &'a [CostTerm],
    config: &'a SolverConfig,
}

impl<'a> Problem<'a> {
    fn layout(&self, values: &WindowValues) -> BlockLayout {
        let mut keys: Vec<BlockKey> = Vec::new();
        for term in self.terms {
            for key in term_keys(term, self.window.prior.as_ref()) {
                if !keys.contains(&key) {
                    keys.push(key);
                }
            }
        }
        keys.retain(|k| match k {
            BlockKey::Pose(id) | BlockKey::VelBias(id) => values.states.contains_key(id),
            BlockKey::Landmark(id) => values.landmarks.contains_key(id),
        });
        keys.sort();
        BlockLayout::from_keys(&keys)
    }

    /// Reprojection and depth residuals are built with unit sigma and
    /// weighted here, so config changes never touch the factor functions.
    fn weight_for(&self, term: &CostTerm) -> f64 {
        match term {
            CostTerm::Reprojection { .. } => {
                1.0 / (self.config.pixel_sigma * self.config.pixel_sigma)
            }
            CostTerm::Depth { .. } => 1.0 / (self.config.depth_sigma * self.config.depth_sigma),
            _ => 1.0,
        }
    }

    /// Robust (Huber) cost of a single evaluated term.
    fn term_cost(&self, term: &CostTerm, factor: &FactorResidual) -> f64 {
        let raw = factor.squared_error() * self.weight_for(term);
        if let CostTerm::Reprojection { .. } = term {
            let k = self.config.huber_reprojection;
            let u = raw.sqrt();
            if u > k {
                return 2.0 * k * u - k * k;
            }
        }
        raw
    }

    fn total_cost(&self, values: &WindowValues) -> f64 {
        let mut cost = 0.0;
        for term in self.terms {
            if let CostTerm::Marginal = term {
                if let Some(prior) = &self.window.prior {
                    cost += prior.cost(values);
                }
                continue;
            }
            if let Some(factor) = self.window.evaluate_term(term, values) {
                cost += self.term_cost(term, &factor);
            }
        }
        cost
    }

    fn rms_residual(&self, values: &WindowValues) -> f64 {
        let mut sum = 0.0;
        let mut dims = 0usize;
        for term in self.terms {
            if let CostTerm::Marginal | CostTerm::Gauge { .. } = term {
                continue;
            }
            if let Some(factor) = self.window.evaluate_term(term, values) {
                sum += factor.squared_error() * self.weight_for(term);
                dims += factor.residual.len();
            }
        }
        if dims == 0 {
            0.0
        } else {
            (sum / dims as f64).sqrt()
        }
    }

    fn assemble(&self, values: &WindowValues, layout: &BlockLayout) -> (DMatrix<f64>, DVector<f64>) {
        let (h, g, _) = self.assemble_with_constant(values, layout);
        (h, g)
    }

    fn assemble_with_constant(
        &self,
        values: &WindowValues,
        layout: &BlockLayout,
    ) -> (DMatrix<f64>, DVector<f64>, f64) {
        let n = layout.dim;
        let mut h = DMatrix::zeros(n, n);
        let mut g = DVector::zeros(n);
        let mut c = 0.0;

        for term in self.terms {
            if let CostTerm::Marginal = term {
                if let Some(prior) = &self.window.prior {
                    let lift = prior.lift_jacobian(values);
                    let delta = prior.delta(values);
                    let hp = lift.transpose() * &prior.hessian * &lift;
                    let gp = lift.transpose() * (&prior.hessian * &delta + &prior.gradient);
                    c += prior.cost(values);
                    let mut row_off = 0;
                    for key_a in &prior.keys {
                        let Some(&la) = layout.offsets.get(key_a) else {
                            row_off += key_a.dim();
                            continue;
                        };
                        for r in 0..key_a.dim() {
                            g[la + r] += gp[row_off + r];
                        }
                        let mut col_off = 0;
                        for key_b in &prior.keys {
                            let Some(&lb) = layout.offsets.get(key_b) else {
                                col_off += key_b.dim();
                                continue;
                            };
                            for r in 0..key_a.dim() {
                                for cc in 0..key_b.dim() {
                                    h[(la + r, lb + cc)] += hp[(row_off + r, col_off + cc)];
                                }
                            }
                            col_off += key_b.dim();
                        }
                        row_off += key_a.dim();
                    }
                }
                continue;
            }

            let Some(factor) = self.window.evaluate_term(term, values) else { continue };
            let base_w = self.weight_for(term);
            // Huber: scale the quadratic model by the IRLS weight.
            let mut w = base_w;
            if let CostTerm::Reprojection { .. } = term {
                let u = (factor.squared_error() * base_w).sqrt();
                let k = self.config.huber_reprojection;
                if u > k {
                    w *= k / u;
                }
            }
            c += self.term_cost(term, &factor);

            let pr = &factor.information * &factor.residual;
            for (key_a, j_a) in &factor.jacobians {
                let Some(&la) = layout.offsets.get(key_a) else { continue };
                let ga = j_a.transpose() * &pr * w;
                for r in 0..ga.len() {
                    g[la + r] += ga[r];
                }
                for (key_b, j_b) in &factor.jacobians {
                    let Some(&lb) = layout.offsets.get(key_b) else { continue };
                    let hb = j_a.transpose() * &factor.information * j_b * w;
                    for r in 0..hb.nrows() {
                        for cc in 0..hb.ncols() {
                            h[(la + r, lb + cc)] += hb[(r, cc)];
                        }
                    }
                }
            }
        }
        (h, g, c)
    }
}
