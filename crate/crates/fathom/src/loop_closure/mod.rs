//! Loop closing and relocalization.
//!
//! Keyframes are summarized as bag-of-binary-words vectors and stored in a
//! database alongside a pose graph of covisibility edges. Each new keyframe
//! queries the database for candidates outside the current marginalization
//! window whose similarity beats every pose-graph neighbor of the query;
//! the best candidate is geometrically validated by descriptor matching and
//! PnP RANSAC against the window's landmarks. A validated loop yields a
//! drift correction fed back to the sliding-window estimator and a loop
//! edge for 6-DoF pose-graph optimization.
//!
//! The loop closer runs as an independent worker in spirit: it consumes
//! immutable keyframe snapshots and produces correction messages. Nothing
//! here shares mutable state with the estimator.

pub mod bow;
pub mod pnp;
pub mod pose_graph;

pub use bow::{BinaryDescriptor, BowVector, KeyframeDatabase, Vocabulary, VocabularyError};
pub use pnp::{solve_pnp_ransac, PnpRansacConfig, PnpResult};
pub use pose_graph::{EdgeKind, PoseGraph, PoseGraphEdge, PoseGraphError, PoseGraphReport};

use crate::estimator::{CostTerm, OptimizationWindow, SolverConfig};
use crate::factors::{LandmarkId, PinholeIntrinsics};
use crate::geometry::Transform;
use nalgebra::{Vector2, Vector3};
use std::collections::{BTreeMap, BTreeSet};

/// One keypoint of a keyframe snapshot (left camera).
#[derive(Debug, Clone)]
pub struct SnapshotObservation {
    pub landmark_id: LandmarkId,
    pub pixel: Vector2<f64>,
    pub descriptor: BinaryDescriptor,
}

/// Immutable keyframe view handed to the loop-closure worker.
#[derive(Debug, Clone)]
pub struct KeyframeSnapshot {
    pub id: u64,
    pub t: f64,
    /// World-from-body pose estimate at snapshot time.
    pub pose: Transform,
    pub observations: Vec<SnapshotObservation>,
}

/// A place-recognition hit, before and after geometric validation.
#[derive(Debug, Clone)]
pub struct LoopCandidate {
    pub query: u64,
    pub matched: u64,
    pub score: f64,
    /// Index pairs (query observation, matched observation) from 2D-2D
    /// descriptor matching.
    pub matches_2d2d: Vec<(usize, usize)>,
    /// 3D window landmarks paired with their pixel in the matched keyframe.
    pub matches_3d2d: Vec<(Vector3<f64>, Vector2<f64>)>,
    /// Validated relative measurement `P_matched^-1 * P_query` over
    /// body-to-world poses; present only after geometric validation
    /// succeeded.
    pub relative_pose: Option<Transform>,
    /// PnP inlier count from validation.
    pub inliers: usize,
}

#[derive(Debug, Clone)]
pub struct LoopCloserConfig {
    /// Keyframes sharing more than this fraction of tracked keypoints are
    /// covisible.
    pub covisibility_ratio: f64,
    /// Covisibility edges only form within this keyframe-id distance: the
    /// predicate reflects continuous local tracking, not place revisits.
    pub covisibility_horizon: u64,
    /// Maximum Hamming distance for a descriptor match.
    pub match_max_hamming: u32,
    pub pnp: PnpRansacConfig,
    /// Huber width for loop edges in the pose graph, tangent-space units.
    pub huber_loop: f64,
}

impl Default for LoopCloserConfig {
    fn default() -> Self {
        LoopCloserConfig {
            covisibility_ratio: 0.75,
            covisibility_horizon: 15,
            match_max_hamming: 80,
            pnp: PnpRansacConfig::default(),
            huber_loop: 1.0,
        }
    }
}

/// Loop detection, validation and relocalization state.
pub struct LoopCloser {
    vocabulary: Vocabulary,
    database: KeyframeDatabase,
    frames: BTreeMap<u64, KeyframeSnapshot>,
    pub graph: PoseGraph,
    intrinsics: PinholeIntrinsics,
    /// Body-from-left-camera mount.
    t_ic_left: Transform,
    pub config: LoopCloserConfig,
}

impl LoopCloser {
    pub fn new(
        vocabulary: Vocabulary,
        intrinsics: PinholeIntrinsics,
        t_ic_left: Transform,
        config: LoopCloserConfig,
    ) -> Self {
        LoopCloser {
            vocabulary,
            database: KeyframeDatabase::new(),
            frames: BTreeMap::new(),
            graph: PoseGraph::new(),
            intrinsics,
            t_ic_left,
            config,
        }
    }

    pub fn vocabulary(&self) -> &Vocabulary {
        &self.vocabulary
    }

    pub fn frame(&self, id: u64) -> Option<&KeyframeSnapshot> {
        self.frames.get(&id)
    }

    pub fn frame_count(&self) -> usize {
        self.frames.len()
    }

    /// Shared-keypoint ratio between two snapshots, normalized by the
    /// smaller keypoint set; symmetric by construction.
    pub fn matched_ratio(a: &KeyframeSnapshot, b: &KeyframeSnapshot) -> f64 {
        if a.observations.is_empty() || b.observations.is_empty() {
            return 0.0;
        }
        let ids_a: BTreeSet<LandmarkId> = a.observations.iter().map(|o| o.landmark_id).collect();
        let shared = b.observations.iter().filter(|o| ids_a.contains(&o.landmark_id)).count();
        shared as f64 / a.observations.len().min(b.observations.len()) as f64
    }

    /// Registers a keyframe: BoW vector into the database, node plus
    /// covisibility edges into the pose graph. Only keypoints tracked by
    /// the frontend are used; no new features are extracted here.
    pub fn add_keyframe(&mut self, snapshot: KeyframeSnapshot) {
        let descriptors: Vec<BinaryDescriptor> =
            snapshot.observations.iter().map(|o| o.descriptor).collect();
        let vector = self.vocabulary.transform(&descriptors);
        self.database.insert(snapshot.id, vector);
        self.graph.add_node(snapshot.id, snapshot.pose);
        for (other_id, other) in &self.frames {
            if snapshot.id.abs_diff(*other_id) > self.config.covisibility_horizon {
                continue;
            }
            let ratio = Self::matched_ratio(&snapshot, other);
            if ratio > self.config.covisibility_ratio {
                self.graph.add_edge(PoseGraph::edge_from_poses(
                    *other_id,
                    snapshot.id,
                    &other.pose,
                    &snapshot.pose,
                    EdgeKind::Covisibility,
                ));
            }
        }
        self.frames.insert(snapshot.id, snapshot);
    }

    /// Refreshes the stored pose of a keyframe (window re-optimization).
    pub fn update_pose(&mut self, id: u64, pose: Transform) {
        if let Some(f) = self.frames.get_mut(&id) {
            f.pose = pose;
        }
        if self.graph.pose(id).is_some() {
            self.graph.set_pose(id, pose);
        }
    }

    /// Queries the database for the query keyframe. Candidates inside the
    /// marginalization window or covisible with the query are excluded, and
    /// a candidate must score at least as well as the query's pose-graph
    /// neighbors. The best survivor is returned.
    pub fn detect(&self, query: u64, window_ids: &BTreeSet<u64>) -> Option<LoopCandidate> {
        let vector = self.database.vector(query)?.clone();
        let neighbors = self.graph.neighbors(query);
        let ranked = self.database.query(&vector, &|id| {
            id == query || window_ids.contains(&id) || neighbors.contains(&id)
        });
        let best = ranked.first()?;

        // Gate on the query's covisibility neighborhood: a genuine revisit
        // should look at least as similar as the places the query is
        // already connected to.
        let neighbor_floor = neighbors
            .iter()
            .filter_map(|n| self.database.vector(*n).map(|v| Vocabulary::score(&vector, v)))
            .fold(f64::INFINITY, f64::min);
        if neighbor_floor.is_finite() && best.1 < neighbor_floor {
            return None;
        }
        Some(LoopCandidate {
            query,
            matched: best.0,
            score: best.1,
            matches_2d2d: Vec::new(),
            matches_3d2d: Vec::new(),
            relative_pose: None,
            inliers: 0,
        })
    }

    /// Mutual-nearest descriptor matching between two observation sets.
    fn match_descriptors(
        &self,
        query: &[SnapshotObservation],
        candidate: &[SnapshotObservation],
    ) -> Vec<(usize, usize)> {
        let nearest = |from: &[SnapshotObservation], to: &[SnapshotObservation], i: usize| {
            let mut best = usize::MAX;
            let mut best_d = u32::MAX;
            for (j, o) in to.iter().enumerate() {
                let d = from[i].descriptor.hamming(&o.descriptor);
                if d < best_d {
                    best_d = d;
                    best = j;
                }
            }
            (best, best_d)
        };
        let mut matches = Vec::new();
        for qi in 0..query.len() {
            let (cj, d) = nearest(query, candidate, qi);
            if cj == usize::MAX || d > self.config.match_max_hamming {
                continue;
            }
            let (back, _) = nearest(candidate, query, cj);
            if back == qi {
                matches.push((qi, cj));
            }
        }
        matches
    }

    /// Geometric validation: 2D-2D descriptor matching, then 3D-2D
    /// correspondences between known window landmarks and candidate
    /// keypoints, validated by PnP RANSAC. On success the candidate carries
    /// the measured relative pose `T_matched * T_query^-1`.
    pub fn validate_geometry(
        &self,
        mut candidate: LoopCandidate,
        query_estimate: &Transform,
        window_landmarks: &BTreeMap<LandmarkId, Vector3<f64>>,
    ) -> Option<LoopCandidate> {
        let query_frame = self.frames.get(&candidate.query)?;
        let matched_frame = self.frames.get(&candidate.matched)?;

        candidate.matches_2d2d =
            self.match_descriptors(&query_frame.observations, &matched_frame.observations);

        let mut points = Vec::new();
        let mut pixels = Vec::new();
        for (qi, cj) in &candidate.matches_2d2d {
            let lm = query_frame.observations[*qi].landmark_id;
            if let Some(p) = window_landmarks.get(&lm) {
                points.push(*p);
                pixels.push(matched_frame.observations[*cj].pixel);
            }
        }
        candidate.matches_3d2d = points.iter().cloned().zip(pixels.iter().cloned()).collect();
        if points.len() < self.config.pnp.min_inliers {
            return None;
        }

        let result = solve_pnp_ransac(&points, &pixels, &self.intrinsics, &self.config.pnp)?;
        candidate.inliers = result.inliers.len();

        // Camera-from-world of the matched frame in the *current* world;
        // convert to the body pose and take the relative against the query's
        // current estimate. Both live in the same (drifted) frame, so the
        // global drift cancels in the relative.
        let t_wc = result.t_cw.inverse();
        let matched_body = t_wc.compose(&self.t_ic_left.inverse());
        candidate.relative_pose = Some(matched_body.inverse().compose(query_estimate));
        Some(candidate)
    }

    /// Drift implied by a validated loop: the transform taking the query's
    /// current estimate onto its loop-implied pose.
    pub fn drift_correction(&self, candidate: &LoopCandidate, query_estimate: &Transform) -> Option<Transform> {
        let relative = candidate.relative_pose?;
        let matched_pose = self.graph.pose(candidate.matched)?;
        // Zero edge error means P_query = P_matched * rel.
        let implied = matched_pose.compose(&relative);
        Some(implied.compose(&query_estimate.inverse()))
    }

    /// Relocalization drift feedback: rigidly corrects the window onto the
    /// loop-implied pose, then refines with an additional optimization over
    /// the matched landmarks only (reprojection plus sonar terms).
    ///
    /// Returns the correction that was applied.
    pub fn relocalize(
        &self,
        window: &mut OptimizationWindow,
        candidate: &LoopCandidate,
        config: &SolverConfig,
    ) -> Option<Transform> {
        let query_estimate = window.keyframe(candidate.query)?.state.pose();
        let correction = self.drift_correction(candidate, &query_estimate)?;
        window.apply_rigid_correction(&correction);

        // Matched landmark ids still present in the window.
        let query_frame = self.frames.get(&candidate.query)?;
        let matched_ids: BTreeSet<LandmarkId> = candidate
            .matches_2d2d
            .iter()
            .map(|(qi, _)| query_frame.observations[*qi].landmark_id)
            .collect();
        let terms: Vec<CostTerm> = window
            .build_cost()
            .into_iter()
            .filter(|t| match t {
                CostTerm::Reprojection { landmark, .. } => matched_ids.contains(landmark),
                CostTerm::SonarRange { .. } => true,
                _ => false,
            })
            .collect();
        if !terms.is_empty() {
            let _ = window.optimize_terms(config, terms);
        }
        Some(correction)
    }

    /// Adds the validated loop edge and runs pose-graph optimization with
    /// the given nodes held fixed (typically the freshly corrected window
    /// keyframes).
    pub fn close_loop(
        &mut self,
        candidate: &LoopCandidate,
        fixed: &BTreeSet<u64>,
    ) -> Result<PoseGraphReport, PoseGraphError> {
        let relative = candidate.relative_pose.expect("validated candidate");
        self.graph.add_edge(PoseGraphEdge {
            i: candidate.query,
            j: candidate.matched,
            relative,
            kind: EdgeKind::Loop,
        });
        self.graph.optimize(self.config.huber_loop, fixed)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::estimator::{Keyframe, KeypointObservation, OptimizationWindow};
    use crate::factors::{Landmark, StereoCameraModel};
    use crate::geometry::{exp_so3, ExtrinsicCalibration, RobotState};
    use crate::imu::ImuNoiseModel;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn build_vocab(seed: u64) -> (Vocabulary, Vec<BinaryDescriptor>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let corpus: Vec<BinaryDescriptor> =
            (0..600).map(|_| BinaryDescriptor::random(&mut rng)).collect();
        let vocab = Vocabulary::build(&corpus, 8, 2, seed).unwrap();
        (vocab, corpus)
    }

    fn intrinsics() -> PinholeIntrinsics {
        PinholeIntrinsics { fx: 400.0, fy: 400.0, cx: 320.0, cy: 240.0 }
    }

    /// A synthetic place: world landmarks in front of a pose, with exact
    /// left-camera projections and per-landmark signature descriptors.
    fn make_snapshot(
        id: u64,
        pose: &Transform,
        landmarks: &[(LandmarkId, Vector3<f64>, BinaryDescriptor)],
        t_ic: &Transform,
        flip: Option<(&mut ChaCha8Rng, f64)>,
    ) -> KeyframeSnapshot {
        let intr = intrinsics();
        let mut observations = Vec::new();
        let mut flip = flip;
        for (lm, p, desc) in landmarks {
            let cam = t_ic.inverse().apply(&pose.inverse().apply(p));
            if let Some(px) = intr.project(&cam) {
                let descriptor = match &mut flip {
                    Some((rng, rate)) => desc.with_bit_flips(rng, *rate),
                    None => *desc,
                };
                observations.push(SnapshotObservation { landmark_id: *lm, pixel: px, descriptor });
            }
        }
        KeyframeSnapshot { id, t: id as f64 * 0.5, pose: *pose, observations }
    }

    fn scene_landmarks(
        rng: &mut ChaCha8Rng,
        n: usize,
        center: Vector3<f64>,
    ) -> Vec<(LandmarkId, Vector3<f64>, BinaryDescriptor)> {
        use rand::Rng;
        (0..n)
            .map(|k| {
                (
                    k as u64,
                    center
                        + Vector3::new(
                            rng.gen_range(3.0..6.0),
                            rng.gen_range(-2.0..2.0),
                            rng.gen_range(-1.5..1.5),
                        ),
                    BinaryDescriptor::random(rng),
                )
            })
            .collect()
    }

    #[test]
    fn self_query_outside_window_ranks_first() {
        let (vocab, _) = build_vocab(1);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let landmarks = scene_landmarks(&mut rng, 30, Vector3::zeros());
        let t_ic = Transform::identity();
        let mut closer = LoopCloser::new(vocab, intrinsics(), t_ic, LoopCloserConfig::default());
        // Two distinct places far apart plus the query revisiting place 0.
        let pose0 = Transform::new(nalgebra::Matrix3::identity(), Vector3::zeros());
        let far = scene_landmarks(&mut rng, 30, Vector3::new(100.0, 0.0, 0.0));
        let far: Vec<_> = far.iter().map(|(id, p, d)| (id + 1000, *p, *d)).collect();
        let pose1 = Transform::new(nalgebra::Matrix3::identity(), Vector3::new(100.0, 0.0, 0.0));
        closer.add_keyframe(make_snapshot(0, &pose0, &landmarks, &t_ic, None));
        closer.add_keyframe(make_snapshot(1, &pose1, &far, &t_ic, None));
        // Revisit with light descriptor noise.
        let mut noise_rng = ChaCha8Rng::seed_from_u64(3);
        closer.add_keyframe(make_snapshot(
            50,
            &pose0,
            &landmarks,
            &t_ic,
            Some((&mut noise_rng, 0.02)),
        ));
        let window: BTreeSet<u64> = [50u64].into_iter().collect();
        let candidate = closer.detect(50, &window).expect("candidate");
        assert_eq!(candidate.matched, 0);
        assert!(candidate.score > 0.5);
    }

    #[test]
    fn query_excludes_window_members() {
        let (vocab, _) = build_vocab(5);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let landmarks = scene_landmarks(&mut rng, 25, Vector3::zeros());
        let t_ic = Transform::identity();
        let mut closer = LoopCloser::new(vocab, intrinsics(), t_ic, LoopCloserConfig::default());
        let pose = Transform::identity();
        closer.add_keyframe(make_snapshot(0, &pose, &landmarks, &t_ic, None));
        closer.add_keyframe(make_snapshot(1, &pose, &landmarks, &t_ic, None));
        // Everything except the query itself is inside the window: no
        // candidates allowed.
        let window: BTreeSet<u64> = [0u64, 1].into_iter().collect();
        assert!(closer.detect(1, &window).is_none());
    }

    #[test]
    fn validation_accepts_identical_pose_with_identity_relative() {
        let (vocab, _) = build_vocab(7);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let landmarks = scene_landmarks(&mut rng, 40, Vector3::zeros());
        let t_ic = Transform::identity();
        let mut closer = LoopCloser::new(vocab, intrinsics(), t_ic, LoopCloserConfig::default());
        let pose = Transform::from_quaternion(
            &exp_so3(&Vector3::new(0.0, 0.0, 0.3)),
            Vector3::new(0.5, -0.2, 0.1),
        );
        closer.add_keyframe(make_snapshot(0, &pose, &landmarks, &t_ic, None));
        closer.add_keyframe(make_snapshot(40, &pose, &landmarks, &t_ic, None));

        let window_landmarks: BTreeMap<LandmarkId, Vector3<f64>> =
            landmarks.iter().map(|(id, p, _)| (*id, *p)).collect();
        let candidate = closer.detect(40, &BTreeSet::from([40u64])).unwrap();
        let validated = closer
            .validate_geometry(candidate, &pose, &window_landmarks)
            .expect("accepted");
        let rel = validated.relative_pose.unwrap();
        assert!(rel.translation.norm() < 1e-6, "translation {}", rel.translation.norm());
        assert!((rel.rotation - nalgebra::Matrix3::identity()).norm() < 1e-6);
        assert!(validated.inliers >= 12);
    }

    #[test]
    fn validation_rejects_five_matches() {
        let (vocab, _) = build_vocab(9);
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let landmarks = scene_landmarks(&mut rng, 5, Vector3::zeros());
        let t_ic = Transform::identity();
        let mut closer = LoopCloser::new(vocab, intrinsics(), t_ic, LoopCloserConfig::default());
        let pose = Transform::identity();
        closer.add_keyframe(make_snapshot(0, &pose, &landmarks, &t_ic, None));
        closer.add_keyframe(make_snapshot(30, &pose, &landmarks, &t_ic, None));
        let window_landmarks: BTreeMap<LandmarkId, Vector3<f64>> =
            landmarks.iter().map(|(id, p, _)| (*id, *p)).collect();
        let candidate = closer.detect(30, &BTreeSet::from([30u64])).unwrap();
        assert!(closer.validate_geometry(candidate, &pose, &window_landmarks).is_none());
    }

    /// Builds a tiny window seeing the given landmarks from one keyframe.
    fn window_with(
        landmarks: &[(LandmarkId, Vector3<f64>, BinaryDescriptor)],
        state: RobotState,
        kf_id: u64,
    ) -> OptimizationWindow {
        let calib = ExtrinsicCalibration::collocated();
        let camera = StereoCameraModel::symmetric(400.0, 400.0, 320.0, 240.0, 640, 480);
        let mut window = OptimizationWindow::new(
            5,
            Vector3::new(0.0, 0.0, -9.81),
            calib,
            camera,
            ImuNoiseModel::default(),
        );
        let mut observations = Vec::new();
        for (id, p, desc) in landmarks {
            window.insert_landmark(Landmark::new(*id, *p));
            let cam = state.pose().inverse().apply(p);
            if let Some(px) = intrinsics().project(&cam) {
                observations.push(KeypointObservation {
                    landmark_id: *id,
                    left_px: Some(px),
                    right_px: None,
                    descriptor: *desc,
                });
            }
        }
        window
            .add_keyframe(
                Keyframe {
                    id: kf_id,
                    t: kf_id as f64 * 0.5,
                    state,
                    observations,
                    sonar: vec![],
                    depth_world_z: None,
                },
                None,
            )
            .unwrap();
        window
    }

    #[test]
    fn relocalize_zero_drift_is_identity() {
        let (vocab, _) = build_vocab(11);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let landmarks = scene_landmarks(&mut rng, 40, Vector3::zeros());
        let t_ic = Transform::identity();
        let mut closer = LoopCloser::new(vocab, intrinsics(), t_ic, LoopCloserConfig::default());
        let pose = Transform::identity();
        closer.add_keyframe(make_snapshot(0, &pose, &landmarks, &t_ic, None));
        closer.add_keyframe(make_snapshot(70, &pose, &landmarks, &t_ic, None));

        let state = RobotState::identity();
        let mut window = window_with(&landmarks, state, 70);
        let before = window.keyframes()[0].state;
        let window_landmarks: BTreeMap<LandmarkId, Vector3<f64>> =
            landmarks.iter().map(|(id, p, _)| (*id, *p)).collect();
        let candidate = closer.detect(70, &BTreeSet::from([70u64])).unwrap();
        let validated = closer.validate_geometry(candidate, &pose, &window_landmarks).unwrap();
        let correction = closer
            .relocalize(&mut window, &validated, &SolverConfig::default())
            .unwrap();
        assert!(correction.translation.norm() < 1e-9);
        assert!((correction.rotation - nalgebra::Matrix3::identity()).norm() < 1e-9);
        let after = window.keyframes()[0].state;
        assert!((after.position - before.position).norm() < 1e-9);
        assert!(after.orientation.angle_to(&before.orientation) < 1e-9);
    }

    #[test]
    fn relocalize_removes_injected_drift() {
        let (vocab, _) = build_vocab(13);
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let landmarks = scene_landmarks(&mut rng, 40, Vector3::zeros());
        let t_ic = Transform::identity();
        let mut closer = LoopCloser::new(vocab, intrinsics(), t_ic, LoopCloserConfig::default());
        let true_pose = Transform::identity();
        closer.add_keyframe(make_snapshot(0, &true_pose, &landmarks, &t_ic, None));

        // The revisiting keyframe believes it is 0.5 m away from where it
        // truly is; its landmarks share the same drift.
        let drift = Transform::new(nalgebra::Matrix3::identity(), Vector3::new(0.5, 0.0, 0.0));
        let drifted_landmarks: Vec<(LandmarkId, Vector3<f64>, BinaryDescriptor)> =
            landmarks.iter().map(|(id, p, d)| (*id, drift.apply(p), *d)).collect();
        let drifted_state = RobotState {
            position: drift.translation,
            ..RobotState::identity()
        };
        let mut window = window_with(&drifted_landmarks, drifted_state, 80);
        closer.add_keyframe(make_snapshot(80, &drifted_state.pose(), &drifted_landmarks, &t_ic, None));

        let window_landmarks: BTreeMap<LandmarkId, Vector3<f64>> =
            drifted_landmarks.iter().map(|(id, p, _)| (*id, *p)).collect();
        let candidate = closer.detect(80, &BTreeSet::from([80u64])).unwrap();
        assert_eq!(candidate.matched, 0);
        let validated = closer
            .validate_geometry(candidate, &drifted_state.pose(), &window_landmarks)
            .expect("validated");
        closer
            .relocalize(&mut window, &validated, &SolverConfig::default())
            .unwrap();
        // The corrected keyframe should sit at the true (identity) pose.
        let corrected = window.keyframes()[0].state.position;
        assert!(corrected.norm() < 0.05, "pose error {} after relocalization", corrected.norm());
    }

    #[test]
    fn relocalize_refinement_cost_non_increasing() {
        let (vocab, _) = build_vocab(15);
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let landmarks = scene_landmarks(&mut rng, 40, Vector3::zeros());
        let t_ic = Transform::identity();
        let mut closer = LoopCloser::new(vocab, intrinsics(), t_ic, LoopCloserConfig::default());
        let pose = Transform::identity();
        closer.add_keyframe(make_snapshot(0, &pose, &landmarks, &t_ic, None));
        closer.add_keyframe(make_snapshot(60, &pose, &landmarks, &t_ic, None));

        let state = RobotState::identity();
        let mut window = window_with(&landmarks, state, 60);
        let window_landmarks: BTreeMap<LandmarkId, Vector3<f64>> =
            landmarks.iter().map(|(id, p, _)| (*id, *p)).collect();
        let candidate = closer.detect(60, &BTreeSet::from([60u64])).unwrap();
        let validated = closer.validate_geometry(candidate, &pose, &window_landmarks).unwrap();

        // Perturb a landmark so the refinement has work to do.
        let matched_ids: Vec<LandmarkId> = validated
            .matches_2d2d
            .iter()
            .map(|(qi, _)| closer.frame(60).unwrap().observations[*qi].landmark_id)
            .collect();
        let victim = matched_ids[0];
        let mut moved = *window.landmarks().get(&victim).unwrap();
        moved.position += Vector3::new(0.02, -0.01, 0.03);
        window.insert_landmark(moved);

        let terms: Vec<CostTerm> = window
            .build_cost()
            .into_iter()
            .filter(|t| matches!(t, CostTerm::Reprojection { .. }))
            .collect();
        let report = window.optimize_terms(&SolverConfig::default(), terms).unwrap();
        for pair in report.cost_trace.windows(2) {
            assert!(pair[1] <= pair[0] + 1e-12);
        }
        assert!(report.final_cost <= report.initial_cost);
    }

    #[test]
    fn covisibility_predicate_threshold() {
        let (vocab, _) = build_vocab(17);
        let mut rng = ChaCha8Rng::seed_from_u64(18);
        let landmarks = scene_landmarks(&mut rng, 20, Vector3::zeros());
        let t_ic = Transform::identity();
        let mut closer = LoopCloser::new(vocab, intrinsics(), t_ic, LoopCloserConfig::default());
        let pose = Transform::identity();
        let snap_full = make_snapshot(0, &pose, &landmarks, &t_ic, None);
        // 16 of 20 shared: ratio 16/16 against the smaller set -> edge.
        let snap_shared = make_snapshot(1, &pose, &landmarks[0..16], &t_ic, None);
        // Disjoint ids -> no edge.
        let disjoint: Vec<_> =
            landmarks.iter().map(|(id, p, d)| (id + 500, *p, *d)).collect();
        let snap_disjoint = make_snapshot(2, &pose, &disjoint, &t_ic, None);
        closer.add_keyframe(snap_full);
        closer.add_keyframe(snap_shared);
        closer.add_keyframe(snap_disjoint);
        assert!(closer.graph.neighbors(0).contains(&1));
        assert!(!closer.graph.neighbors(0).contains(&2));
        // Symmetry.
        assert!(closer.graph.neighbors(1).contains(&0));
    }
}
