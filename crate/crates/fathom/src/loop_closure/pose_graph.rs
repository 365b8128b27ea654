//! 6-DoF pose graph over keyframes with covisibility and loop edges.
//!
//! Edge errors are formulated minimally in the tangent space as
//! `e_ij = log(rel_ij * T_i * T_j^-1)` over world-to-body matrices, i.e. the
//! purely relative form: with body-to-world poses `P` this reads
//! `e_ij = log(rel_ij * P_i^-1 * P_j)` with `rel_ij = P_j^-1 * P_i` measured
//! at loop/edge creation. The error depends only on relative poses, so a
//! global transform of all nodes leaves the cost unchanged. Edge information
//! is the identity; loop edges are robustified with a Huber loss to
//! down-weight incorrect loops.

use crate::geometry::{exp_se3, log_se3, Transform};
use nalgebra::{DMatrix, DVector, Vector3, Vector6};
use std::collections::{BTreeMap, BTreeSet};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EdgeKind {
    Covisibility,
    Loop,
}

#[derive(Debug, Clone, Copy)]
pub struct PoseGraphEdge {
    pub i: u64,
    pub j: u64,
    /// Measured relative transform `P_j^-1 * P_i` (body-to-world poses `P`)
    /// at measurement time.
    pub relative: Transform,
    pub kind: EdgeKind,
}

impl PoseGraphEdge {
    /// Tangent-space error of the edge given (body-to-world) node poses.
    pub fn error(&self, p_i: &Transform, p_j: &Transform) -> Vector6<f64> {
        log_se3(&self.relative.compose(&p_i.inverse()).compose(p_j))
    }
}

/// Keyframe nodes plus covisibility/loop constraints.
#[derive(Default)]
pub struct PoseGraph {
    nodes: BTreeMap<u64, Transform>,
    edges: Vec<PoseGraphEdge>,
}

#[derive(Debug, Error)]
pub enum PoseGraphError {
    #[error("graph has no loop edge")]
    NoLoopEdge,
    #[error("edge references missing node {0}")]
    MissingNode(u64),
}

#[derive(Debug, Clone)]
pub struct PoseGraphReport {
    pub initial_cost: f64,
    pub final_cost: f64,
    pub iterations: usize,
    pub components: usize,
}

impl PoseGraph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn edges(&self) -> &[PoseGraphEdge] {
        &self.edges
    }

    pub fn pose(&self, id: u64) -> Option<&Transform> {
        self.nodes.get(&id)
    }

    pub fn set_pose(&mut self, id: u64, pose: Transform) {
        self.nodes.insert(id, pose);
    }

    pub fn node_ids(&self) -> impl Iterator<Item = u64> + '_ {
        self.nodes.keys().copied()
    }

    pub fn add_node(&mut self, id: u64, pose: Transform) {
        self.nodes.insert(id, pose);
    }

    /// Adds an edge with the measured relative transform `T_j * T_i^-1`.
    pub fn add_edge(&mut self, edge: PoseGraphEdge) {
        self.edges.push(edge);
    }

    /// Convenience: edge whose measurement is taken from the given
    /// body-to-world poses.
    pub fn edge_from_poses(
        i: u64,
        j: u64,
        p_i: &Transform,
        p_j: &Transform,
        kind: EdgeKind,
    ) -> PoseGraphEdge {
        PoseGraphEdge { i, j, relative: p_j.inverse().compose(p_i), kind }
    }

    pub fn neighbors(&self, id: u64) -> Vec<u64> {
        let mut out: Vec<u64> = self
            .edges
            .iter()
            .filter_map(|e| {
                if e.i == id {
                    Some(e.j)
                } else if e.j == id {
                    Some(e.i)
                } else {
                    None
                }
            })
            .collect();
        out.sort_unstable();
        out.dedup();
        out
    }

    pub fn has_loop_edge(&self) -> bool {
        self.edges.iter().any(|e| e.kind == EdgeKind::Loop)
    }

    fn components(&self) -> Vec<BTreeSet<u64>> {
        let mut remaining: BTreeSet<u64> = self.nodes.keys().copied().collect();
        let mut components = Vec::new();
        while let Some(&seed) = remaining.iter().next() {
            let mut comp = BTreeSet::new();
            let mut stack = vec![seed];
            while let Some(id) = stack.pop() {
                if !remaining.remove(&id) {
                    continue;
                }
                comp.insert(id);
                for n in self.neighbors(id) {
                    if remaining.contains(&n) {
                        stack.push(n);
                    }
                }
            }
            components.push(comp);
        }
        components
    }

    /// Linear (chordal) relaxation: rotations from an unweighted
    /// Frobenius-norm least squares over the edge relations, projected back
    /// to SO(3), then translations from the resulting linear system. Used to
    /// warm-start the nonlinear refinement; large accumulated drift
    /// otherwise strands Gauss-Newton in a bent local minimum.
    fn chordal_guess(&self, fixed: &BTreeSet<u64>) -> Option<BTreeMap<u64, Transform>> {
        let free: Vec<u64> = self.nodes.keys().copied().filter(|id| !fixed.contains(id)).collect();
        if free.is_empty() || self.edges.is_empty() {
            return None;
        }
        let index: BTreeMap<u64, usize> = free.iter().enumerate().map(|(k, id)| (*id, k)).collect();
        let n = free.len();

        // Rotation stage: with Q = rel^-1, consistency means P_j = P_i * Q,
        // i.e. R_j = R_i * R_Q -- linear in the matrix entries. Vectorizing
        // column-major, vec(R_i * R_Q) = (R_Q^T kron I3) vec(R_i).
        let mut h = DMatrix::<f64>::zeros(9 * n, 9 * n);
        let mut rhs = DVector::<f64>::zeros(9 * n);
        let kron = |rq: &nalgebra::Matrix3<f64>| -> nalgebra::SMatrix<f64, 9, 9> {
            let mut out = nalgebra::SMatrix::<f64, 9, 9>::zeros();
            for c in 0..3 {
                for k in 0..3 {
                    for d in 0..3 {
                        out[(3 * c + d, 3 * k + d)] = rq[(k, c)];
                    }
                }
            }
            out
        };
        let add9 = |h: &mut DMatrix<f64>, bi: usize, bj: usize, m: &nalgebra::SMatrix<f64, 9, 9>| {
            for r in 0..9 {
                for c in 0..9 {
                    h[(9 * bi + r, 9 * bj + c)] += m[(r, c)];
                }
            }
        };
        let vec9 = |m: &nalgebra::Matrix3<f64>| -> nalgebra::SVector<f64, 9> {
            let mut v = nalgebra::SVector::<f64, 9>::zeros();
            for c in 0..3 {
                for r in 0..3 {
                    v[3 * c + r] = m[(r, c)];
                }
            }
            v
        };
        let eye9 = nalgebra::SMatrix::<f64, 9, 9>::identity();
        for e in &self.edges {
            let q = e.relative.inverse();
            let a_i = kron(&q.rotation); // vec(R_j) = a_i vec(R_i)
            match (index.get(&e.i), index.get(&e.j)) {
                (Some(&bi), Some(&bj)) => {
                    // residual: vec(R_j) - a_i vec(R_i)
                    add9(&mut h, bj, bj, &eye9);
                    add9(&mut h, bi, bi, &(a_i.transpose() * a_i));
                    let cross = -(a_i.transpose());
                    add9(&mut h, bj, bi, &(-a_i));
                    add9(&mut h, bi, bj, &cross);
                }
                (None, Some(&bj)) => {
                    add9(&mut h, bj, bj, &eye9);
                    let known = vec9(&(self.nodes[&e.i].rotation * q.rotation));
                    for r in 0..9 {
                        rhs[9 * bj + r] += known[r];
                    }
                }
                (Some(&bi), None) => {
                    add9(&mut h, bi, bi, &(a_i.transpose() * a_i));
                    let known = a_i.transpose() * vec9(&self.nodes[&e.j].rotation);
                    for r in 0..9 {
                        rhs[9 * bi + r] += known[r];
                    }
                }
                (None, None) => {}
            }
        }
        let chol = h.cholesky()?;
        let sol = chol.solve(&rhs);

        let mut guess = self.nodes.clone();
        for (id, &k) in &index {
            let mut m = nalgebra::Matrix3::zeros();
            for c in 0..3 {
                for r in 0..3 {
                    m[(r, c)] = sol[9 * k + 3 * c + r];
                }
            }
            let svd = m.svd(true, true);
            let (u, v_t) = (svd.u?, svd.v_t?);
            let mut s = nalgebra::Matrix3::identity();
            if (u.determinant() * v_t.determinant()) < 0.0 {
                s[(2, 2)] = -1.0;
            }
            guess.get_mut(id).unwrap().rotation = u * s * v_t;
        }

        // Translation stage: t_j = R_i t_Q + t_i given the solved rotations.
        let mut ht = DMatrix::<f64>::zeros(3 * n, 3 * n);
        let mut bt = DVector::<f64>::zeros(3 * n);
        let eye = nalgebra::Matrix3::identity();
        let add_block = |h: &mut DMatrix<f64>, bi: usize, bj: usize, m: &nalgebra::Matrix3<f64>| {
            for r in 0..3 {
                for c in 0..3 {
                    h[(3 * bi + r, 3 * bj + c)] += m[(r, c)];
                }
            }
        };
        for e in &self.edges {
            let q = e.relative.inverse();
            let r_i = match index.get(&e.i) {
                Some(_) => guess[&e.i].rotation,
                None => self.nodes[&e.i].rotation,
            };
            let d = r_i * q.translation; // t_j - t_i should equal this
            match (index.get(&e.i), index.get(&e.j)) {
                (Some(&bi), Some(&bj)) => {
                    add_block(&mut ht, bi, bi, &eye);
                    add_block(&mut ht, bj, bj, &eye);
                    add_block(&mut ht, bi, bj, &(-eye));
                    add_block(&mut ht, bj, bi, &(-eye));
                    for row in 0..3 {
                        bt[3 * bj + row] += d[row];
                        bt[3 * bi + row] -= d[row];
                    }
                }
                (None, Some(&bj)) => {
                    add_block(&mut ht, bj, bj, &eye);
                    let known = self.nodes[&e.i].translation + d;
                    for row in 0..3 {
                        bt[3 * bj + row] += known[row];
                    }
                }
                (Some(&bi), None) => {
                    add_block(&mut ht, bi, bi, &eye);
                    let known = self.nodes[&e.j].translation - d;
                    for row in 0..3 {
                        bt[3 * bi + row] += known[row];
                    }
                }
                (None, None) => {}
            }
        }
        let cholt = ht.cholesky()?;
        let t_sol = cholt.solve(&bt);
        for (id, &k) in &index {
            guess.get_mut(id).unwrap().translation =
                Vector3::new(t_sol[3 * k], t_sol[3 * k + 1], t_sol[3 * k + 2]);
        }
        Some(guess)
    }

    /// Robustified Gauss-Newton over all node poses, warm-started by the
    /// chordal relaxation when that lowers the cost.
    ///
    /// The earliest node of every connected component is held fixed (with a
    /// warning when the graph is disconnected); additional nodes can be
    /// pinned through `extra_fixed`. Accepted steps never increase the cost.
    pub fn optimize(
        &mut self,
        huber_width: f64,
        extra_fixed: &BTreeSet<u64>,
    ) -> Result<PoseGraphReport, PoseGraphError> {
        for e in &self.edges {
            if !self.nodes.contains_key(&e.i) {
                return Err(PoseGraphError::MissingNode(e.i));
            }
            if !self.nodes.contains_key(&e.j) {
                return Err(PoseGraphError::MissingNode(e.j));
            }
        }
        let components = self.components();
        if components.len() > 1 {
            log::warn!(
                "pose graph has {} disconnected components; anchoring each at its earliest node",
                components.len()
            );
        }
        let mut fixed: BTreeSet<u64> = extra_fixed.clone();
        for comp in &components {
            if let Some(&first) = comp.iter().next() {
                if comp.iter().all(|id| extra_fixed.contains(id)) || !comp.iter().any(|id| extra_fixed.contains(id)) {
                    fixed.insert(first);
                }
            }
        }

        let free: Vec<u64> = self.nodes.keys().copied().filter(|id| !fixed.contains(id)).collect();
        let index: BTreeMap<u64, usize> = free.iter().enumerate().map(|(k, id)| (*id, k)).collect();
        let dim = 6 * free.len();

        let cost_of = |nodes: &BTreeMap<u64, Transform>| -> f64 {
            self.edges
                .iter()
                .map(|e| {
                    let err = e.error(&nodes[&e.i], &nodes[&e.j]);
                    robust_cost(err.norm_squared(), e.kind, huber_width)
                })
                .sum()
        };

        let mut nodes = self.nodes.clone();
        let mut cost = cost_of(&nodes);
        let initial_cost = cost;
        if let Some(guess) = self.chordal_guess(&fixed) {
            let guess_cost = cost_of(&guess);
            if guess_cost.is_finite() && guess_cost < cost {
                nodes = guess;
                cost = guess_cost;
            }
        }
        let mut lambda = 1e-6;
        let mut iterations = 0;

        if dim == 0 {
            return Ok(PoseGraphReport { initial_cost, final_cost: cost, iterations: 0, components: components.len() });
        }

        // Large drifts enter the optimization deep in the Huber-linear
        // region of the loop edges, where IRLS progress per round is small.
        for _ in 0..300 {
            let mut h = DMatrix::<f64>::zeros(dim, dim);
            let mut g = DVector::<f64>::zeros(dim);
            for e in &self.edges {
                let t_i = nodes[&e.i];
                let t_j = nodes[&e.j];
                let err = e.error(&t_i, &t_j);
                let w = robust_weight(err.norm_squared(), e.kind, huber_width);

                // Numeric Jacobians under right-multiplicative perturbation
                // of each endpoint.
                let eps = 1e-7;
                let mut blocks: Vec<(u64, DMatrix<f64>)> = Vec::new();
                for &(id, is_i) in &[(e.i, true), (e.j, false)] {
                    if !index.contains_key(&id) {
                        continue;
                    }
                    let mut jac = DMatrix::zeros(6, 6);
                    for c in 0..6 {
                        let mut d = Vector6::zeros();
                        d[c] = eps;
                        let perturb = |sign: f64| -> Vector6<f64> {
                            let t = nodes[&id].compose(&exp_se3(&(sign * d)));
                            if is_i {
                                e.error(&t, &t_j)
                            } else {
                                e.error(&t_i, &t)
                            }
                        };
                        let col = (perturb(1.0) - perturb(-1.0)) / (2.0 * eps);
                        for r in 0..6 {
                            jac[(r, c)] = col[r];
                        }
                    }
                    blocks.push((id, jac));
                }

                for (id_a, j_a) in &blocks {
                    let ia = index[id_a] * 6;
                    let ga = j_a.transpose() * err * w;
                    for r in 0..6 {
                        g[ia + r] += ga[r];
                    }
                    for (id_b, j_b) in &blocks {
                        let ib = index[id_b] * 6;
                        let hb = j_a.transpose() * j_b * w;
                        for r in 0..6 {
                            for c in 0..6 {
                                h[(ia + r, ib + c)] += hb[(r, c)];
                            }
                        }
                    }
                }
            }

            if g.amax() < 1e-12 {
                break;
            }

            let mut accepted = false;
            for _ in 0..10 {
                let mut damped = h.clone();
                for i in 0..dim {
                    damped[(i, i)] += lambda * damped[(i, i)].max(1e-9);
                }
                let Some(chol) = damped.cholesky() else {
                    lambda *= 10.0;
                    continue;
                };
                let step = chol.solve(&(-&g));
                let mut candidate = nodes.clone();
                for (id, &k) in &index {
                    let xi = Vector6::from_iterator(step.rows(6 * k, 6).iter().cloned());
                    let t = candidate[id].compose(&exp_se3(&xi));
                    candidate.insert(*id, t);
                }
                let new_cost = cost_of(&candidate);
                if new_cost.is_finite() && new_cost <= cost {
                    let small = step.norm() < 1e-12;
                    nodes = candidate;
                    cost = new_cost;
                    lambda = (lambda * 0.3).max(1e-12);
                    accepted = true;
                    iterations += 1;
                    if small {
                        accepted = false; // converged
                    }
                    break;
                }
                lambda *= 10.0;
            }
            if !accepted {
                break;
            }
        }

        self.nodes = nodes;
        Ok(PoseGraphReport {
            initial_cost,
            final_cost: cost,
            iterations,
            components: components.len(),
        })
    }
}

fn robust_cost(sq: f64, kind: EdgeKind, huber: f64) -> f64 {
    match kind {
        EdgeKind::Covisibility => sq,
        EdgeKind::Loop => {
            let u = sq.sqrt();
            if u <= huber {
                sq
            } else {
                2.0 * huber * u - huber * huber
            }
        }
    }
}

fn robust_weight(sq: f64, kind: EdgeKind, huber: f64) -> f64 {
    match kind {
        EdgeKind::Covisibility => 1.0,
        EdgeKind::Loop => {
            let u = sq.sqrt();
            if u <= huber {
                1.0
            } else {
                huber / u
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::exp_so3;
    use nalgebra::Vector3;

    fn straight_chain(n: usize) -> Vec<Transform> {
        (0..n)
            .map(|k| Transform::new(nalgebra::Matrix3::identity(), Vector3::new(k as f64, 0.0, 0.0)))
            .collect()
    }

    /// Drifted odometry: each consecutive measurement carries a constant
    /// rotational and translational bias.
    fn drifted_poses(truth: &[Transform], rot_err: f64, trans_err: f64) -> (Vec<Transform>, Vec<PoseGraphEdge>) {
        let bias = Transform::from_quaternion(
            &exp_so3(&Vector3::new(0.0, 0.0, rot_err)),
            Vector3::new(trans_err, 0.0, 0.0),
        );
        let mut poses = vec![truth[0]];
        let mut edges = Vec::new();
        for k in 1..truth.len() {
            let true_rel = truth[k].compose(&truth[k - 1].inverse());
            let meas_rel = bias.compose(&true_rel);
            let next = meas_rel.compose(poses.last().unwrap());
            poses.push(next);
            edges.push(PoseGraphEdge {
                i: (k - 1) as u64,
                j: k as u64,
                relative: meas_rel,
                kind: EdgeKind::Covisibility,
            });
        }
        (poses, edges)
    }

    #[test]
    fn consistent_graph_is_fixed_point() {
        let truth = straight_chain(10);
        let mut graph = PoseGraph::new();
        for (k, t) in truth.iter().enumerate() {
            graph.add_node(k as u64, *t);
        }
        for k in 1..truth.len() {
            graph.add_edge(PoseGraph::edge_from_poses(
                (k - 1) as u64,
                k as u64,
                &truth[k - 1],
                &truth[k],
                EdgeKind::Covisibility,
            ));
        }
        graph.add_edge(PoseGraph::edge_from_poses(0, 9, &truth[0], &truth[9], EdgeKind::Loop));
        let before: Vec<Transform> = graph.node_ids().map(|id| *graph.pose(id).unwrap()).collect();
        let report = graph.optimize(1.0, &BTreeSet::new()).unwrap();
        assert!(report.final_cost < 1e-12);
        for (id, b) in graph.node_ids().zip(before.iter()) {
            let a = graph.pose(id).unwrap();
            assert!((a.translation - b.translation).norm() < 1e-9);
            assert!((a.rotation - b.rotation).norm() < 1e-9);
        }
    }

    #[test]
    fn loop_edge_redistributes_chain_drift() {
        let truth = straight_chain(50);
        let (drifted, edges) = drifted_poses(&truth, 1.0_f64.to_radians(), 0.1);
        let end_err_before = (drifted[49].translation - truth[49].translation).norm();
        assert!(end_err_before > 0.5, "setup should drift, got {end_err_before}");

        let mut graph = PoseGraph::new();
        for (k, p) in drifted.iter().enumerate() {
            graph.add_node(k as u64, *p);
        }
        for e in edges {
            graph.add_edge(e);
        }
        // One exact loop edge closing the chain.
        graph.add_edge(PoseGraph::edge_from_poses(0, 49, &truth[0], &truth[49], EdgeKind::Loop));
        graph.optimize(1.0, &BTreeSet::new()).unwrap();
        let end_err_after = (graph.pose(49).unwrap().translation - truth[49].translation).norm();
        assert!(
            end_err_after < 0.1 * end_err_before,
            "end error {end_err_after} vs before {end_err_before}"
        );
    }

    #[test]
    fn huber_contains_false_loop_damage() {
        // The chain is 1 m per step; the adversarial edge claims two nodes
        // 0.8 m apart coincide (wilder false loops are caught upstream by
        // geometric validation). Dense covisibility (spans of one and two
        // steps) gives the graph the stiffness of a real keyframe sequence.
        let truth = straight_chain(11);
        let (drifted, edges) = drifted_poses(&truth, 0.6_f64.to_radians(), 0.05);

        let build = |false_loop: bool| -> PoseGraph {
            let mut graph = PoseGraph::new();
            for (k, p) in drifted.iter().enumerate() {
                graph.add_node(k as u64, *p);
            }
            for e in &edges {
                graph.add_edge(*e);
            }
            for k in 2..drifted.len() {
                let rel = drifted[k].compose(&drifted[k - 2].inverse());
                graph.add_edge(PoseGraphEdge {
                    i: (k - 2) as u64,
                    j: k as u64,
                    relative: rel,
                    kind: EdgeKind::Covisibility,
                });
            }
            graph.add_edge(PoseGraph::edge_from_poses(0, 10, &truth[0], &truth[10], EdgeKind::Loop));
            if false_loop {
                // Claims node 5 sits 0.8 m before where it is.
                let false_rel = Transform::new(
                    nalgebra::Matrix3::identity(),
                    truth[5].translation - truth[4].translation - Vector3::new(0.8, 0.0, 0.0),
                );
                graph.add_edge(PoseGraphEdge { i: 4, j: 5, relative: false_rel, kind: EdgeKind::Loop });
            }
            graph
        };

        let max_err = |graph: &PoseGraph| -> f64 {
            truth
                .iter()
                .enumerate()
                .map(|(k, t)| (graph.pose(k as u64).unwrap().translation - t.translation).norm())
                .fold(0.0, f64::max)
        };

        let mut clean = build(false);
        clean.optimize(1.0, &BTreeSet::new()).unwrap();
        let clean_err = max_err(&clean);

        let mut poisoned = build(true);
        poisoned.optimize(1.0, &BTreeSet::new()).unwrap();
        let poisoned_err = max_err(&poisoned);

        assert!(
            poisoned_err <= 2.0 * clean_err.max(1e-3),
            "poisoned {poisoned_err} vs clean {clean_err}"
        );
    }

    #[test]
    fn edge_error_reverses_under_adjoint() {
        // e_ji relates to e_ij by negation and the adjoint of the inverse
        // measurement: exp(e_ji) = rel^-1 * exp(e_ij)^-1 * rel.
        let t_i = Transform::from_quaternion(&exp_so3(&Vector3::new(0.1, 0.2, -0.3)), Vector3::new(1.0, 2.0, 3.0));
        let t_j = Transform::from_quaternion(&exp_so3(&Vector3::new(-0.2, 0.1, 0.5)), Vector3::new(-2.0, 0.5, 1.0));
        let rel_ij = t_j
            .inverse()
            .compose(&t_i)
            .compose(&exp_se3(&Vector6::new(0.05, -0.02, 0.01, 0.02, -0.01, 0.03)));
        let e_ij = PoseGraphEdge { i: 0, j: 1, relative: rel_ij, kind: EdgeKind::Loop }.error(&t_i, &t_j);
        let rel_ji = rel_ij.inverse();
        let e_ji = PoseGraphEdge { i: 1, j: 0, relative: rel_ji, kind: EdgeKind::Loop }.error(&t_j, &t_i);
        let adj = rel_ij.inverse().adjoint();
        let expected = -(adj * e_ij);
        assert!((e_ji - expected).norm() < 1e-9, "e_ji {e_ji:?} expected {expected:?}");
    }

    #[test]
    fn disconnected_components_each_anchor() {
        let mut graph = PoseGraph::new();
        for k in 0..4u64 {
            graph.add_node(k, Transform::new(nalgebra::Matrix3::identity(), Vector3::new(k as f64, 0.0, 0.0)));
        }
        // Two disjoint pairs.
        graph.add_edge(PoseGraph::edge_from_poses(
            0,
            1,
            graph.pose(0).unwrap(),
            graph.pose(1).unwrap(),
            EdgeKind::Covisibility,
        ));
        graph.add_edge(PoseGraph::edge_from_poses(
            2,
            3,
            graph.pose(2).unwrap(),
            graph.pose(3).unwrap(),
            EdgeKind::Covisibility,
        ));
        let report = graph.optimize(1.0, &BTreeSet::new()).unwrap();
        assert_eq!(report.components, 2);
        assert!(report.final_cost < 1e-12);
    }
}
