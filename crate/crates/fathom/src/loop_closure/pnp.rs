//! Perspective pose from 3D-2D correspondences: a three-point minimal
//! solver wrapped in RANSAC, with a pose-only refinement on the inliers.

use crate::eval::umeyama_points;
use crate::factors::PinholeIntrinsics;
use crate::geometry::{exp_se3, Transform};
use nalgebra::{DMatrix, DVector, Matrix4, Vector2, Vector3, Vector6};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy)]
pub struct PnpRansacConfig {
    pub iterations: usize,
    /// Reprojection inlier threshold, pixels.
    pub inlier_threshold_px: f64,
    /// Minimum consensus size for acceptance.
    pub min_inliers: usize,
    pub seed: u64,
}

impl Default for PnpRansacConfig {
    fn default() -> Self {
        PnpRansacConfig { iterations: 200, inlier_threshold_px: 4.0, min_inliers: 12, seed: 0 }
    }
}

#[derive(Debug, Clone)]
pub struct PnpResult {
    /// Camera-from-world transform.
    pub t_cw: Transform,
    pub inliers: Vec<usize>,
}

/// Minimal three-point pose solutions (camera-from-world), classical
/// law-of-cosines formulation reduced to a quartic.
///
/// `bearings` are unit vectors in the camera frame. Up to four solutions.
pub fn p3p(points: &[Vector3<f64>; 3], bearings: &[Vector3<f64>; 3]) -> Vec<Transform> {
    let (p1, p2, p3) = (points[0], points[1], points[2]);
    let (f1, f2, f3) = (bearings[0], bearings[1], bearings[2]);

    let a = (p2 - p3).norm();
    let b = (p1 - p3).norm();
    let c = (p1 - p2).norm();
    if a < 1e-9 || b < 1e-9 || c < 1e-9 {
        return Vec::new();
    }
    let cos_alpha = f2.dot(&f3);
    let cos_beta = f1.dot(&f3);
    let cos_gamma = f1.dot(&f2);

    let aa = (a * a) / (c * c);
    let bb = (b * b) / (c * c);

    // With u = s2/s1 and v = s3/s1 the three distance equations reduce to a
    // closed-form u(v) and a quartic polynomial in v. The quartic
    // coefficients are recovered by exact evaluation at five nodes.
    let den = |v: f64| 2.0 * (cos_gamma - v * cos_alpha);
    let num = |v: f64| -((1.0 - aa) * (v * v - 2.0 * cos_beta * v + 1.0 - bb) / bb + v * v - aa);
    let poly = |v: f64| -> f64 {
        let d = den(v);
        let n = num(v);
        // Second distance equation times den(v)^2, with u = num/den.
        -bb * n * n + 2.0 * bb * cos_gamma * n * d
            + (v * v - 2.0 * cos_beta * v + 1.0 - bb) * d * d
    };

    // Fit the quartic through five exact samples.
    let nodes = [0.0, 1.0, -1.0, 2.0, -2.0];
    let mut vand = DMatrix::zeros(5, 5);
    let mut rhs = DVector::zeros(5);
    for (r, &x) in nodes.iter().enumerate() {
        let mut pw = 1.0;
        for cidx in 0..5 {
            vand[(r, cidx)] = pw;
            pw *= x;
        }
        rhs[r] = poly(x);
    }
    let Some(coeffs) = vand.lu().solve(&rhs) else {
        return Vec::new();
    };

    let roots = quartic_roots([coeffs[0], coeffs[1], coeffs[2], coeffs[3], coeffs[4]]);

    let mut solutions = Vec::new();
    for v in roots {
        if !(v.is_finite() && v > 1e-9) {
            continue;
        }
        let d = den(v);
        if d.abs() < 1e-9 {
            continue;
        }
        let u = num(v) / d;
        if !(u.is_finite() && u > 1e-9) {
            continue;
        }
        let s1_sq = (c * c) / (1.0 + u * u - 2.0 * u * cos_gamma);
        if !(s1_sq.is_finite() && s1_sq > 0.0) {
            continue;
        }
        let s1 = s1_sq.sqrt();
        let (s2, s3) = (u * s1, v * s1);

        let cam = [f1 * s1, f2 * s2, f3 * s3];
        let world = [p1, p2, p3];
        let Ok((r, t, _)) = umeyama_points(&world, &cam, false) else {
            continue;
        };
        // Keep solutions that actually place the points in front.
        let tf = Transform::new(r, t);
        if world.iter().all(|p| tf.apply(p).z > 0.0) {
            solutions.push(tf);
        }
    }
    solutions
}

/// Real roots of `c0 + c1 x + c2 x^2 + c3 x^3 + c4 x^4` via the companion
/// matrix.
fn quartic_roots(coeffs: [f64; 5]) -> Vec<f64> {
    // Trim leading zeros down to the true degree.
    let mut c: Vec<f64> = coeffs.to_vec();
    while c.len() > 1 && c.last().unwrap().abs() < 1e-14 {
        c.pop();
    }
    let degree = c.len() - 1;
    if degree == 0 {
        return Vec::new();
    }
    let lead = c[degree];
    let mut companion = DMatrix::zeros(degree, degree);
    for i in 0..degree {
        companion[(i, degree - 1)] = -c[i] / lead;
        if i > 0 {
            companion[(i, i - 1)] = 1.0;
        }
    }
    let eig = companion.complex_eigenvalues();
    eig.iter()
        .filter(|z| z.im.abs() < 1e-8 * (1.0 + z.re.abs()))
        .map(|z| z.re)
        .collect()
}

/// RANSAC over the three-point solver followed by a pose-only
/// Gauss-Newton refinement on the consensus set.
///
/// Returns `None` when the best consensus stays below `min_inliers`.
pub fn solve_pnp_ransac(
    points_world: &[Vector3<f64>],
    pixels: &[Vector2<f64>],
    intrinsics: &PinholeIntrinsics,
    config: &PnpRansacConfig,
) -> Option<PnpResult> {
    assert_eq!(points_world.len(), pixels.len());
    let n = points_world.len();
    if n < 3 {
        return None;
    }
    let bearings: Vec<Vector3<f64>> = pixels
        .iter()
        .map(|px| {
            Vector3::new((px.x - intrinsics.cx) / intrinsics.fx, (px.y - intrinsics.cy) / intrinsics.fy, 1.0)
                .normalize()
        })
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut indices: Vec<usize> = (0..n).collect();
    let mut best: Option<(Vec<usize>, Transform)> = None;

    for _ in 0..config.iterations {
        indices.shuffle(&mut rng);
        let sample = [indices[0], indices[1], indices[2]];
        let pts = [points_world[sample[0]], points_world[sample[1]], points_world[sample[2]]];
        let brs = [bearings[sample[0]], bearings[sample[1]], bearings[sample[2]]];
        for t_cw in p3p(&pts, &brs) {
            let inliers = consensus(points_world, pixels, intrinsics, &t_cw, config.inlier_threshold_px);
            if best.as_ref().map_or(true, |(b, _)| inliers.len() > b.len()) {
                best = Some((inliers, t_cw));
            }
        }
    }

    let (inliers, t_cw) = best?;
    if inliers.len() < config.min_inliers.max(3) {
        return None;
    }
    let refined = refine_pose(points_world, pixels, intrinsics, &t_cw, &inliers);
    // Refinement can only grow the consensus.
    let inliers = consensus(points_world, pixels, intrinsics, &refined, config.inlier_threshold_px);
    if inliers.len() < config.min_inliers.max(3) {
        return None;
    }
    Some(PnpResult { t_cw: refined, inliers })
}

fn consensus(
    points: &[Vector3<f64>],
    pixels: &[Vector2<f64>],
    intrinsics: &PinholeIntrinsics,
    t_cw: &Transform,
    threshold: f64,
) -> Vec<usize> {
    let mut inliers = Vec::new();
    for (i, (p, px)) in points.iter().zip(pixels.iter()).enumerate() {
        let cam = t_cw.apply(p);
        if let Some(proj) = intrinsics.project(&cam) {
            if (proj - px).norm() <= threshold {
                inliers.push(i);
            }
        }
    }
    inliers
}

/// Pose-only Gauss-Newton on the reprojection error of the inlier set,
/// right-multiplicative perturbation, numeric Jacobians.
fn refine_pose(
    points: &[Vector3<f64>],
    pixels: &[Vector2<f64>],
    intrinsics: &PinholeIntrinsics,
    initial: &Transform,
    inliers: &[usize],
) -> Transform {
    let residuals = |t: &Transform| -> Option<DVector<f64>> {
        let mut r = DVector::zeros(2 * inliers.len());
        for (row, &i) in inliers.iter().enumerate() {
            let proj = intrinsics.project(&t.apply(&points[i]))?;
            r[2 * row] = proj.x - pixels[i].x;
            r[2 * row + 1] = proj.y - pixels[i].y;
        }
        Some(r)
    };

    let mut pose = *initial;
    let Some(mut best_r) = residuals(&pose) else { return pose };
    let mut lambda = 1e-6;
    for _ in 0..12 {
        let eps = 1e-7;
        let mut jac = DMatrix::zeros(2 * inliers.len(), 6);
        for c in 0..6 {
            let mut d = Vector6::zeros();
            d[c] = eps;
            let plus = pose.compose(&exp_se3(&d));
            let minus = pose.compose(&exp_se3(&(-d)));
            let (Some(rp), Some(rm)) = (residuals(&plus), residuals(&minus)) else {
                return pose;
            };
            jac.set_column(c, &((rp - rm) / (2.0 * eps)));
        }
        let h = jac.transpose() * &jac;
        let g = jac.transpose() * &best_r;
        let mut damped = h.clone();
        for i in 0..6 {
            damped[(i, i)] += lambda * damped[(i, i)].max(1e-12);
        }
        let Some(chol) = damped.cholesky() else {
            lambda *= 10.0;
            continue;
        };
        let step = chol.solve(&(-g));
        let candidate = pose.compose(&exp_se3(&Vector6::from_iterator(step.iter().cloned())));
        match residuals(&candidate) {
            Some(r) if r.norm_squared() <= best_r.norm_squared() => {
                let done = step.norm() < 1e-12;
                pose = candidate;
                best_r = r;
                lambda = (lambda * 0.3).max(1e-12);
                if done {
                    break;
                }
            }
            _ => lambda *= 10.0,
        }
    }
    pose
}

/// Convenience for tests: camera-from-world of a camera at `t_wc`.
pub fn camera_from_world(t_wc: &Transform) -> Matrix4<f64> {
    t_wc.inverse().matrix()
}
