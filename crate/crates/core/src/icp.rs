//! Generalized-ICP (plane-to-plane) fine registration.
//!
//! Each point carries a regularized local covariance whose eigenvalues are
//! replaced by `(epsilon_plane, 1, 1)`. One outer iteration re-searches
//! correspondences and takes one damped Gauss-Newton step on the 6-DoF left
//! perturbation `T ← exp(δ) T`; a step is accepted only if the mean
//! Mahalanobis cost at the new transform (with its own correspondences) does
//! not increase.

use nalgebra::{Matrix3, Matrix6, Vector3, Vector6};
use rayon::prelude::*;

use crate::geom::{skew, so3_exp, Point3, PointCloud, RigidTransform};
use crate::kdtree::KdTree;
use crate::preprocess::{covariance, sym3_eigen};

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct GicpParams {
    pub max_correspondence_distance: f64,
    pub max_iterations: usize,
    pub translation_epsilon: f64,
    pub rotation_epsilon: f64,
    pub covariance_k: usize,
    pub epsilon_plane: f64,
}

impl Default for GicpParams {
    fn default() -> Self {
        Self::for_voxel(1.0)
    }
}

impl GicpParams {
    /// Defaults tied to the active downsampling voxel size.
    pub fn for_voxel(voxel: f64) -> Self {
        Self {
            max_correspondence_distance: 2.0 * voxel,
            max_iterations: 64,
            translation_epsilon: 1e-4,
            rotation_epsilon: 1e-4,
            covariance_k: 20,
            epsilon_plane: 1e-3,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GicpResult {
    pub transform: RigidTransform,
    pub converged: bool,
    pub iterations: usize,
    /// Mean Mahalanobis residual over the final correspondences.
    pub final_cost: f64,
    /// Number of correspondences at the final transform.
    pub correspondences: usize,
    /// Cost after every accepted step, starting with the initial cost.
    pub cost_history: Vec<f64>,
}

/// A cloud prepared for G-ICP: points, regularized covariances and a k-d tree.
#[derive(Debug, Clone)]
pub struct GicpCloud {
    pub points: Vec<Point3>,
    pub covariances: Vec<Matrix3<f64>>,
    tree: KdTree,
}

impl GicpCloud {
    pub fn new(points: Vec<Point3>, covariance_k: usize, epsilon_plane: f64) -> Self {
        let tree = KdTree::build(&points);
        let covariances = points
            .par_iter()
            .map_init(Vec::new, |buf, p| {
                tree.knn_into(p, covariance_k, buf);
                regularized_covariance(buf.iter().map(|n| points[n.index] - p), epsilon_plane)
            })
            .collect();
        Self {
            points,
            covariances,
            tree,
        }
    }

    pub fn from_cloud(c: &PointCloud, p: &GicpParams) -> Self {
        Self::new(c.points.clone(), p.covariance_k, p.epsilon_plane)
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn tree(&self) -> &KdTree {
        &self.tree
    }
}

/// Local covariance with eigenvalues replaced by `(epsilon, 1, 1)`.
fn regularized_covariance(nbrs: impl Iterator<Item = Vector3<f64>>, epsilon: f64) -> Matrix3<f64> {
    let Some((_, cov)) = covariance(nbrs) else {
        return Matrix3::identity();
    };
    if cov.iter().all(|v| *v == 0.0) {
        return Matrix3::identity();
    }
    let (_, v) = sym3_eigen(&cov);
    v * Matrix3::from_diagonal(&Vector3::new(epsilon, 1.0, 1.0)) * v.transpose()
}

#[derive(Default, Clone)]
struct Accum {
    h: Matrix6<f64>,
    b: Vector6<f64>,
    cost: f64,
    count: usize,
}

impl Accum {
    fn merge(mut self, o: &Accum) -> Accum {
        self.h += o.h;
        self.b += o.b;
        self.cost += o.cost;
        self.count += o.count;
        self
    }

    fn mean_cost(&self) -> f64 {
        if self.count == 0 {
            f64::INFINITY
        } else {
            self.cost / self.count as f64
        }
    }
}

const CHUNK: usize = 2048;

/// Correspondence search plus linearization at `t`. Chunked so the sum
/// order does not depend on the thread count.
fn linearize(
    src: &GicpCloud,
    tgt: &GicpCloud,
    target_valid: Option<&[bool]>,
    t: &RigidTransform,
    max_dist2: f64,
) -> Accum {
    let r = t.rotation;
    let partial: Vec<Accum> = src
        .points
        .par_chunks(CHUNK)
        .enumerate()
        .map(|(ci, chunk)| {
            let mut acc = Accum::default();
            for (k, s) in chunk.iter().enumerate() {
                let i = ci * CHUNK + k;
                let q = t.transform_point(s);
                let Some(nn) = tgt.tree.nearest_within(&q, max_dist2) else {
                    continue;
                };
                if target_valid.is_some_and(|m| !m[nn.index]) {
                    continue;
                }
                let d = tgt.points[nn.index] - q;
                let c = tgt.covariances[nn.index] + r * src.covariances[i] * r.transpose();
                let Some(m) = c.try_inverse() else { continue };
                let md = m * d;
                acc.cost += d.dot(&md);
                acc.count += 1;
                // J = [ [q]x | -I ]
                let qx = skew(&q);
                let jt_m_top = qx.transpose() * m; // 3x3
                let h_rr = jt_m_top * qx;
                let h_rt = -jt_m_top;
                let h_tt = m;
                let mut v = acc.h.fixed_view_mut::<3, 3>(0, 0);
                v += h_rr;
                let mut v = acc.h.fixed_view_mut::<3, 3>(0, 3);
                v += h_rt;
                let mut v = acc.h.fixed_view_mut::<3, 3>(3, 0);
                v += h_rt.transpose();
                let mut v = acc.h.fixed_view_mut::<3, 3>(3, 3);
                v += h_tt;
                let mut v = acc.b.fixed_rows_mut::<3>(0);
                v += qx.transpose() * md;
                let mut v = acc.b.fixed_rows_mut::<3>(3);
                v -= md;
            }
            acc
        })
        .collect();
    partial.iter().fold(Accum::default(), |a, b| a.merge(b))
}

/// Retraction used by the solver: `exp(δ) ∘ T` with `δ = (ω, v)`.
fn apply_update(t: &RigidTransform, delta: &Vector6<f64>) -> RigidTransform {
    let w = Vector3::new(delta[0], delta[1], delta[2]);
    let v = Vector3::new(delta[3], delta[4], delta[5]);
    RigidTransform::new(so3_exp(&w), v).compose(t)
}

/// Aligns `src` onto `tgt` starting from `init`. Builds covariances and the
/// target index on the fly; use [`gicp_prepared`] to reuse them.
pub fn gicp(src: &PointCloud, tgt: &PointCloud, init: &RigidTransform, p: &GicpParams) -> GicpResult {
    let s = GicpCloud::from_cloud(src, p);
    let t = GicpCloud::from_cloud(tgt, p);
    gicp_prepared(&s, &t, None, init, p)
}

/// G-ICP on prepared clouds. `target_valid` masks target points that must
/// not be used as correspondences.
pub fn gicp_prepared(
    src: &GicpCloud,
    tgt: &GicpCloud,
    target_valid: Option<&[bool]>,
    init: &RigidTransform,
    p: &GicpParams,
) -> GicpResult {
    let max_dist2 = p.max_correspondence_distance * p.max_correspondence_distance;
    let mut t = *init;
    let mut acc = linearize(src, tgt, target_valid, &t, max_dist2);
    if acc.count < 6 {
        return GicpResult {
            transform: *init,
            converged: false,
            iterations: 0,
            final_cost: acc.mean_cost(),
            correspondences: acc.count,
            cost_history: Vec::new(),
        };
    }
    let mut history = vec![acc.mean_cost()];
    let mut lambda = 1e-6;
    let mut converged = false;
    let mut iterations = 0;
    while iterations < p.max_iterations {
        iterations += 1;
        let mut accepted = false;
        let mut small_step = false;
        for _ in 0..10 {
            let mut h = acc.h;
            for d in 0..6 {
                h[(d, d)] += lambda * acc.h[(d, d)].max(1e-9);
            }
            let Some(delta) = h.cholesky().map(|c| c.solve(&(-acc.b))) else {
                lambda *= 10.0;
                continue;
            };
            let rot = delta.fixed_rows::<3>(0).norm();
            let trans = delta.fixed_rows::<3>(3).norm();
            small_step = rot < p.rotation_epsilon && trans < p.translation_epsilon;
            let candidate = apply_update(&t, &delta);
            let next = linearize(src, tgt, target_valid, &candidate, max_dist2);
            if next.count >= 6 && next.mean_cost() <= acc.mean_cost() {
                t = candidate;
                acc = next;
                history.push(acc.mean_cost());
                lambda = (lambda * 0.1).max(1e-12);
                accepted = true;
                break;
            }
            if small_step {
                break;
            }
            lambda *= 10.0;
        }
        if small_step || !accepted {
            // Either the update fell below the epsilons or no descent direction is left.
            converged = true;
            break;
        }
    }
    GicpResult {
        transform: t,
        converged,
        iterations,
        final_cost: acc.mean_cost(),
        correspondences: acc.count,
        cost_history: history,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::estimate_transform_svd;
    use crate::geom::{axis_angle_matrix, rad};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    /// Two walls, a floor and a few boxes: well-conditioned in all 6 DoF.
    pub(crate) fn structured_scene(seed: u64, spacing: f64) -> Vec<Point3> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise = Normal::new(0.0, 0.005).unwrap();
        let mut pts = Vec::new();
        let n = (20.0 / spacing) as i32;
        for i in 0..n {
            for j in 0..n {
                let (a, b) = (i as f64 * spacing - 10.0, j as f64 * spacing - 10.0);
                pts.push(Point3::new(a, b, noise.sample(&mut rng)));
                if j < n / 3 {
                    pts.push(Point3::new(a, 10.0 + noise.sample(&mut rng), b + 10.0));
                    pts.push(Point3::new(-10.0 + noise.sample(&mut rng), a, b + 10.0));
                }
            }
        }
        for (cx, cy, sx, sy, sz) in [(2.0, 3.0, 1.5, 2.0, 1.2), (-4.0, -2.0, 1.0, 1.0, 2.5), (5.0, -6.0, 2.5, 0.8, 0.8)] {
            let m = (sx / spacing * 2.0) as i32;
            for i in 0..=m {
                for j in 0..=m {
                    let (u, v) = (i as f64 / m as f64, j as f64 / m as f64);
                    pts.push(Point3::new(cx + (u - 0.5) * sx, cy + (v - 0.5) * sy, sz));
                    pts.push(Point3::new(cx + (u - 0.5) * sx, cy - 0.5 * sy, v * sz));
                    pts.push(Point3::new(cx + 0.5 * sx, cy + (u - 0.5) * sy, v * sz));
                }
            }
        }
        let _ = rng.gen::<u8>();
        pts
    }

    fn cloud(points: Vec<Point3>) -> PointCloud {
        PointCloud::new(points, 0, 0.0)
    }

    #[test]
    fn identical_clouds_converge_immediately() {
        let c = cloud(structured_scene(1, 0.5));
        let r = gicp(&c, &c, &RigidTransform::identity(), &GicpParams::for_voxel(0.5));
        assert!(r.converged);
        assert!(r.iterations <= 2);
        assert!(r.final_cost < 1e-12);
        assert!(r.transform.max_abs_diff(&RigidTransform::identity()) < 1e-9);
    }

    #[test]
    fn recovers_small_displacement() {
        let tgt = cloud(structured_scene(2, 0.3));
        let gt = RigidTransform::new(axis_angle_matrix(&Vector3::new(0.3, -0.2, 1.0), rad(1.0)), Vector3::new(0.16, -0.1, 0.07));
        // src = gt^-1 applied to target, so gt maps src back onto tgt.
        let src = crate::geom::transform_cloud(&gt.inverse(), &tgt);
        let r = gicp(&src, &tgt, &RigidTransform::identity(), &GicpParams::for_voxel(0.5));
        assert!(r.converged);
        let err = gt.inverse().compose(&r.transform);
        assert!(err.translation.norm() < 0.02, "{}", err.translation.norm());
        assert!(err.angle() < rad(0.1));
        for w in r.cost_history.windows(2) {
            assert!(w[1] <= w[0]);
        }
    }

    #[test]
    fn gross_misalignment_is_detectable() {
        let tgt = cloud(structured_scene(3, 0.5));
        let src = crate::geom::transform_cloud(&RigidTransform::from_translation(Vector3::new(20.0, 0.0, 0.0)), &tgt);
        let r = gicp(&src, &tgt, &RigidTransform::identity(), &GicpParams::for_voxel(0.5));
        // Either no overlap at all or a clearly bad fit.
        assert!(!r.converged || r.correspondences < src.len() / 2);
    }

    #[test]
    fn no_correspondences_returns_init() {
        let tgt = cloud(structured_scene(4, 1.0));
        let init = RigidTransform::from_translation(Vector3::new(500.0, 0.0, 0.0));
        let r = gicp(&tgt, &tgt, &init, &GicpParams::default());
        assert!(!r.converged);
        assert_eq!(r.transform, init);
    }

    #[test]
    fn equivariant_under_source_transform() {
        let tgt = cloud(structured_scene(5, 0.4));
        let src = crate::geom::transform_cloud(&RigidTransform::from_translation(Vector3::new(0.1, 0.05, 0.0)), &tgt);
        let t0 = RigidTransform::new(axis_angle_matrix(&Vector3::new(0.0, 1.0, 1.0), 0.7), Vector3::new(3.0, -2.0, 1.0));
        let p = GicpParams { translation_epsilon: 1e-9, rotation_epsilon: 1e-9, ..GicpParams::for_voxel(0.5) };
        let a = gicp(&src, &tgt, &RigidTransform::identity(), &p);
        let moved = crate::geom::transform_cloud(&t0, &src);
        let b = gicp(&moved, &tgt, &t0.inverse(), &p);
        let fused_a = crate::geom::transform_cloud(&a.transform, &src);
        let fused_b = crate::geom::transform_cloud(&b.transform, &moved);
        for (x, y) in fused_a.points.iter().zip(&fused_b.points) {
            assert!((x - y).norm() < 1e-6);
        }
    }

    /// Brute-force point-to-point ICP: exhaustive nearest neighbors and a
    /// closed-form Kabsch step per iteration.
    fn point_to_point_oracle(src: &[Point3], tgt: &[Point3], max_dist: f64) -> RigidTransform {
        let mut t = RigidTransform::identity();
        for _ in 0..5000 {
            let pairs: Vec<(Point3, Point3)> = src
                .iter()
                .filter_map(|s| {
                    let q = t.transform_point(s);
                    let (j, d) = tgt
                        .iter()
                        .enumerate()
                        .map(|(j, p)| (j, (p - q).norm()))
                        .min_by(|a, b| a.1.total_cmp(&b.1))?;
                    (d <= max_dist).then_some((*s, tgt[j]))
                })
                .collect();
            let next = estimate_transform_svd(&pairs).unwrap();
            let done = next.max_abs_diff(&t) < 1e-15;
            t = next;
            if done {
                break;
            }
        }
        t
    }

    #[test]
    fn identity_covariances_reduce_to_point_to_point() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for trial in 0..5 {
            let tgt: Vec<Point3> = (0..50)
                .map(|_| Point3::new(rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0)))
                .collect();
            let gt = RigidTransform::new(axis_angle_matrix(&Vector3::new(1.0, 2.0, 0.5), rad(2.0)), Vector3::new(0.1, -0.05, 0.07));
            let src: Vec<Point3> = tgt.iter().map(|p| gt.inverse().transform_point(p) + Vector3::new(rng.gen_range(-0.05..0.05), 0.0, 0.0)).collect();
            let p = GicpParams {
                max_correspondence_distance: 100.0,
                max_iterations: 500,
                translation_epsilon: 1e-13,
                rotation_epsilon: 1e-13,
                covariance_k: 5,
                epsilon_plane: 1.0,
            };
            let r = gicp(&cloud(src.clone()), &cloud(tgt.clone()), &RigidTransform::identity(), &p);
            let oracle = point_to_point_oracle(&src, &tgt, 100.0);
            assert!(r.transform.max_abs_diff(&oracle) < 1e-6, "trial {trial}: {}", r.transform.max_abs_diff(&oracle));
        }
    }
}
