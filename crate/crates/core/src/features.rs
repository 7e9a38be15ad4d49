//! Coarse pairwise registration for the first frame.
//!
//! SIFT keypoints over the curvature field, FPFH descriptors, nearest
//! descriptor matching, RANSAC, closed-form SVD estimation, an up-vector
//! sanity check, and a point-to-point error metric used to pick among
//! candidate transforms. An optional ground-plane prior levels both clouds,
//! gates descriptor matches by height above the ground and lets RANSAC
//! search only yaw and translation.

use std::f64::consts::PI;

use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geom::{Point3, PointCloud, RigidTransform};
use crate::icp::{gicp_prepared, GicpCloud, GicpParams};
use crate::kdtree::{KdTree, Neighbor};
use crate::preprocess::{covariance, sym3_eigen, voxel_key};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Keypoint {
    pub position: Point3,
    /// Index into the cloud the keypoint was detected on.
    pub source_index: usize,
    pub scale: f64,
}

pub const FPFH_BINS: usize = 33;
const SUB_BINS: usize = 11;
const ANGLE_TIE: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq)]
pub struct FpfhDescriptor {
    pub histogram: [f64; FPFH_BINS],
    /// False when the keypoint had no neighbors; the histogram is then zero.
    pub valid: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Correspondence {
    pub src_idx: usize,
    pub tgt_idx: usize,
    pub distance: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CoarseRegistrationResult {
    pub transform: RigidTransform,
    /// `None` when the clouds do not overlap under the chosen transform.
    pub p2p_error: Option<f64>,
    pub inlier_count: usize,
    pub iterations_used: usize,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct SiftParams {
    pub min_scale: f64,
    pub octaves: usize,
    pub scales_per_octave: usize,
    pub min_contrast: f64,
}

impl Default for SiftParams {
    fn default() -> Self {
        Self {
            min_scale: 0.2,
            octaves: 4,
            scales_per_octave: 5,
            min_contrast: 1e-3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct RansacParams {
    pub inlier_threshold: f64,
    pub max_iterations: usize,
    pub confidence: f64,
    pub seed: u64,
}

impl Default for RansacParams {
    fn default() -> Self {
        Self {
            inlier_threshold: 2.0,
            max_iterations: 50_000,
            confidence: 0.999,
            seed: 42,
        }
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct CoarseParams {
    pub sift: SiftParams,
    pub fpfh_radius: f64,
    pub ransac: RansacParams,
    pub max_outer_iterations: usize,
    /// Cut-off radius of the p2p metric.
    pub r_c: f64,
    pub gicp: GicpParams,
    pub ground: GroundPrior,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct GroundPrior {
    pub enabled: bool,
    /// Largest angle between the ground normal and the sensor's z axis.
    pub max_tilt: f64,
    pub plane_threshold: f64,
    pub plane_iterations: usize,
    /// Smallest fraction of points on the plane for it to count as ground.
    pub min_support: f64,
    /// Matched keypoints may differ this much in height above the ground.
    pub height_tolerance: f64,
    /// Descriptor candidates kept per source keypoint.
    pub top_k: usize,
}

impl Default for GroundPrior {
    fn default() -> Self {
        Self {
            enabled: true,
            max_tilt: 45f64.to_radians(),
            plane_threshold: 0.15,
            plane_iterations: 300,
            min_support: 0.15,
            height_tolerance: 0.5,
            top_k: 5,
        }
    }
}

impl Default for CoarseParams {
    fn default() -> Self {
        Self::for_max_voxel(4.0)
    }
}

impl CoarseParams {
    /// Defaults derived from the octree filter's maximal voxel size.
    pub fn for_max_voxel(max_voxel: f64) -> Self {
        Self {
            sift: SiftParams::default(),
            fpfh_radius: 1.5,
            ransac: RansacParams {
                inlier_threshold: 0.5 * max_voxel,
                ..RansacParams::default()
            },
            max_outer_iterations: 2,
            r_c: max_voxel,
            gicp: GicpParams::for_voxel(0.5 * max_voxel),
            ground: GroundPrior::default(),
        }
    }
}

// ---------------------------------------------------------------- keypoints

/// SIFT keypoints on the curvature channel: DoG extrema over a pyramid of
/// Gaussian-smoothed curvature, one voxel-downsampled level per octave.
pub fn detect_sift_keypoints(c: &PointCloud, p: &SiftParams) -> Result<Vec<Keypoint>> {
    if c.is_empty() {
        return Err(Error::Empty("keypoint detection on empty cloud".into()));
    }
    let curvature = c.curvature.as_ref().ok_or(Error::MissingCurvature)?;
    if !(p.min_scale > 0.0) || p.octaves == 0 || p.scales_per_octave == 0 {
        return Err(Error::InvalidParameter("SIFT scales must be positive".into()));
    }
    let n_scales = p.scales_per_octave + 3;
    let mut out = Vec::new();
    let mut seen = std::collections::HashSet::new();
    let mut base = p.min_scale;
    for _ in 0..p.octaves {
        // Evaluation sites and smoothing samples are chosen by greedy
        // Poisson-disk selection in input order, so the same cloud under a
        // rigid motion yields the same sites.
        let sites = poisson_disk(&c.points, base);
        if sites.len() < 2 {
            break;
        }
        let site_pts: Vec<Point3> = sites.iter().map(|&i| c.points[i]).collect();
        let sample_idx = poisson_disk(&c.points, 0.5 * base);
        let sample_tree = KdTree::build(&sample_idx.iter().map(|&i| c.points[i]).collect::<Vec<_>>());
        let mut acc = vec![(Point3::zeros(), 0.0, 0usize); sample_idx.len()];
        for (i, q) in c.points.iter().enumerate() {
            let s = sample_tree.nearest(q).expect("samples are non-empty").index;
            acc[s].0 += q;
            acc[s].1 += curvature[i];
            acc[s].2 += 1;
        }
        let samples: Vec<Point3> = acc.iter().map(|a| a.0 / a.2 as f64).collect();
        let sample_curv: Vec<f64> = acc.iter().map(|a| a.1 / a.2 as f64).collect();
        let sample_w: Vec<f64> = acc.iter().map(|a| a.2 as f64).collect();
        let full = KdTree::build(&samples);
        let sigmas: Vec<f64> = (0..n_scales)
            .map(|i| base * 2f64.powf(i as f64 / p.scales_per_octave as f64))
            .collect();
        let radius = 3.0 * sigmas[n_scales - 1];
        // Smoothed curvature at every level for every center.
        let smoothed: Vec<Vec<f64>> = site_pts
            .par_iter()
            .map_init(Vec::new, |buf: &mut Vec<Neighbor>, q| {
                full.radius_into(q, radius, buf);
                sigmas
                    .iter()
                    .map(|s| {
                        let inv = -0.5 / (s * s);
                        let (mut num, mut den) = (0.0, 0.0);
                        for n in buf.iter() {
                            let w = sample_w[n.index] * (n.dist2 * inv).exp();
                            num += w * sample_curv[n.index];
                            den += w;
                        }
                        if den > 0.0 {
                            num / den
                        } else {
                            0.0
                        }
                    })
                    .collect()
            })
            .collect();
        let dog: Vec<Vec<f64>> = smoothed
            .iter()
            .map(|g| g.windows(2).map(|w| w[1] - w[0]).collect())
            .collect();
        let ctree = KdTree::build(&site_pts);
        let mut nbrs = Vec::new();
        for (j, q) in site_pts.iter().enumerate() {
            ctree.knn_into(q, 16, &mut nbrs);
            for level in 1..n_scales - 2 {
                let v = dog[j][level];
                if v.abs() < p.min_contrast {
                    continue;
                }
                let mut is_max = true;
                let mut is_min = true;
                for n in &nbrs {
                    for l in level - 1..=level + 1 {
                        if n.index == j && l == level {
                            continue;
                        }
                        let o = dog[n.index][l];
                        is_max &= v > o;
                        is_min &= v < o;
                    }
                    if !is_max && !is_min {
                        break;
                    }
                }
                if is_max || is_min {
                    let src = sites[j];
                    if seen.insert(src) {
                        out.push(Keypoint {
                            position: c.points[src],
                            source_index: src,
                            scale: sigmas[level],
                        });
                    }
                }
            }
        }
        base *= 2.0;
    }
    Ok(out)
}

/// Greedy Poisson-disk subsampling: visits points in order and keeps each
/// one farther than `radius` from every point kept so far.
fn poisson_disk(points: &[Point3], radius: f64) -> Vec<usize> {
    let mut grid: std::collections::HashMap<[i64; 3], Vec<usize>> = std::collections::HashMap::new();
    let r2 = radius * radius;
    let mut kept = Vec::new();
    for (i, p) in points.iter().enumerate() {
        let key = voxel_key(p, radius);
        let mut free = true;
        'scan: for dx in -1..=1 {
            for dy in -1..=1 {
                for dz in -1..=1 {
                    if let Some(v) = grid.get(&[key[0] + dx, key[1] + dy, key[2] + dz]) {
                        if v.iter().any(|&j| (points[j] - p).norm_squared() <= r2) {
                            free = false;
                            break 'scan;
                        }
                    }
                }
            }
        }
        if free {
            grid.entry(key).or_default().push(i);
            kept.push(i);
        }
    }
    kept
}

// ---------------------------------------------------------------- descriptors

/// Darboux-frame pair features `(alpha, phi, theta)` as in Rusu's PFH,
/// with the source chosen as the point whose normal is more aligned with
/// the connecting line.
fn pair_features(p1: &Point3, n1: &Vector3<f64>, p2: &Point3, n2: &Vector3<f64>) -> Option<[f64; 3]> {
    let mut d = p2 - p1;
    let len = d.norm();
    if len == 0.0 {
        return None;
    }
    let a1 = n1.dot(&d) / len;
    let a2 = n2.dot(&d) / len;
    // Near-ties keep the given order so the choice does not hinge on rounding.
    let (u, n_t, f3) = if a1.abs() < a2.abs() - ANGLE_TIE {
        d = -d;
        (n2, n1, -a2)
    } else {
        (n1, n2, a1)
    };
    let v = d.cross(u);
    let vn = v.norm();
    // The Darboux frame is undefined when the normal is parallel to the
    // connecting line.
    if vn <= 1e-6 * len {
        return None;
    }
    let v = v / vn;
    let w = u.cross(&v);
    let f2 = v.dot(n_t);
    let (wn, un) = (w.dot(n_t), u.dot(n_t));
    // With n_t along v the angle in the (u, w) plane is undefined.
    let mut f1 = if wn.hypot(un) <= 1e-6 { 0.0 } else { wn.atan2(un) };
    if f1 > PI - ANGLE_TIE {
        f1 = -PI;
    }
    Some([f1, f2, f3])
}

fn bin(v: f64, lo: f64, hi: f64) -> usize {
    let b = ((v - lo) / (hi - lo) * SUB_BINS as f64).floor();
    (b.max(0.0) as usize).min(SUB_BINS - 1)
}

fn spfh(i: usize, points: &[Point3], normals: &[Vector3<f64>], tree: &KdTree, radius: f64, buf: &mut Vec<Neighbor>) -> [f64; FPFH_BINS] {
    tree.radius_into(&points[i], radius, buf);
    let mut h = [0.0; FPFH_BINS];
    let mut count = 0usize;
    for n in buf.iter().filter(|n| n.index != i) {
        if let Some(f) = pair_features(&points[i], &normals[i], &points[n.index], &normals[n.index]) {
            h[bin(f[0], -PI, PI)] += 1.0;
            h[SUB_BINS + bin(f[1], -1.0, 1.0)] += 1.0;
            h[2 * SUB_BINS + bin(f[2], -1.0, 1.0)] += 1.0;
            count += 1;
        }
    }
    if count > 0 {
        for v in h.iter_mut() {
            *v *= 100.0 / count as f64;
        }
    }
    h
}

fn normalize_blocks(h: &mut [f64; FPFH_BINS]) -> bool {
    let mut ok = true;
    for block in h.chunks_mut(SUB_BINS) {
        let s: f64 = block.iter().sum();
        if s > 0.0 {
            block.iter_mut().for_each(|v| *v *= 100.0 / s);
        } else {
            ok = false;
        }
    }
    ok
}

/// FPFH descriptors at the given keypoints:
/// `FPFH(p) = SPFH(p) + 1/k Σ SPFH(p_k) / ω_k` with `ω_k` the distance to
/// neighbor `k`, each 11-bin block then normalized to sum to 100.
pub fn compute_fpfh(c: &PointCloud, keypoints: &[Keypoint], radius: f64) -> Result<Vec<FpfhDescriptor>> {
    let normals = c.normals.as_ref().ok_or(Error::MissingNormals)?;
    let tree = KdTree::build(&c.points);
    // SPFH of every point that any keypoint will touch.
    let mut needed = vec![false; c.len()];
    let mut buf = Vec::new();
    let kp_nbrs: Vec<Vec<Neighbor>> = keypoints
        .iter()
        .map(|k| {
            tree.radius_into(&c.points[k.source_index], radius, &mut buf);
            for n in &buf {
                needed[n.index] = true;
            }
            buf.clone()
        })
        .collect();
    let idx: Vec<usize> = (0..c.len()).filter(|&i| needed[i]).collect();
    let table: Vec<[f64; FPFH_BINS]> = idx
        .par_iter()
        .map_init(Vec::new, |b, &i| spfh(i, &c.points, normals, &tree, radius, b))
        .collect();
    let mut slot = vec![usize::MAX; c.len()];
    for (s, &i) in idx.iter().enumerate() {
        slot[i] = s;
    }
    Ok(keypoints
        .iter()
        .zip(&kp_nbrs)
        .map(|(k, nbrs)| {
            let others: Vec<&Neighbor> = nbrs.iter().filter(|n| n.index != k.source_index && n.dist2 > 0.0).collect();
            if others.is_empty() {
                return FpfhDescriptor {
                    histogram: [0.0; FPFH_BINS],
                    valid: false,
                };
            }
            let mut h = table[slot[k.source_index]];
            let inv_k = 1.0 / others.len() as f64;
            for n in others {
                let w = inv_k / n.dist2.sqrt();
                for (a, b) in h.iter_mut().zip(&table[slot[n.index]]) {
                    *a += w * b;
                }
            }
            let valid = normalize_blocks(&mut h);
            if !valid {
                h = [0.0; FPFH_BINS];
            }
            FpfhDescriptor { histogram: h, valid }
        })
        .collect())
}

/// For every source descriptor, the nearest target descriptor in L2.
pub fn match_correspondences(src: &[FpfhDescriptor], tgt: &[FpfhDescriptor]) -> Vec<Correspondence> {
    if tgt.is_empty() {
        return Vec::new();
    }
    src.par_iter()
        .enumerate()
        .map(|(i, s)| {
            let mut best = (f64::INFINITY, 0usize);
            for (j, t) in tgt.iter().enumerate() {
                let mut d = 0.0;
                for (a, b) in s.histogram.iter().zip(&t.histogram) {
                    d += (a - b) * (a - b);
                    if d >= best.0 {
                        break;
                    }
                }
                if d < best.0 {
                    best = (d, j);
                }
            }
            Correspondence {
                src_idx: i,
                tgt_idx: best.1,
                distance: best.0.sqrt(),
            }
        })
        .collect()
}

// ---------------------------------------------------------------- estimation

/// Least-squares rigid transform mapping the first point of every pair
/// onto the second (Kabsch, reflection-corrected). The pairs are sorted
/// internally so the result does not depend on their order.
pub fn estimate_transform_svd(pairs: &[(Point3, Point3)]) -> Result<RigidTransform> {
    if pairs.len() < 3 {
        return Err(Error::InsufficientCorrespondences(pairs.len()));
    }
    let mut sorted = pairs.to_vec();
    sorted.sort_by(|a, b| {
        let ka = [a.0.x, a.0.y, a.0.z, a.1.x, a.1.y, a.1.z];
        let kb = [b.0.x, b.0.y, b.0.z, b.1.x, b.1.y, b.1.z];
        ka.iter()
            .zip(&kb)
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let n = sorted.len() as f64;
    let cs = sorted.iter().map(|p| p.0).sum::<Point3>() / n;
    let ct = sorted.iter().map(|p| p.1).sum::<Point3>() / n;
    for centroid_side in [0, 1] {
        let c = if centroid_side == 0 { cs } else { ct };
        let (_, cov) = covariance(sorted.iter().map(|p| if centroid_side == 0 { p.0 - c } else { p.1 - c })).unwrap();
        let (vals, _) = sym3_eigen(&cov);
        if !(vals[1] > 1e-12 * vals[2].max(1e-300)) || vals[2] <= 0.0 {
            return Err(Error::Degenerate("points are collinear or coincident".into()));
        }
    }
    let mut h = Matrix3::zeros();
    for (s, t) in &sorted {
        h += (s - cs) * (t - ct).transpose();
    }
    let svd = h.svd(true, true);
    let u = svd.u.unwrap();
    let v = svd.v_t.unwrap().transpose();
    let d = (v * u.transpose()).determinant().signum();
    let r = v * Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, d)) * u.transpose();
    Ok(RigidTransform::new(r, ct - r * cs))
}

/// True iff the transformed up vector `R·(0,0,1)` still points upward.
pub fn check_up_vector(t: &RigidTransform) -> bool {
    t.rotation[(2, 2)] > 0.0
}

/// RANSAC over correspondences. Returns the largest consensus set and the
/// transform refit on it.
pub fn ransac_filter(
    corrs: &[Correspondence],
    src_kp: &[Point3],
    tgt_kp: &[Point3],
    p: &RansacParams,
) -> Result<(Vec<Correspondence>, RigidTransform)> {
    ransac_filter_with(corrs, src_kp, tgt_kp, p, |_| true)
}

/// [`ransac_filter`] where hypotheses failing `admissible` are discarded.
pub fn ransac_filter_with(
    corrs: &[Correspondence],
    src_kp: &[Point3],
    tgt_kp: &[Point3],
    p: &RansacParams,
    admissible: impl Fn(&RigidTransform) -> bool,
) -> Result<(Vec<Correspondence>, RigidTransform)> {
    let n = corrs.len();
    if n < 3 {
        return Err(Error::InsufficientCorrespondences(n));
    }
    let pair = |c: &Correspondence| (src_kp[c.src_idx], tgt_kp[c.tgt_idx]);
    let thr2 = p.inlier_threshold * p.inlier_threshold;
    let count_inliers = |t: &RigidTransform| {
        corrs
            .iter()
            .filter(|c| {
                let (s, q) = pair(c);
                (t.transform_point(&s) - q).norm_squared() < thr2
            })
            .count()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(p.seed);
    let mut best: Option<(usize, RigidTransform)> = None;
    let mut needed = p.max_iterations as f64;
    let mut it = 0usize;
    // Distances are preserved by rigid motions, so sampled triangles whose
    // side lengths disagree by more than two thresholds cannot be all inliers.
    let tol = 2.0 * p.inlier_threshold;
    while it < p.max_iterations && (it as f64) < needed {
        it += 1;
        let a = rng.gen_range(0..n);
        let b = rng.gen_range(0..n);
        let c = rng.gen_range(0..n);
        if a == b || b == c || a == c {
            continue;
        }
        let s = [pair(&corrs[a]), pair(&corrs[b]), pair(&corrs[c])];
        let consistent = [(0, 1), (1, 2), (0, 2)]
            .iter()
            .all(|&(i, j)| ((s[i].0 - s[j].0).norm() - (s[i].1 - s[j].1).norm()).abs() <= tol);
        if !consistent {
            continue;
        }
        let Ok(t) = estimate_transform_svd(&s) else { continue };
        if !admissible(&t) {
            continue;
        }
        let k = count_inliers(&t);
        if k >= 3 && best.as_ref().is_none_or(|b| k > b.0) {
            best = Some((k, t));
            let w = k as f64 / n as f64;
            let denom = (1.0 - w.powi(3)).ln();
            needed = if denom < 0.0 {
                ((1.0 - p.confidence).ln() / denom).ceil()
            } else {
                0.0
            };
        }
    }
    let (_, t) = best.ok_or_else(|| Error::Degenerate("no non-degenerate RANSAC sample".into()))?;
    let inliers: Vec<Correspondence> = corrs
        .iter()
        .filter(|c| {
            let (s, q) = pair(c);
            (t.transform_point(&s) - q).norm_squared() < thr2
        })
        .copied()
        .collect();
    let pairs: Vec<_> = inliers.iter().map(pair).collect();
    let refit = match estimate_transform_svd(&pairs) {
        Ok(r) if admissible(&r) => r,
        _ => t,
    };
    Ok((inliers, refit))
}

// ---------------------------------------------------------------- metric

/// Root mean squared nearest-neighbor distance of the transformed source
/// points whose neighbor lies within `r_c`. `None` if no point qualifies.
pub fn p2p_error(src: &PointCloud, tgt: &PointCloud, t: &RigidTransform, r_c: f64) -> Option<f64> {
    p2p_error_indexed(&src.points, &KdTree::build(&tgt.points), t, r_c)
}

pub fn p2p_error_indexed(src: &[Point3], tgt: &KdTree, t: &RigidTransform, r_c: f64) -> Option<f64> {
    let r2 = r_c * r_c;
    let (sum, n) = src
        .iter()
        .filter_map(|s| tgt.nearest_within(&t.transform_point(s), r2))
        .fold((0.0, 0usize), |(s, n), nb| (s + nb.dist2, n + 1));
    (n > 0).then(|| (sum / n as f64).sqrt())
}

// ---------------------------------------------------------------- pipeline

/// A cloud with keypoints, descriptors and G-ICP data computed once, so that
/// each sensor is prepared a single time for all pairs it takes part in.
#[derive(Debug, Clone)]
pub struct FeatureCloud {
    pub cloud: PointCloud,
    pub keypoints: Vec<Keypoint>,
    pub descriptors: Vec<FpfhDescriptor>,
    pub refine: GicpCloud,
    /// Set when the ground prior is enabled and a ground plane was found.
    pub ground: Option<GroundPlane>,
}

impl FeatureCloud {
    /// `cloud` needs normals and curvature. G-ICP refinement and the p2p
    /// metric run on `refine_points` if given, otherwise on `cloud`.
    pub fn new(cloud: PointCloud, refine_points: Option<Vec<Point3>>, p: &CoarseParams) -> Result<Self> {
        let keypoints = detect_sift_keypoints(&cloud, &p.sift)?;
        let descriptors = compute_fpfh(&cloud, &keypoints, p.fpfh_radius)?;
        let refine = GicpCloud::new(
            refine_points.unwrap_or_else(|| cloud.points.clone()),
            p.gicp.covariance_k,
            p.gicp.epsilon_plane,
        );
        let ground = if p.ground.enabled {
            estimate_ground_plane(&refine.points, &p.ground, p.ransac.seed)
        } else {
            None
        };
        Ok(Self {
            cloud,
            keypoints,
            descriptors,
            refine,
            ground,
        })
    }

    /// Positions and descriptors of the keypoints with a valid descriptor.
    pub fn valid_keypoints(&self) -> (Vec<Point3>, Vec<FpfhDescriptor>) {
        self.keypoints
            .iter()
            .zip(&self.descriptors)
            .filter(|(_, d)| d.valid)
            .map(|(k, d)| (k.position, d.clone()))
            .unzip()
    }
}

/// Full coarse registration of `src` onto `tgt` (both with normals and
/// curvature).
pub fn coarse_register_pair(src: &PointCloud, tgt: &PointCloud, p: &CoarseParams) -> Result<CoarseRegistrationResult> {
    let s = FeatureCloud::new(src.clone(), None, p)?;
    let t = FeatureCloud::new(tgt.clone(), None, p)?;
    coarse_register_prepared(&s, &t, p)
}

pub fn coarse_register_prepared(src: &FeatureCloud, tgt: &FeatureCloud, p: &CoarseParams) -> Result<CoarseRegistrationResult> {
    let mut best: Option<CoarseRegistrationResult> = None;
    let rounds = for_each_candidate(src, tgt, p, p.max_outer_iterations, |c| {
        if best.as_ref().is_none_or(|b| p2p_less(&c, b)) {
            best = Some(c);
        }
        false
    })?;
    let mut best = best.ok_or(Error::NoAdmissibleTransform)?;
    best.iterations_used = rounds;
    Ok(best)
}

fn p2p_less(a: &CoarseRegistrationResult, b: &CoarseRegistrationResult) -> bool {
    a.p2p_error.unwrap_or(f64::INFINITY) < b.p2p_error.unwrap_or(f64::INFINITY)
}

/// Acceptance rule for coarse results: a candidate counts when at least
/// `min_structure_overlap` of the source points standing more than
/// `min_height` above the ground land within `radius` of a target point.
/// Outer rounds continue, up to `max_rounds`, until a candidate passes.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct CoarseValidation {
    pub max_rounds: usize,
    pub min_structure_overlap: f64,
    pub min_height: f64,
    pub radius: f64,
}

impl Default for CoarseValidation {
    fn default() -> Self {
        Self {
            max_rounds: 25,
            min_structure_overlap: 0.17,
            min_height: 0.5,
            radius: 0.5,
        }
    }
}

/// Fraction of the source refine points standing above the ground that land
/// within `radius` of a target refine point under `t`. The ground matches
/// under any horizontal shift, so only the structure above it tells a
/// correct alignment from a wrong one.
pub fn structure_overlap(src: &FeatureCloud, tgt: &FeatureCloud, t: &RigidTransform, min_height: f64, radius: f64) -> f64 {
    let above: Vec<&Point3> = src
        .refine
        .points
        .iter()
        .filter(|p| src.ground.is_none_or(|g| g.height(p) > min_height))
        .collect();
    if above.is_empty() {
        return 0.0;
    }
    let r2 = radius * radius;
    let hits = above
        .iter()
        .filter(|p| tgt.refine.tree().nearest_within(&t.transform_point(p), r2).is_some())
        .count();
    hits as f64 / above.len() as f64
}

#[derive(Debug)]
pub struct ValidatedCoarse {
    /// The first accepted candidate, else the one with the largest overlap.
    pub result: Result<CoarseRegistrationResult>,
    pub overlap: f64,
    /// Outer rounds run.
    pub rounds: usize,
    pub accepted: bool,
}

/// Coarse registration whose outer loop runs until a candidate passes `v`.
/// Repetitive scenes (rows of poles, parallel lanes) produce consensus sets
/// for shifted alignments that outnumber the true one; removing them round
/// by round exposes it.
pub fn coarse_register_validated(src: &FeatureCloud, tgt: &FeatureCloud, p: &CoarseParams, v: &CoarseValidation) -> ValidatedCoarse {
    let mut best: Option<(CoarseRegistrationResult, f64)> = None;
    let mut accepted = false;
    let rounds = for_each_candidate(src, tgt, p, v.max_rounds.max(1), |c| {
        let overlap = structure_overlap(src, tgt, &c.transform, v.min_height, v.radius);
        accepted = overlap >= v.min_structure_overlap;
        if accepted || best.as_ref().is_none_or(|(_, o)| overlap > *o) {
            best = Some((c, overlap));
        }
        accepted
    });
    match (rounds, best) {
        (Ok(rounds), Some((mut c, overlap))) => {
            c.iterations_used = rounds;
            ValidatedCoarse {
                result: Ok(c),
                overlap,
                rounds,
                accepted,
            }
        }
        (Ok(rounds), None) => ValidatedCoarse {
            result: Err(Error::NoAdmissibleTransform),
            overlap: 0.0,
            rounds,
            accepted: false,
        },
        (Err(e), _) => ValidatedCoarse {
            result: Err(e),
            overlap: 0.0,
            rounds: 0,
            accepted: false,
        },
    }
}

/// Matches the descriptors (height-gated when both clouds have a ground
/// plane) and runs up to `rounds` outer rounds; see
/// [`register_from_correspondences_with`].
fn for_each_candidate(
    src: &FeatureCloud,
    tgt: &FeatureCloud,
    p: &CoarseParams,
    rounds: usize,
    visit: impl FnMut(CoarseRegistrationResult) -> bool,
) -> Result<usize> {
    let (skp, sdesc) = src.valid_keypoints();
    let (tkp, tdesc) = tgt.valid_keypoints();
    if sdesc.is_empty() || tdesc.is_empty() {
        return Err(Error::InsufficientCorrespondences(0));
    }
    if let (true, Some(gs), Some(gt)) = (p.ground.enabled, &src.ground, &tgt.ground) {
        let (ls, lt) = (gs.leveling(), gt.leveling());
        let s_lev: Vec<Point3> = skp.iter().map(|k| ls.transform_point(k)).collect();
        let t_lev: Vec<Point3> = tkp.iter().map(|k| lt.transform_point(k)).collect();
        let sh: Vec<f64> = s_lev.iter().map(|k| k.z).collect();
        let th: Vec<f64> = t_lev.iter().map(|k| k.z).collect();
        let corrs = match_correspondences_gated(&sdesc, &tdesc, &sh, &th, p.ground.height_tolerance, p.ground.top_k);
        let lt_inv = lt.inverse();
        return outer_rounds(&skp, &tkp, corrs, &src.refine, &tgt.refine, p, rounds, |pool| {
            let (inliers, t) = ransac_planar(pool, &s_lev, &t_lev, &p.ransac)?;
            Ok((inliers, lt_inv.compose(&t).compose(&ls)))
        }, visit);
    }
    let corrs = match_correspondences(&sdesc, &tdesc);
    outer_rounds(&skp, &tkp, corrs, &src.refine, &tgt.refine, p, rounds, |pool| {
        ransac_filter_with(pool, &skp, &tkp, &p.ransac, check_up_vector)
    }, visit)
}

/// The outer loop: RANSAC, up-vector check, G-ICP refinement and p2p
/// scoring; after each round the supporting correspondences are removed and
/// the candidate with the lowest p2p error wins.
pub fn register_from_correspondences(
    src_kp: &[Point3],
    tgt_kp: &[Point3],
    corrs: Vec<Correspondence>,
    src_refine: &GicpCloud,
    tgt_refine: &GicpCloud,
    p: &CoarseParams,
) -> Result<CoarseRegistrationResult> {
    register_from_correspondences_with(src_kp, tgt_kp, corrs, src_refine, tgt_refine, p, |pool| {
        ransac_filter_with(pool, src_kp, tgt_kp, &p.ransac, check_up_vector)
    })
}

/// The outer loop with a custom consensus step, which must return the
/// inliers and the transform in the keypoints' own coordinates.
pub fn register_from_correspondences_with(
    src_kp: &[Point3],
    tgt_kp: &[Point3],
    corrs: Vec<Correspondence>,
    src_refine: &GicpCloud,
    tgt_refine: &GicpCloud,
    p: &CoarseParams,
    consensus: impl Fn(&[Correspondence]) -> Result<(Vec<Correspondence>, RigidTransform)>,
) -> Result<CoarseRegistrationResult> {
    let mut best: Option<CoarseRegistrationResult> = None;
    let rounds = outer_rounds(src_kp, tgt_kp, corrs, src_refine, tgt_refine, p, p.max_outer_iterations, consensus, |c| {
        if best.as_ref().is_none_or(|b| p2p_less(&c, b)) {
            best = Some(c);
        }
        false
    })?;
    let mut best = best.ok_or(Error::NoAdmissibleTransform)?;
    best.iterations_used = rounds;
    Ok(best)
}

/// Runs up to `rounds` consensus rounds and hands every admissible refined
/// candidate to `visit`, which returns true to stop. Returns the number of
/// rounds run.
#[allow(clippy::too_many_arguments)]
fn outer_rounds(
    src_kp: &[Point3],
    tgt_kp: &[Point3],
    corrs: Vec<Correspondence>,
    src_refine: &GicpCloud,
    tgt_refine: &GicpCloud,
    p: &CoarseParams,
    rounds: usize,
    consensus: impl Fn(&[Correspondence]) -> Result<(Vec<Correspondence>, RigidTransform)>,
    mut visit: impl FnMut(CoarseRegistrationResult) -> bool,
) -> Result<usize> {
    let mut pool = corrs;
    let mut done = 0;
    let mut visited = false;
    let thr2 = p.ransac.inlier_threshold * p.ransac.inlier_threshold;
    for outer in 0..rounds {
        if pool.len() < 3 {
            if outer == 0 {
                return Err(Error::InsufficientCorrespondences(pool.len()));
            }
            break;
        }
        let (inliers, t) = match consensus(&pool) {
            Ok(r) => r,
            Err(e) if outer == 0 => {
                return Err(match e {
                    Error::Degenerate(_) => Error::NoAdmissibleTransform,
                    e => e,
                })
            }
            Err(_) => break,
        };
        done = outer + 1;
        pool.retain(|c| (t.transform_point(&src_kp[c.src_idx]) - tgt_kp[c.tgt_idx]).norm_squared() >= thr2);
        if !check_up_vector(&t) {
            continue;
        }
        let refined = gicp_prepared(src_refine, tgt_refine, None, &t, &p.gicp);
        let candidate = if refined.correspondences > 0 && check_up_vector(&refined.transform) {
            refined.transform
        } else {
            t
        };
        let err = p2p_error_indexed(&src_refine.points, tgt_refine.tree(), &candidate, p.r_c);
        log::debug!("coarse round {outer}: {} inliers, p2p {:?}", inliers.len(), err);
        visited = true;
        let stop = visit(CoarseRegistrationResult {
            transform: candidate,
            p2p_error: err,
            inlier_count: inliers.len(),
            iterations_used: done,
        });
        if stop {
            break;
        }
    }
    if !visited {
        return Err(Error::NoAdmissibleTransform);
    }
    Ok(done)
}

// ---------------------------------------------------------------- ground prior

/// Plane `normal · p + offset = 0` with the normal pointing to the side of
/// the sensor origin, so `offset` is the sensor's height above it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GroundPlane {
    pub normal: Vector3<f64>,
    pub offset: f64,
    pub support: usize,
}

impl GroundPlane {
    pub fn height(&self, p: &Point3) -> f64 {
        self.normal.dot(p) + self.offset
    }

    /// Maps sensor coordinates into a frame whose xy plane is the ground
    /// and whose z is the height above it. The heading is arbitrary.
    pub fn leveling(&self) -> RigidTransform {
        let z = Vector3::z();
        let axis = self.normal.cross(&z);
        let angle = self.normal.dot(&z).clamp(-1.0, 1.0).acos();
        let r = if axis.norm() < 1e-12 {
            Matrix3::identity()
        } else {
            crate::geom::axis_angle_matrix(&axis.normalize(), angle)
        };
        RigidTransform::new(r, Vector3::new(0.0, 0.0, self.offset))
    }
}

fn oriented_plane(normal: Vector3<f64>, through: &Point3) -> (Vector3<f64>, f64) {
    let d = -normal.dot(through);
    if d < 0.0 {
        (-normal, -d)
    } else {
        (normal, d)
    }
}

/// Dominant plane below the sensor: RANSAC over planes whose normal lies
/// within `max_tilt` of the sensor's z axis, refit by least squares on the
/// inliers. `None` if no such plane carries `min_support` of the points.
pub fn estimate_ground_plane(points: &[Point3], p: &GroundPrior, seed: u64) -> Option<GroundPlane> {
    if points.len() < 3 {
        return None;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6772_6f75_6e64);
    let count = |n: &Vector3<f64>, d: f64| points.iter().filter(|q| (n.dot(q) + d).abs() < p.plane_threshold).count();
    let mut best: Option<(usize, Vector3<f64>, f64)> = None;
    for _ in 0..p.plane_iterations {
        let a = points[rng.gen_range(0..points.len())];
        let b = points[rng.gen_range(0..points.len())];
        let c = points[rng.gen_range(0..points.len())];
        let n = (b - a).cross(&(c - a));
        if n.norm() < 1e-9 {
            continue;
        }
        let (n, d) = oriented_plane(n.normalize(), &a);
        if n.z < p.max_tilt.cos() {
            continue;
        }
        let k = count(&n, d);
        if best.is_none_or(|b| k > b.0) {
            best = Some((k, n, d));
        }
    }
    let (_, n, d) = best?;
    let inliers: Vec<Point3> = points.iter().filter(|q| (n.dot(q) + d).abs() < p.plane_threshold).copied().collect();
    let (centroid, cov) = covariance(inliers.iter().copied())?;
    let (_, vecs) = sym3_eigen(&cov);
    let (n2, d2) = oriented_plane(vecs.column(0).into_owned(), &centroid);
    let (n, d) = if n2.z >= p.max_tilt.cos() { (n2, d2) } else { (n, d) };
    let support = count(&n, d);
    if (support as f64) < p.min_support * points.len() as f64 {
        log::info!("no ground plane: best support {support} of {}", points.len());
        return None;
    }
    Some(GroundPlane { normal: n, offset: d, support })
}

/// For every source descriptor, the `k` nearest target descriptors among
/// the target keypoints within `tolerance` of its height.
pub fn match_correspondences_gated(
    src: &[FpfhDescriptor],
    tgt: &[FpfhDescriptor],
    src_h: &[f64],
    tgt_h: &[f64],
    tolerance: f64,
    k: usize,
) -> Vec<Correspondence> {
    src.par_iter()
        .enumerate()
        .flat_map_iter(|(i, s)| {
            let mut cand: Vec<(f64, usize)> = tgt
                .iter()
                .enumerate()
                .filter(|(j, _)| (src_h[i] - tgt_h[*j]).abs() <= tolerance)
                .map(|(j, t)| {
                    let d: f64 = s.histogram.iter().zip(&t.histogram).map(|(a, b)| (a - b) * (a - b)).sum();
                    (d, j)
                })
                .collect();
            cand.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            cand.truncate(k);
            cand.into_iter().map(move |(d, j)| Correspondence {
                src_idx: i,
                tgt_idx: j,
                distance: d.sqrt(),
            })
        })
        .collect()
}

/// Least-squares yaw about z and 3D translation mapping the first point of
/// every pair onto the second.
pub fn estimate_planar_transform(pairs: &[(Point3, Point3)]) -> Result<RigidTransform> {
    if pairs.len() < 2 {
        return Err(Error::InsufficientCorrespondences(pairs.len()));
    }
    let n = pairs.len() as f64;
    let cs = pairs.iter().map(|p| p.0).sum::<Point3>() / n;
    let ct = pairs.iter().map(|p| p.1).sum::<Point3>() / n;
    let (mut sin, mut cos) = (0.0, 0.0);
    for (s, t) in pairs {
        let (a, b) = (s - cs, t - ct);
        sin += a.x * b.y - a.y * b.x;
        cos += a.x * b.x + a.y * b.y;
    }
    if sin.hypot(cos) < 1e-12 {
        return Err(Error::Degenerate("pairs are coincident in the ground plane".into()));
    }
    let r = crate::geom::axis_angle_matrix(&Vector3::z(), sin.atan2(cos));
    Ok(RigidTransform::new(r, ct - r * cs))
}

/// RANSAC over yaw and translation for leveled keypoints: each hypothesis
/// comes from two correspondences whose horizontal separations agree.
pub fn ransac_planar(
    corrs: &[Correspondence],
    src_kp: &[Point3],
    tgt_kp: &[Point3],
    p: &RansacParams,
) -> Result<(Vec<Correspondence>, RigidTransform)> {
    let n = corrs.len();
    if n < 3 {
        return Err(Error::InsufficientCorrespondences(n));
    }
    let pair = |c: &Correspondence| (src_kp[c.src_idx], tgt_kp[c.tgt_idx]);
    let thr2 = p.inlier_threshold * p.inlier_threshold;
    let inliers_of = |t: &RigidTransform| -> Vec<Correspondence> {
        corrs
            .iter()
            .filter(|c| {
                let (s, q) = pair(c);
                (t.transform_point(&s) - q).norm_squared() < thr2
            })
            .copied()
            .collect()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(p.seed);
    let mut best: Option<(usize, RigidTransform)> = None;
    let mut needed = p.max_iterations as f64;
    let mut it = 0usize;
    let tol = 2.0 * p.inlier_threshold;
    while it < p.max_iterations && (it as f64) < needed {
        it += 1;
        let (a, b) = (rng.gen_range(0..n), rng.gen_range(0..n));
        let (s0, t0) = pair(&corrs[a]);
        let (s1, t1) = pair(&corrs[b]);
        let ds = (s1 - s0).xy().norm();
        if ds < tol || (ds - (t1 - t0).xy().norm()).abs() > tol {
            continue;
        }
        let Ok(t) = estimate_planar_transform(&[(s0, t0), (s1, t1)]) else { continue };
        let k = corrs
            .iter()
            .filter(|c| {
                let (s, q) = pair(c);
                (t.transform_point(&s) - q).norm_squared() < thr2
            })
            .count();
        if k >= 3 && best.as_ref().is_none_or(|b| k > b.0) {
            best = Some((k, t));
            let w = k as f64 / n as f64;
            let denom = (1.0 - w * w).ln();
            needed = if denom < 0.0 {
                ((1.0 - p.confidence).ln() / denom).ceil()
            } else {
                0.0
            };
        }
    }
    let (_, t) = best.ok_or_else(|| Error::Degenerate("no consistent pair of correspondences".into()))?;
    let inliers = inliers_of(&t);
    let pairs: Vec<_> = inliers.iter().map(pair).collect();
    let refit = estimate_planar_transform(&pairs).unwrap_or(t);
    let refit_inliers = inliers_of(&refit);
    if refit_inliers.len() >= inliers.len() {
        Ok((refit_inliers, refit))
    } else {
        Ok((inliers, t))
    }
}
