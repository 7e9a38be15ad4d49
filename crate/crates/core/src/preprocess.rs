//! Outlier removal, normal estimation and the two downsamplers.
//!
//! The octree filter keeps resolution where surface orientation varies and
//! collapses planar regions to coarse centroids; the voxel grid is the plain
//! fixed-resolution centroid filter used during continuous registration.

use std::sync::OnceLock;

use nalgebra::{Matrix3, SymmetricEigen, Vector3};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geom::{Point3, PointCloud};
use crate::kdtree::{KdTree, Neighbor};

/// Parameters of the normal-guided octree filter.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct OctreeFilterParams {
    pub max_voxel_size: f64,
    pub min_voxel_size: f64,
    /// A voxel splits when fewer than this fraction of its normals match the dominant direction.
    pub dominant_ratio_threshold: f64,
    /// Number of cells on the unit sphere; must be an icosphere vertex count (12, 42, 162, 642).
    pub sphere_cells: usize,
    pub min_points_per_voxel: usize,
    /// Angular window (radians) for a normal to match the dominant direction.
    pub match_angle: f64,
}

impl Default for OctreeFilterParams {
    fn default() -> Self {
        Self {
            max_voxel_size: 4.0,
            min_voxel_size: 0.5,
            dominant_ratio_threshold: 0.8,
            sphere_cells: 162,
            min_points_per_voxel: 5,
            match_angle: 15f64.to_radians(),
        }
    }
}

impl OctreeFilterParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.min_voxel_size > 0.0 && self.min_voxel_size < self.max_voxel_size) {
            return Err(Error::InvalidParameter(format!(
                "need 0 < min_voxel_size ({}) < max_voxel_size ({})",
                self.min_voxel_size, self.max_voxel_size
            )));
        }
        if !(self.dominant_ratio_threshold >= 0.0 && self.dominant_ratio_threshold < 1.0) {
            return Err(Error::InvalidParameter(format!(
                "dominant_ratio_threshold {} outside [0, 1)",
                self.dominant_ratio_threshold
            )));
        }
        icosphere_level(self.sphere_cells)?;
        Ok(())
    }
}

/// Normal and surface variation of one point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormalEstimate {
    pub normal: Vector3<f64>,
    pub curvature: f64,
}

/// Result of [`remove_outliers`].
#[derive(Debug, Clone)]
pub struct OutlierRemoval {
    pub cloud: PointCloud,
    pub removed: usize,
    /// Set when the cloud was too small to compute statistics and was returned unchanged.
    pub skipped: bool,
}

/// Statistical k-NN filter: drops points whose mean distance to their `k`
/// nearest neighbors exceeds `mean + stddev_mult * stddev` over the cloud.
pub fn remove_outliers(c: &PointCloud, k: usize, stddev_mult: f64) -> OutlierRemoval {
    if k == 0 || c.len() < k + 1 {
        if !c.is_empty() {
            log::warn!("outlier removal skipped: {} points, k = {k}", c.len());
        }
        return OutlierRemoval {
            cloud: c.clone(),
            removed: 0,
            skipped: !c.is_empty(),
        };
    }
    let tree = KdTree::build(&c.points);
    let mean_dist: Vec<f64> = c
        .points
        .par_iter()
        .map(|p| {
            let nn = tree.knn(p, k + 1);
            // The query itself is the first hit.
            nn.iter().skip(1).map(|n| n.dist2.sqrt()).sum::<f64>() / k as f64
        })
        .collect();
    let n = mean_dist.len() as f64;
    let mu = mean_dist.iter().sum::<f64>() / n;
    let var = mean_dist.iter().map(|d| (d - mu) * (d - mu)).sum::<f64>() / n;
    let limit = mu + stddev_mult * var.sqrt();
    let keep: Vec<bool> = mean_dist.iter().map(|&d| d <= limit).collect();
    let cloud = c.select(&keep);
    OutlierRemoval {
        removed: c.len() - cloud.len(),
        cloud,
        skipped: false,
    }
}

/// Eigen-decomposition of a symmetric 3×3 matrix, eigenvalues ascending.
pub(crate) fn sym3_eigen(m: &Matrix3<f64>) -> ([f64; 3], Matrix3<f64>) {
    let eig = SymmetricEigen::new(*m);
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let vals = order.map(|i| eig.eigenvalues[i]);
    let vecs = Matrix3::from_columns(&order.map(|i| eig.eigenvectors.column(i).into_owned()));
    (vals, vecs)
}

/// Sample covariance (normalized by n) and mean of the given points.
pub(crate) fn covariance(points: impl Iterator<Item = Point3>) -> Option<(Point3, Matrix3<f64>)> {
    let mut n = 0usize;
    let mut sum = Vector3::zeros();
    let mut outer = Matrix3::zeros();
    for p in points {
        n += 1;
        sum += p;
        outer += p * p.transpose();
    }
    if n == 0 {
        return None;
    }
    let mean = sum / n as f64;
    let cov = outer / n as f64 - mean * mean.transpose();
    Some((mean, cov))
}

fn normal_from_neighbors(
    surface: &[Point3],
    nbrs: &[Neighbor],
    at: &Point3,
    viewpoint: &Point3,
) -> Option<NormalEstimate> {
    if nbrs.len() < 3 {
        return None;
    }
    // Center on the query point first for numerical stability far from the origin.
    let (_, cov) = covariance(nbrs.iter().map(|n| surface[n.index] - at))?;
    let (vals, vecs) = sym3_eigen(&cov);
    let mut normal: Vector3<f64> = vecs.column(0).into_owned();
    let norm = normal.norm();
    if !(norm > 0.0) {
        return None;
    }
    normal /= norm;
    if normal.dot(&(viewpoint - at)) < 0.0 {
        normal = -normal;
    }
    let sum = vals[0].max(0.0) + vals[1].max(0.0) + vals[2].max(0.0);
    let curvature = if sum > 0.0 { vals[0].max(0.0) / sum } else { 0.0 };
    Some(NormalEstimate { normal, curvature })
}

/// PCA normals of the radius neighborhood of every point, oriented toward
/// `viewpoint`. Points with fewer than 3 points in their neighborhood
/// (including themselves) get `None`.
pub fn estimate_normals(c: &PointCloud, radius: f64, viewpoint: &Point3) -> Vec<Option<NormalEstimate>> {
    estimate_normals_on_surface(&c.points, &c.points, radius, viewpoint)
}

/// Normals at `queries` computed from neighborhoods in `surface`.
pub fn estimate_normals_on_surface(
    queries: &[Point3],
    surface: &[Point3],
    radius: f64,
    viewpoint: &Point3,
) -> Vec<Option<NormalEstimate>> {
    assert!(radius > 0.0, "normal radius must be positive");
    let tree = KdTree::build(surface);
    queries
        .par_iter()
        .map_init(Vec::new, |buf, q| {
            tree.radius_into(q, radius, buf);
            normal_from_neighbors(surface, buf, q, viewpoint)
        })
        .collect()
}

/// Attaches estimated normals and curvature, dropping points that have none.
pub fn attach_normals(c: &PointCloud, estimates: &[Option<NormalEstimate>]) -> PointCloud {
    assert_eq!(c.len(), estimates.len());
    let keep: Vec<bool> = estimates.iter().map(Option::is_some).collect();
    let mut out = c.select(&keep);
    let est: Vec<&NormalEstimate> = estimates.iter().flatten().collect();
    out.normals = Some(est.iter().map(|e| e.normal).collect());
    out.curvature = Some(est.iter().map(|e| e.curvature).collect());
    out
}

/// Convenience: estimate and attach in one step.
pub fn with_normals(c: &PointCloud, radius: f64, viewpoint: &Point3) -> PointCloud {
    attach_normals(c, &estimate_normals(c, radius, viewpoint))
}

pub(crate) type VoxelKey = [i64; 3];

#[inline]
pub(crate) fn voxel_key(p: &Point3, size: f64) -> VoxelKey {
    [
        (p.x / size).floor() as i64,
        (p.y / size).floor() as i64,
        (p.z / size).floor() as i64,
    ]
}

/// Groups point indices by voxel (grid anchored at the origin). Groups are
/// in lexicographic key order; indices within a group keep input order.
pub(crate) fn voxel_groups(points: &[Point3], size: f64) -> Vec<(VoxelKey, Vec<usize>)> {
    let mut keyed: Vec<(VoxelKey, usize)> = points
        .iter()
        .enumerate()
        .map(|(i, p)| (voxel_key(p, size), i))
        .collect();
    keyed.sort_unstable();
    let mut out: Vec<(VoxelKey, Vec<usize>)> = Vec::new();
    for (k, i) in keyed {
        match out.last_mut() {
            Some((lk, v)) if *lk == k => v.push(i),
            _ => out.push((k, vec![i])),
        }
    }
    out
}

fn centroid(points: &[Point3], idx: &[usize]) -> Point3 {
    let mut sum = Vector3::zeros();
    for &i in idx {
        sum += points[i];
    }
    sum / idx.len() as f64
}

/// One centroid per occupied voxel, in lexicographic voxel order. Normals
/// (renormalized mean) and curvature (mean) are carried along when present.
pub fn voxel_downsample(c: &PointCloud, voxel: f64) -> PointCloud {
    assert!(voxel > 0.0, "voxel size must be positive");
    let groups = voxel_groups(&c.points, voxel);
    let idx: Vec<&[usize]> = groups.iter().map(|(_, v)| v.as_slice()).collect();
    emit_centroids(c, &idx)
}

fn emit_centroids(c: &PointCloud, groups: &[&[usize]]) -> PointCloud {
    let mut out = c.with_points(groups.iter().map(|g| centroid(&c.points, g)).collect());
    if let Some(ns) = &c.normals {
        out.normals = Some(
            groups
                .iter()
                .map(|g| {
                    let m: Vector3<f64> = g.iter().map(|&i| ns[i]).sum();
                    let n = m.norm();
                    if n > 1e-12 {
                        m / n
                    } else {
                        ns[g[0]]
                    }
                })
                .collect(),
        );
    }
    if let Some(cs) = &c.curvature {
        out.curvature = Some(
            groups
                .iter()
                .map(|g| g.iter().map(|&i| cs[i]).sum::<f64>() / g.len() as f64)
                .collect(),
        );
    }
    out
}

/// Discretized unit sphere: icosphere vertices with their adjacency.
#[derive(Debug)]
pub struct SphereGrid {
    pub dirs: Vec<Vector3<f64>>,
    pub adjacency: Vec<Vec<usize>>,
}

impl SphereGrid {
    /// Index of the cell whose center is closest to `n`.
    pub fn cell_of(&self, n: &Vector3<f64>) -> usize {
        let mut best = 0;
        let mut best_dot = f64::NEG_INFINITY;
        for (i, d) in self.dirs.iter().enumerate() {
            let dot = d.dot(n);
            if dot > best_dot {
                best_dot = dot;
                best = i;
            }
        }
        best
    }
}

fn icosphere_level(cells: usize) -> Result<usize> {
    (0..5)
        .find(|&l| 10 * 4usize.pow(l as u32) + 2 == cells)
        .ok_or_else(|| {
            Error::InvalidParameter(format!(
                "sphere_cells = {cells} is not an icosphere vertex count (12, 42, 162, 642, 2562)"
            ))
        })
}

/// Shared icosphere with the given vertex count.
pub fn sphere_grid(cells: usize) -> Result<&'static SphereGrid> {
    static GRIDS: [OnceLock<SphereGrid>; 5] = [const { OnceLock::new() }; 5];
    let level = icosphere_level(cells)?;
    Ok(GRIDS[level].get_or_init(|| build_icosphere(level)))
}

fn build_icosphere(level: usize) -> SphereGrid {
    let t = (1.0 + 5f64.sqrt()) / 2.0;
    let mut verts: Vec<Vector3<f64>> = [
        (-1.0, t, 0.0),
        (1.0, t, 0.0),
        (-1.0, -t, 0.0),
        (1.0, -t, 0.0),
        (0.0, -1.0, t),
        (0.0, 1.0, t),
        (0.0, -1.0, -t),
        (0.0, 1.0, -t),
        (t, 0.0, -1.0),
        (t, 0.0, 1.0),
        (-t, 0.0, -1.0),
        (-t, 0.0, 1.0),
    ]
    .iter()
    .map(|&(x, y, z)| Vector3::new(x, y, z).normalize())
    .collect();
    let mut faces: Vec<[usize; 3]> = vec![
        [0, 11, 5],
        [0, 5, 1],
        [0, 1, 7],
        [0, 7, 10],
        [0, 10, 11],
        [1, 5, 9],
        [5, 11, 4],
        [11, 10, 2],
        [10, 7, 6],
        [7, 1, 8],
        [3, 9, 4],
        [3, 4, 2],
        [3, 2, 6],
        [3, 6, 8],
        [3, 8, 9],
        [4, 9, 5],
        [2, 4, 11],
        [6, 2, 10],
        [8, 6, 7],
        [9, 8, 1],
    ];
    for _ in 0..level {
        let mut mids = std::collections::HashMap::new();
        let mut midpoint = |a: usize, b: usize, verts: &mut Vec<Vector3<f64>>| -> usize {
            let key = (a.min(b), a.max(b));
            *mids.entry(key).or_insert_with(|| {
                verts.push(((verts[a] + verts[b]) * 0.5).normalize());
                verts.len() - 1
            })
        };
        let mut next = Vec::with_capacity(faces.len() * 4);
        for [a, b, c] in faces {
            let ab = midpoint(a, b, &mut verts);
            let bc = midpoint(b, c, &mut verts);
            let ca = midpoint(c, a, &mut verts);
            next.extend_from_slice(&[[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]);
        }
        faces = next;
    }
    let mut adjacency = vec![Vec::new(); verts.len()];
    for [a, b, c] in &faces {
        for (u, v) in [(*a, *b), (*b, *c), (*c, *a)] {
            if !adjacency[u].contains(&v) {
                adjacency[u].push(v);
            }
            if !adjacency[v].contains(&u) {
                adjacency[v].push(u);
            }
        }
    }
    for adj in &mut adjacency {
        adj.sort_unstable();
    }
    SphereGrid {
        dirs: verts,
        adjacency,
    }
}

/// Fraction of `normals[idx]` within the angular window of the dominant
/// direction. Each normal votes for its sphere cell and the adjacent cells;
/// the winning cell's voters define the dominant direction (their mean).
pub fn dominant_ratio(normals: &[Vector3<f64>], idx: &[usize], grid: &SphereGrid, match_angle: f64) -> f64 {
    if idx.is_empty() {
        return 1.0;
    }
    let n_cells = grid.dirs.len();
    let mut votes = vec![0u32; n_cells];
    let mut direct = vec![0u32; n_cells];
    let cells: Vec<usize> = idx.iter().map(|&i| grid.cell_of(&normals[i])).collect();
    for &c in &cells {
        votes[c] += 1;
        direct[c] += 1;
        for &a in &grid.adjacency[c] {
            votes[a] += 1;
        }
    }
    let mut dominant = 0;
    for c in 1..n_cells {
        if (votes[c], direct[c]) > (votes[dominant], direct[dominant]) {
            dominant = c;
        }
    }
    let mut mean = Vector3::zeros();
    for (k, &c) in cells.iter().enumerate() {
        if c == dominant || grid.adjacency[dominant].binary_search(&c).is_ok() {
            mean += normals[idx[k]];
        }
    }
    let dir = if mean.norm() > 1e-12 {
        mean.normalize()
    } else {
        grid.dirs[dominant]
    };
    let cos_limit = match_angle.cos();
    let matching = idx.iter().filter(|&&i| normals[i].dot(&dir) >= cos_limit).count();
    matching as f64 / idx.len() as f64
}

/// Adaptive octree filter. Starts from a `max_voxel_size` grid anchored at
/// the origin; a voxel is split into octants while the dominant-normal ratio
/// is below the threshold and the children would still be at least
/// `min_voxel_size`. Each leaf emits its centroid.
pub fn octree_downsample(c: &PointCloud, p: &OctreeFilterParams) -> Result<PointCloud> {
    p.validate()?;
    let normals = c.normals.as_ref().ok_or(Error::MissingNormals)?;
    if c.is_empty() {
        return Ok(c.clone());
    }
    if c.len() < p.min_points_per_voxel {
        let all: Vec<usize> = (0..c.len()).collect();
        return Ok(emit_centroids(c, &[&all]));
    }
    let grid = sphere_grid(p.sphere_cells)?;
    let roots = voxel_groups(&c.points, p.max_voxel_size);
    let leaves: Vec<Vec<Vec<usize>>> = roots
        .par_iter()
        .map(|(key, idx)| {
            let corner = Vector3::new(key[0] as f64, key[1] as f64, key[2] as f64) * p.max_voxel_size;
            let mut leaves = Vec::new();
            split_voxel(&c.points, normals, idx.clone(), corner, p.max_voxel_size, p, grid, &mut leaves);
            leaves
        })
        .collect();
    let groups: Vec<&[usize]> = leaves.iter().flatten().map(Vec::as_slice).collect();
    Ok(emit_centroids(c, &groups))
}

#[allow(clippy::too_many_arguments)]
fn split_voxel(
    points: &[Point3],
    normals: &[Vector3<f64>],
    idx: Vec<usize>,
    corner: Vector3<f64>,
    size: f64,
    p: &OctreeFilterParams,
    grid: &SphereGrid,
    leaves: &mut Vec<Vec<usize>>,
) {
    let half = size * 0.5;
    let splittable = idx.len() >= p.min_points_per_voxel
        && half >= p.min_voxel_size
        && dominant_ratio(normals, &idx, grid, p.match_angle) < p.dominant_ratio_threshold;
    if !splittable {
        leaves.push(idx);
        return;
    }
    let mid = corner + Vector3::repeat(half);
    let mut children: [Vec<usize>; 8] = Default::default();
    for i in idx {
        let q = &points[i];
        let octant = usize::from(q.x >= mid.x) | usize::from(q.y >= mid.y) << 1 | usize::from(q.z >= mid.z) << 2;
        children[octant].push(i);
    }
    for (o, child) in children.into_iter().enumerate() {
        if child.is_empty() {
            continue;
        }
        let offset = Vector3::new((o & 1) as f64, ((o >> 1) & 1) as f64, ((o >> 2) & 1) as f64) * half;
        split_voxel(points, normals, child, corner + offset, half, p, grid, leaves);
    }
}
