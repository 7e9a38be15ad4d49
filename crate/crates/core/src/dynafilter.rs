//! Static/dynamic segmentation against a sensor's first frame.
//!
//! Change detection compares ray lengths inside a cone around each point's
//! direction, seen from the reference sensor origin. Detected changes feed a
//! ground-projected background model whose cells decay every frame; points
//! in heavily used cells (street lanes, after a while) count as dynamic.

use std::collections::HashMap;

use crate::geom::{Point3, PointCloud, RigidTransform};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SphericalPoint {
    pub range: f64,
    /// In `[-π, π)`.
    pub azimuth: f64,
    /// In `[-π/2, π/2]`.
    pub elevation: f64,
}

impl SphericalPoint {
    pub fn from_cartesian(p: &Point3) -> Self {
        let range = p.norm();
        let mut azimuth = p.y.atan2(p.x);
        if azimuth >= std::f64::consts::PI {
            azimuth -= 2.0 * std::f64::consts::PI;
        }
        let elevation = if range > 0.0 {
            (p.z / range).clamp(-1.0, 1.0).asin()
        } else {
            0.0
        };
        Self {
            range,
            azimuth,
            elevation,
        }
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct ChangeParams {
    pub cone_half_angle: f64,
    /// Absolute ray-length difference counted as a change, meters.
    pub range_threshold: f64,
}

impl Default for ChangeParams {
    fn default() -> Self {
        // 1.5 × the vertical resolution of a 64-layer, 33.2° sensor.
        Self {
            cone_half_angle: 1.5 * (33.2f64 / 63.0).to_radians(),
            range_threshold: 0.3,
        }
    }
}

struct Cone {
    half_angle: f64,
    sin: f64,
    cos: f64,
}

impl Cone {
    fn new(half_angle: f64) -> Self {
        Self {
            half_angle,
            sin: half_angle.sin(),
            cos: half_angle.cos(),
        }
    }
}

/// Unit directions and ranges binned on an azimuth/elevation grid whose
/// cell size equals the cone half-angle.
#[derive(Debug, Clone)]
pub struct SphericalIndex {
    dirs: Vec<Point3>,
    ranges: Vec<f64>,
    angles: Vec<(f64, f64)>,
    bin: f64,
    n_az: i64,
    n_el: i64,
    /// Point ids sorted by cell; cell `c` owns `ids[start[c]..start[c + 1]]`.
    start: Vec<u32>,
    ids: Vec<u32>,
}

impl SphericalIndex {
    pub fn new(points: &[Point3], cone_half_angle: f64) -> Self {
        assert!(cone_half_angle > 0.0);
        let n_az = ((2.0 * std::f64::consts::PI) / cone_half_angle).floor().max(1.0) as i64;
        let bin = 2.0 * std::f64::consts::PI / n_az as f64;
        let n_el = 2 * (std::f64::consts::FRAC_PI_2 / bin).ceil() as i64 + 1;
        let mut idx = Self {
            dirs: Vec::with_capacity(points.len()),
            ranges: Vec::with_capacity(points.len()),
            angles: Vec::with_capacity(points.len()),
            bin,
            n_az,
            n_el,
            start: vec![0; (n_az * n_el + 1) as usize],
            ids: Vec::new(),
        };
        let mut cell_of = Vec::with_capacity(points.len());
        for p in points {
            let s = SphericalPoint::from_cartesian(p);
            idx.dirs.push(if s.range > 0.0 { p / s.range } else { Point3::zeros() });
            idx.ranges.push(s.range);
            idx.angles.push((s.azimuth, s.elevation));
            let c = (s.range > 0.0).then(|| idx.key(&s));
            if let Some(c) = c {
                idx.start[c + 1] += 1;
            }
            cell_of.push(c);
        }
        for c in 1..idx.start.len() {
            idx.start[c] += idx.start[c - 1];
        }
        let mut fill = idx.start.clone();
        idx.ids = vec![0; *idx.start.last().unwrap() as usize];
        for (i, c) in cell_of.into_iter().enumerate() {
            if let Some(c) = c {
                idx.ids[fill[c] as usize] = i as u32;
                fill[c] += 1;
            }
        }
        idx
    }

    pub fn len(&self) -> usize {
        self.ranges.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ranges.is_empty()
    }

    fn key(&self, s: &SphericalPoint) -> usize {
        let a = ((s.azimuth + std::f64::consts::PI) / self.bin).floor() as i64;
        let e = (s.elevation / self.bin).floor() as i64;
        self.cell(a, e).expect("elevation within ±90°")
    }

    fn cell(&self, a: i64, e: i64) -> Option<usize> {
        let e = e + self.n_el / 2;
        (0..self.n_el).contains(&e).then(|| (a.rem_euclid(self.n_az) * self.n_el + e) as usize)
    }

    /// Visits every indexed point within the cone around the unit direction
    /// `dir` with the given azimuth and elevation.
    fn for_each_in_cone(&self, dir: &Point3, (azimuth, elevation): (f64, f64), cone: &Cone, mut f: impl FnMut(usize) -> bool) {
        let half_angle = cone.half_angle;
        let e0 = ((elevation - half_angle) / self.bin).floor() as i64;
        let e1 = ((elevation + half_angle) / self.bin).floor() as i64;
        let polar = elevation.abs() + half_angle;
        let (a0, a1) = if polar >= std::f64::consts::FRAC_PI_2 - 1e-9 {
            (0, self.n_az - 1)
        } else {
            let span = (cone.sin / polar.cos()).min(1.0).asin();
            let c = (azimuth + std::f64::consts::PI) / self.bin;
            let w = span / self.bin;
            let (lo, hi) = ((c - w).floor() as i64, (c + w).floor() as i64);
            if hi - lo + 1 >= self.n_az {
                (0, self.n_az - 1)
            } else {
                (lo, hi)
            }
        };
        for a in a0..=a1 {
            for e in e0..=e1 {
                if let Some(c) = self.cell(a, e) {
                    for &i in &self.ids[self.start[c] as usize..self.start[c + 1] as usize] {
                        if self.dirs[i as usize].dot(dir) >= cone.cos && !f(i as usize) {
                            return;
                        }
                    }
                }
            }
        }
    }

    /// `Some(true)` if every point in the cone is farther than `range`,
    /// `Some(false)` if at least one is not, `None` if the cone is empty.
    fn all_farther(&self, dir: &Point3, angles: (f64, f64), range: f64, cone: &Cone, range_threshold: f64) -> Option<bool> {
        let mut any = false;
        let mut all = true;
        self.for_each_in_cone(dir, angles, cone, |i| {
            any = true;
            if self.ranges[i] <= range + range_threshold {
                all = false;
                return false;
            }
            true
        });
        any.then_some(all)
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ChangeSet {
    /// Query points in front of everything the reference saw there.
    pub additions: Vec<usize>,
    /// Reference points in front of everything the query sees there.
    pub subtractions: Vec<usize>,
    /// Query points with an empty cone in the reference.
    pub unknown_query: usize,
    pub unknown_reference: usize,
}

/// Change detection between two scans of one sensor. `prealign` maps query
/// coordinates into the reference frame; both clouds are then examined in
/// spherical coordinates around the reference origin.
pub fn detect_changes(
    reference: &PointCloud,
    query: &PointCloud,
    prealign: &RigidTransform,
    p: &ChangeParams,
) -> ChangeSet {
    let ref_index = SphericalIndex::new(&reference.points, p.cone_half_angle);
    detect_changes_indexed(&ref_index, &query.points, prealign, p)
}

/// [`detect_changes`] with a reference index built once and reused.
pub fn detect_changes_indexed(
    reference: &SphericalIndex,
    query: &[Point3],
    prealign: &RigidTransform,
    p: &ChangeParams,
) -> ChangeSet {
    let moved: Vec<Point3> = query.iter().map(|q| prealign.transform_point(q)).collect();
    let query_index = SphericalIndex::new(&moved, p.cone_half_angle);
    let mut out = ChangeSet::default();
    let cone = Cone::new(p.cone_half_angle);
    let thr = p.range_threshold;
    for i in 0..query_index.len() {
        if query_index.ranges[i] == 0.0 {
            continue;
        }
        match reference.all_farther(&query_index.dirs[i], query_index.angles[i], query_index.ranges[i], &cone, thr) {
            Some(true) => out.additions.push(i),
            Some(false) => {}
            None => out.unknown_query += 1,
        }
    }
    for i in 0..reference.len() {
        if reference.ranges[i] == 0.0 {
            continue;
        }
        match query_index.all_farther(&reference.dirs[i], reference.angles[i], reference.ranges[i], &cone, thr) {
            Some(true) => out.subtractions.push(i),
            Some(false) => {}
            None => out.unknown_reference += 1,
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct ModelParams {
    pub cell_size: f64,
    pub attenuation: f64,
    pub insertion_weight: f64,
    pub weight_threshold: f64,
}

impl Default for ModelParams {
    fn default() -> Self {
        Self {
            cell_size: 0.5,
            attenuation: 0.98,
            insertion_weight: 0.3,
            weight_threshold: 0.5,
        }
    }
}

/// Ground-projected grid of dynamic-activity weights in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct BackgroundModel {
    pub cell_size: f64,
    pub attenuation: f64,
    pub insertion_weight: f64,
    cells: HashMap<(i64, i64), f64>,
}

impl BackgroundModel {
    pub fn new(cell_size: f64, attenuation: f64, insertion_weight: f64) -> Self {
        assert!(cell_size > 0.0 && attenuation > 0.0 && attenuation < 1.0 && insertion_weight >= 0.0);
        Self {
            cell_size,
            attenuation,
            insertion_weight,
            cells: HashMap::new(),
        }
    }

    pub fn from_params(p: &ModelParams) -> Self {
        Self::new(p.cell_size, p.attenuation, p.insertion_weight)
    }

    pub fn cell_of(&self, p: &Point3) -> (i64, i64) {
        ((p.x / self.cell_size).floor() as i64, (p.y / self.cell_size).floor() as i64)
    }

    pub fn weight(&self, p: &Point3) -> f64 {
        self.cells.get(&self.cell_of(p)).copied().unwrap_or(0.0)
    }

    pub fn cell_weight(&self, cell: (i64, i64)) -> f64 {
        self.cells.get(&cell).copied().unwrap_or(0.0)
    }

    pub fn set_cell_weight(&mut self, cell: (i64, i64), w: f64) {
        self.cells.insert(cell, w.clamp(0.0, 1.0));
    }

    pub fn cells(&self) -> impl Iterator<Item = ((i64, i64), f64)> + '_ {
        self.cells.iter().map(|(k, v)| (*k, *v))
    }

    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    /// Attenuates every cell, then adds the insertion weight once to each
    /// cell holding at least one of `dynamic_points` (clamped to 1).
    pub fn update(&mut self, dynamic_points: &[Point3]) {
        let a = self.attenuation;
        self.cells.retain(|_, w| {
            *w *= a;
            *w > 1e-12
        });
        let mut hit: Vec<(i64, i64)> = dynamic_points.iter().map(|p| self.cell_of(p)).collect();
        hit.sort_unstable();
        hit.dedup();
        for c in hit {
            let w = self.cells.entry(c).or_insert(0.0);
            *w = (*w + self.insertion_weight).min(1.0);
        }
    }

    /// Cells as `(x, y, weight)` at cell centers, sorted for stable output.
    pub fn export(&self) -> Vec<(f64, f64, f64)> {
        let mut v: Vec<_> = self
            .cells
            .iter()
            .map(|(&(i, j), &w)| ((i as f64 + 0.5) * self.cell_size, (j as f64 + 0.5) * self.cell_size, w))
            .collect();
        v.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
        v
    }
}

/// `true` for points whose model cell weight reaches `weight_threshold`.
pub fn dynamic_mask(points: &[Point3], m: &BackgroundModel, weight_threshold: f64) -> Vec<bool> {
    points.iter().map(|p| m.weight(p) >= weight_threshold).collect()
}

/// Splits `c` by model weight; `c` must be in the model's coordinates.
pub fn split_static_dynamic(c: &PointCloud, m: &BackgroundModel, weight_threshold: f64) -> (PointCloud, PointCloud) {
    let dynamic = dynamic_mask(&c.points, m, weight_threshold);
    let stat: Vec<bool> = dynamic.iter().map(|d| !d).collect();
    (c.select(&stat), c.select(&dynamic))
}
