//! Procedural street scenes: a ground plane, box buildings, trees made of
//! cylinders and spheres, street furniture, and box-shaped road users that
//! follow lane polylines.

use lidarfuse_core::geom::axis_angle_matrix;
use lidarfuse_core::{Error, Point3, Result, RigidTransform};
use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Minimum ray parameter counted as a hit.
const EPS: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Shape {
    /// Box rotated by `yaw` about the vertical axis through its center.
    Box { center: Point3, half: Vector3<f64>, yaw: f64 },
    Sphere { center: Point3, radius: f64 },
    /// Vertical capped cylinder standing on `base`.
    Cylinder { base: Point3, radius: f64, height: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Aabb {
    pub min: Point3,
    pub max: Point3,
}

impl Aabb {
    fn empty() -> Self {
        Self {
            min: Point3::repeat(f64::INFINITY),
            max: Point3::repeat(f64::NEG_INFINITY),
        }
    }

    fn grow(&mut self, o: &Aabb) {
        self.min = self.min.inf(&o.min);
        self.max = self.max.sup(&o.max);
    }

    fn center(&self) -> Point3 {
        (self.min + self.max) / 2.0
    }

    /// Entry parameter of the ray, or `None` if it misses before `t_max`.
    #[inline]
    fn hit(&self, o: &Point3, inv: &Vector3<f64>, t_max: f64) -> Option<f64> {
        let mut t0: f64 = 0.0;
        let mut t1 = t_max;
        for a in 0..3 {
            let mut tn = (self.min[a] - o[a]) * inv[a];
            let mut tf = (self.max[a] - o[a]) * inv[a];
            if tn > tf {
                std::mem::swap(&mut tn, &mut tf);
            }
            // NaN from 0·∞ leaves the bounds untouched.
            if tn > t0 {
                t0 = tn;
            }
            if tf < t1 {
                t1 = tf;
            }
            if t0 > t1 {
                return None;
            }
        }
        Some(t0)
    }
}

impl Shape {
    pub fn aabb(&self) -> Aabb {
        match *self {
            Shape::Box { center, half, yaw } => {
                let (s, c) = yaw.sin_cos();
                let ex = (c * half.x).abs() + (s * half.y).abs();
                let ey = (s * half.x).abs() + (c * half.y).abs();
                let e = Vector3::new(ex, ey, half.z);
                Aabb {
                    min: center - e,
                    max: center + e,
                }
            }
            Shape::Sphere { center, radius } => Aabb {
                min: center.add_scalar(-radius),
                max: center.add_scalar(radius),
            },
            Shape::Cylinder { base, radius, height } => Aabb {
                min: base - Vector3::new(radius, radius, 0.0),
                max: base + Vector3::new(radius, radius, height),
            },
        }
    }

    /// Nearest positive ray parameter for a unit (or any) direction.
    pub fn intersect(&self, o: &Point3, d: &Vector3<f64>) -> Option<f64> {
        match *self {
            Shape::Box { center, half, yaw } => {
                let (s, c) = yaw.sin_cos();
                let rel = o - center;
                let lo = Vector3::new(c * rel.x + s * rel.y, -s * rel.x + c * rel.y, rel.z);
                let ld = Vector3::new(c * d.x + s * d.y, -s * d.x + c * d.y, d.z);
                let mut t0 = f64::NEG_INFINITY;
                let mut t1 = f64::INFINITY;
                for a in 0..3 {
                    if ld[a] == 0.0 {
                        if lo[a].abs() > half[a] {
                            return None;
                        }
                        continue;
                    }
                    let mut tn = (-half[a] - lo[a]) / ld[a];
                    let mut tf = (half[a] - lo[a]) / ld[a];
                    if tn > tf {
                        std::mem::swap(&mut tn, &mut tf);
                    }
                    t0 = t0.max(tn);
                    t1 = t1.min(tf);
                    if t0 > t1 {
                        return None;
                    }
                }
                if t0 > EPS {
                    Some(t0)
                } else if t1 > EPS {
                    Some(t1)
                } else {
                    None
                }
            }
            Shape::Sphere { center, radius } => {
                let oc = o - center;
                let a = d.norm_squared();
                let b = oc.dot(d);
                let c = oc.norm_squared() - radius * radius;
                let disc = b * b - a * c;
                if disc < 0.0 {
                    return None;
                }
                let sq = disc.sqrt();
                let t = (-b - sq) / a;
                if t > EPS {
                    return Some(t);
                }
                let t = (-b + sq) / a;
                (t > EPS).then_some(t)
            }
            Shape::Cylinder { base, radius, height } => {
                let mut best = f64::INFINITY;
                let (ox, oy) = (o.x - base.x, o.y - base.y);
                let a = d.x * d.x + d.y * d.y;
                if a > 0.0 {
                    let b = ox * d.x + oy * d.y;
                    let c = ox * ox + oy * oy - radius * radius;
                    let disc = b * b - a * c;
                    if disc >= 0.0 {
                        let sq = disc.sqrt();
                        for t in [(-b - sq) / a, (-b + sq) / a] {
                            let z = o.z + t * d.z - base.z;
                            if t > EPS && (0.0..=height).contains(&z) && t < best {
                                best = t;
                            }
                        }
                    }
                }
                if d.z != 0.0 {
                    for zc in [base.z, base.z + height] {
                        let t = (zc - o.z) / d.z;
                        let (x, y) = (ox + t * d.x, oy + t * d.y);
                        if t > EPS && x * x + y * y <= radius * radius && t < best {
                            best = t;
                        }
                    }
                }
                best.is_finite().then_some(best)
            }
        }
    }
}

#[derive(Debug, Clone)]
enum NodeKind {
    Leaf { start: u32, count: u32 },
    Inner { left: u32, right: u32 },
}

#[derive(Debug, Clone)]
struct Node {
    bounds: Aabb,
    kind: NodeKind,
}

/// Bounding volume hierarchy over shapes, median split on the longest
/// centroid axis.
#[derive(Debug, Clone)]
pub struct Bvh {
    shapes: Vec<Shape>,
    nodes: Vec<Node>,
}

const LEAF_SIZE: usize = 4;

impl Bvh {
    pub fn build(mut shapes: Vec<Shape>) -> Self {
        let mut nodes = Vec::new();
        if !shapes.is_empty() {
            let n = shapes.len();
            build_node(&mut shapes, 0, n, &mut nodes);
        }
        Self { shapes, nodes }
    }

    pub fn shapes(&self) -> &[Shape] {
        &self.shapes
    }

    /// Nearest hit closer than `t_max`.
    pub fn raycast(&self, o: &Point3, d: &Vector3<f64>, t_max: f64) -> Option<f64> {
        if self.nodes.is_empty() {
            return None;
        }
        let inv = d.map(|v| 1.0 / v);
        let mut best = t_max;
        let mut stack = [0u32; 64];
        let mut sp = 1;
        while sp > 0 {
            sp -= 1;
            let node = &self.nodes[stack[sp] as usize];
            match node.bounds.hit(o, &inv, best) {
                Some(t) if t < best => {}
                _ => continue,
            }
            match node.kind {
                NodeKind::Leaf { start, count } => {
                    for s in &self.shapes[start as usize..(start + count) as usize] {
                        if let Some(t) = s.intersect(o, d) {
                            if t < best {
                                best = t;
                            }
                        }
                    }
                }
                NodeKind::Inner { left, right } => {
                    let tl = self.nodes[left as usize].bounds.hit(o, &inv, best);
                    let tr = self.nodes[right as usize].bounds.hit(o, &inv, best);
                    // Push the farther child first so the nearer one is popped next.
                    match (tl, tr) {
                        (Some(a), Some(b)) => {
                            let (near, far) = if a <= b { (left, right) } else { (right, left) };
                            stack[sp] = far;
                            stack[sp + 1] = near;
                            sp += 2;
                        }
                        (Some(_), None) => {
                            stack[sp] = left;
                            sp += 1;
                        }
                        (None, Some(_)) => {
                            stack[sp] = right;
                            sp += 1;
                        }
                        (None, None) => {}
                    }
                }
            }
        }
        (best < t_max).then_some(best)
    }
}

fn build_node(shapes: &mut [Shape], start: usize, end: usize, nodes: &mut Vec<Node>) -> u32 {
    let mut bounds = Aabb::empty();
    let mut cb = Aabb::empty();
    for s in &shapes[start..end] {
        let b = s.aabb();
        bounds.grow(&b);
        let c = b.center();
        cb.grow(&Aabb { min: c, max: c });
    }
    let id = nodes.len() as u32;
    nodes.push(Node {
        bounds,
        kind: NodeKind::Leaf {
            start: start as u32,
            count: (end - start) as u32,
        },
    });
    if end - start <= LEAF_SIZE {
        return id;
    }
    let ext = cb.max - cb.min;
    let axis = if ext.x >= ext.y && ext.x >= ext.z {
        0
    } else if ext.y >= ext.z {
        1
    } else {
        2
    };
    let mid = (start + end) / 2;
    shapes[start..end].select_nth_unstable_by(mid - start, |a, b| {
        a.aabb().center()[axis].total_cmp(&b.aabb().center()[axis])
    });
    let left = build_node(shapes, start, mid, nodes);
    let right = build_node(shapes, mid, end, nodes);
    nodes[id as usize].kind = NodeKind::Inner { left, right };
    id
}

// ------------------------------------------------------------------ actors

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ActorClass {
    Car,
    Truck,
    Motorcycle,
    Bicycle,
    Pedestrian,
}

impl ActorClass {
    /// Length, width, height in meters.
    pub fn size(self) -> Vector3<f64> {
        match self {
            ActorClass::Car => Vector3::new(4.5, 1.8, 1.5),
            ActorClass::Truck => Vector3::new(10.0, 2.5, 3.6),
            ActorClass::Motorcycle => Vector3::new(2.2, 0.8, 1.4),
            ActorClass::Bicycle => Vector3::new(1.8, 0.6, 1.7),
            ActorClass::Pedestrian => Vector3::new(0.5, 0.5, 1.8),
        }
    }

    /// Typical speed range in m/s.
    pub fn speed_range(self) -> (f64, f64) {
        match self {
            ActorClass::Car => (9.0, 14.0),
            ActorClass::Truck => (7.0, 11.0),
            ActorClass::Motorcycle => (10.0, 15.0),
            ActorClass::Bicycle => (3.5, 6.0),
            ActorClass::Pedestrian => (1.0, 1.6),
        }
    }

    fn lane_kind(self) -> LaneKind {
        match self {
            ActorClass::Car | ActorClass::Truck | ActorClass::Motorcycle => LaneKind::Road,
            ActorClass::Bicycle => LaneKind::Bike,
            ActorClass::Pedestrian => LaneKind::Sidewalk,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LaneKind {
    Road,
    Bike,
    Sidewalk,
}

/// Open polyline on the ground with cumulative arc length.
#[derive(Debug, Clone, PartialEq)]
pub struct Polyline {
    pub points: Vec<Point3>,
    cumulative: Vec<f64>,
}

impl Polyline {
    pub fn new(points: Vec<Point3>) -> Self {
        assert!(points.len() >= 2);
        let mut cumulative = vec![0.0];
        for w in points.windows(2) {
            cumulative.push(cumulative.last().unwrap() + (w[1] - w[0]).norm());
        }
        Self { points, cumulative }
    }

    pub fn length(&self) -> f64 {
        *self.cumulative.last().unwrap()
    }

    /// Position and heading at arc length `s`, clamped to the ends.
    pub fn at(&self, s: f64) -> (Point3, f64) {
        let s = s.clamp(0.0, self.length());
        let k = match self.cumulative.binary_search_by(|c| c.total_cmp(&s)) {
            Ok(i) => i.min(self.points.len() - 2),
            Err(i) => i.saturating_sub(1).min(self.points.len() - 2),
        };
        let (a, b) = (self.points[k], self.points[k + 1]);
        let seg = self.cumulative[k + 1] - self.cumulative[k];
        let u = if seg > 0.0 { (s - self.cumulative[k]) / seg } else { 0.0 };
        let d = b - a;
        (a + d * u, d.y.atan2(d.x))
    }

    /// Parallel curve at lateral `offset` (positive to the left).
    pub fn offset(&self, offset: f64) -> Polyline {
        let n = self.points.len();
        let pts = (0..n)
            .map(|i| {
                let d = if i == 0 {
                    self.points[1] - self.points[0]
                } else if i == n - 1 {
                    self.points[n - 1] - self.points[n - 2]
                } else {
                    (self.points[i + 1] - self.points[i]).normalize() + (self.points[i] - self.points[i - 1]).normalize()
                };
                let left = Vector3::new(-d.y, d.x, 0.0).normalize();
                self.points[i] + left * offset
            })
            .collect();
        Polyline::new(pts)
    }

    pub fn reversed(&self) -> Polyline {
        Polyline::new(self.points.iter().rev().copied().collect())
    }

    /// Horizontal distance from `p` to the polyline.
    pub fn distance_xy(&self, p: &Point3) -> f64 {
        let c = self.closest_xy(p);
        (c - Point3::new(p.x, p.y, 0.0)).norm()
    }

    /// Closest point of the polyline to `p` in the ground plane.
    pub fn closest_xy(&self, p: &Point3) -> Point3 {
        let q = Vector3::new(p.x, p.y, 0.0);
        self.points
            .windows(2)
            .map(|w| {
                let (a, b) = (Vector3::new(w[0].x, w[0].y, 0.0), Vector3::new(w[1].x, w[1].y, 0.0));
                let ab = b - a;
                let u = ((q - a).dot(&ab) / ab.norm_squared().max(1e-300)).clamp(0.0, 1.0);
                a + ab * u
            })
            .min_by(|x, y| (x - q).norm_squared().total_cmp(&(y - q).norm_squared()))
            .unwrap()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Lane {
    pub kind: LaneKind,
    pub path: Polyline,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Actor {
    pub class: ActorClass,
    pub lane: usize,
    /// Arc length at t = 0.
    pub start: f64,
    pub speed: f64,
}

impl Actor {
    /// Bounding box at time `t`. Actors wrap around to the start of their
    /// lane once they reach its end.
    pub fn shape_at(&self, lanes: &[Lane], t: f64) -> Shape {
        let path = &lanes[self.lane].path;
        let s = (self.start + self.speed * t).rem_euclid(path.length());
        let (p, yaw) = path.at(s);
        let size = self.class.size();
        Shape::Box {
            center: Point3::new(p.x, p.y, size.z / 2.0),
            half: size / 2.0,
            yaw,
        }
    }
}

// ------------------------------------------------------------------- scene

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Layout {
    Curve,
    Straight,
    Intersection,
    Custom,
}

impl std::str::FromStr for Layout {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "curve" => Ok(Layout::Curve),
            "straight" => Ok(Layout::Straight),
            "intersection" => Ok(Layout::Intersection),
            "custom" => Ok(Layout::Custom),
            _ => Err(Error::InvalidParameter(format!("unknown layout {s:?}"))),
        }
    }
}

/// Number of road users of each class.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrafficConfig {
    pub cars: usize,
    pub trucks: usize,
    pub motorcycles: usize,
    pub bicycles: usize,
    pub pedestrians: usize,
}

impl TrafficConfig {
    pub fn moderate() -> Self {
        Self {
            cars: 12,
            trucks: 2,
            motorcycles: 2,
            bicycles: 3,
            pedestrians: 8,
        }
    }

    pub fn heavy() -> Self {
        Self {
            cars: 40,
            trucks: 8,
            motorcycles: 6,
            bicycles: 8,
            pedestrians: 20,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Scene {
    /// Half side length of the square ground patch centered at the origin.
    pub ground_half: f64,
    pub statics: Bvh,
    pub lanes: Vec<Lane>,
    pub actors: Vec<Actor>,
}

/// Three 3.5 m lanes per direction.
pub const ROAD_HALF_WIDTH: f64 = 10.5;
const BIKE_OFFSET: f64 = 12.0;
const SIDEWALK_OFFSET: f64 = 14.0;
/// Lateral distance of the poles from the road centerline.
const POLE_OFFSET: f64 = 16.0;

impl Scene {
    /// Nearest hit of the static scene (ground included) and `dynamic`.
    pub fn raycast(&self, o: &Point3, d: &Vector3<f64>, dynamic: &[(Aabb, Shape)], t_max: f64) -> Option<f64> {
        let mut best = t_max;
        if d.z < 0.0 {
            let t = -o.z / d.z;
            let p = o + d * t;
            if t > EPS && t < best && p.x.abs() <= self.ground_half && p.y.abs() <= self.ground_half {
                best = t;
            }
        }
        if let Some(t) = self.statics.raycast(o, d, best) {
            best = t;
        }
        if !dynamic.is_empty() {
            let inv = d.map(|v| 1.0 / v);
            for (b, s) in dynamic {
                if b.hit(o, &inv, best).is_some() {
                    if let Some(t) = s.intersect(o, d) {
                        if t < best {
                            best = t;
                        }
                    }
                }
            }
        }
        (best < t_max).then_some(best)
    }

    /// Same as [`Scene::raycast`] without the hierarchy, for checking it.
    pub fn raycast_brute_force(&self, o: &Point3, d: &Vector3<f64>, dynamic: &[Shape], t_max: f64) -> Option<f64> {
        let mut best = t_max;
        if d.z < 0.0 {
            let t = -o.z / d.z;
            let p = o + d * t;
            if t > EPS && p.x.abs() <= self.ground_half && p.y.abs() <= self.ground_half {
                best = best.min(t);
            }
        }
        for s in self.statics.shapes().iter().chain(dynamic) {
            if let Some(t) = s.intersect(o, d) {
                best = best.min(t);
            }
        }
        (best < t_max).then_some(best)
    }

    pub fn actor_shapes(&self, t: f64) -> Vec<(Aabb, Shape)> {
        self.actors
            .iter()
            .map(|a| {
                let s = a.shape_at(&self.lanes, t);
                (s.aabb(), s)
            })
            .collect()
    }
}

/// Road centerlines of a layout.
pub fn road_centerlines(layout: Layout) -> Vec<Polyline> {
    match layout {
        Layout::Straight | Layout::Custom => vec![Polyline::new(vec![Point3::new(-200.0, 0.0, 0.0), Point3::new(200.0, 0.0, 0.0)])],
        Layout::Intersection => vec![
            Polyline::new(vec![Point3::new(-200.0, 0.0, 0.0), Point3::new(200.0, 0.0, 0.0)]),
            Polyline::new(vec![Point3::new(0.0, -200.0, 0.0), Point3::new(0.0, 200.0, 0.0)]),
        ],
        Layout::Curve => {
            // Quarter-and-a-bit arc of radius 80 m around (0, -80), extended
            // by straight tangents.
            let r = 80.0;
            let c = Point3::new(0.0, -r, 0.0);
            let a0 = std::f64::consts::FRAC_PI_2 + 1.0;
            let a1 = std::f64::consts::FRAC_PI_2 - 1.0;
            let mut pts = Vec::new();
            let start = c + Vector3::new(a0.cos(), a0.sin(), 0.0) * r;
            let t0 = Vector3::new(a0.sin(), -a0.cos(), 0.0);
            pts.push(start - t0 * 100.0);
            for k in 0..=40 {
                let a = a0 + (a1 - a0) * k as f64 / 40.0;
                pts.push(c + Vector3::new(a.cos(), a.sin(), 0.0) * r);
            }
            let end = *pts.last().unwrap();
            let t1 = Vector3::new(a1.sin(), -a1.cos(), 0.0);
            pts.push(end + t1 * 100.0);
            vec![Polyline::new(pts)]
        }
    }
}

/// Nominal (x, y) of the sensor poles.
pub fn sensor_sites(layout: Layout, n: usize) -> Vec<(f64, f64)> {
    let sites: Vec<(f64, f64)> = match layout {
        // Zigzag along both sides of the road.
        Layout::Straight | Layout::Custom => vec![
            (-45.0, POLE_OFFSET),
            (-15.0, -POLE_OFFSET),
            (15.0, POLE_OFFSET),
            (45.0, -POLE_OFFSET),
        ],
        Layout::Intersection => {
            let c = POLE_OFFSET + 1.0;
            vec![(c, c), (-c, c), (-c, -c), (c, -c)]
        }
        // Two poles on each side of the curve.
        Layout::Curve => [(0.45f64, 1.0), (0.15, -1.0), (-0.15, 1.0), (-0.45, -1.0)]
            .iter()
            .map(|&(da, side)| {
                let r = 80.0 + side * POLE_OFFSET;
                let a = std::f64::consts::FRAC_PI_2 + da;
                (r * a.cos(), -80.0 + r * a.sin())
            })
            .collect(),
    };
    sites.into_iter().take(n).collect()
}

/// Deterministic scene for a layout and seed. No static geometry is placed
/// within 5 m (horizontally) of the `sites` where sensor poles stand.
pub fn generate_scene(layout: Layout, traffic: &TrafficConfig, seed: u64, sites: &[(f64, f64)]) -> Scene {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let roads = road_centerlines(layout);
    let clear = |p: &Point3, margin: f64| {
        roads.iter().all(|r| r.distance_xy(p) > margin) && sites.iter().all(|s| (p.x - s.0).hypot(p.y - s.1) > 5.0)
    };

    let mut lanes = Vec::new();
    for road in &roads {
        for (off, kind) in [
            (1.75, LaneKind::Road),
            (5.25, LaneKind::Road),
            (8.75, LaneKind::Road),
            (BIKE_OFFSET, LaneKind::Bike),
            (SIDEWALK_OFFSET, LaneKind::Sidewalk),
        ] {
            // Right-hand traffic: forward lanes on the right.
            lanes.push(Lane {
                kind,
                path: road.offset(-off),
            });
            lanes.push(Lane {
                kind,
                path: road.offset(off).reversed(),
            });
        }
    }

    let mut shapes = Vec::new();
    for road in &roads {
        let len = road.length();
        for side in [-1.0, 1.0] {
            // Building blocks.
            let mut s = rng.gen_range(0.0..10.0);
            while s < len {
                let w = rng.gen_range(10.0..28.0);
                let depth = rng.gen_range(8.0..18.0);
                let h = rng.gen_range(5.0..24.0);
                let setback = rng.gen_range(22.0..29.0);
                let (p, yaw) = road.at(s + w / 2.0);
                let normal = Vector3::new(-yaw.sin(), yaw.cos(), 0.0) * side;
                let center = p + normal * (setback + depth / 2.0);
                let jitter = rng.gen_range(-0.15..0.15);
                let b = Shape::Box {
                    center: Point3::new(center.x, center.y, h / 2.0),
                    half: Vector3::new(w / 2.0, depth / 2.0, h / 2.0),
                    yaw: yaw + jitter,
                };
                let bb = b.aabb();
                let corners_clear = [bb.min, bb.max, Point3::new(bb.min.x, bb.max.y, 0.0), Point3::new(bb.max.x, bb.min.y, 0.0)]
                    .iter()
                    .all(|c| clear(c, 19.0))
                    && clear(&center, setback - 1.0);
                if corners_clear {
                    shapes.push(b);
                    // Occasional annex or roof structure.
                    if rng.gen_bool(0.4) {
                        let ah = rng.gen_range(1.5..4.0);
                        shapes.push(Shape::Box {
                            center: Point3::new(center.x, center.y, h + ah / 2.0),
                            half: Vector3::new(w / 5.0, depth / 5.0, ah / 2.0),
                            yaw: yaw + jitter + rng.gen_range(-0.5..0.5),
                        });
                    }
                }
                s += w + rng.gen_range(3.0..12.0);
            }
            // Trees, poles, kiosks and parked vehicles between curb and buildings.
            let mut s = rng.gen_range(0.0..6.0);
            while s < len {
                let (p, yaw) = road.at(s);
                let normal = Vector3::new(-yaw.sin(), yaw.cos(), 0.0) * side;
                let kind = rng.gen_range(0..10);
                let off = rng.gen_range(15.5..21.0);
                let base = p + normal * off;
                if clear(&base, 15.0) {
                    match kind {
                        0..=4 => {
                            let trunk = rng.gen_range(2.5..4.0);
                            let crown = rng.gen_range(1.2..2.6);
                            shapes.push(Shape::Cylinder {
                                base: Point3::new(base.x, base.y, 0.0),
                                radius: rng.gen_range(0.15..0.3),
                                height: trunk,
                            });
                            shapes.push(Shape::Sphere {
                                center: Point3::new(base.x, base.y, trunk + crown * 0.8),
                                radius: crown,
                            });
                            if rng.gen_bool(0.5) {
                                let d = Vector3::new(rng.gen_range(-0.8..0.8), rng.gen_range(-0.8..0.8), 0.0);
                                shapes.push(Shape::Sphere {
                                    center: Point3::new(base.x + d.x, base.y + d.y, trunk + crown * 1.4),
                                    radius: crown * 0.7,
                                });
                            }
                        }
                        5..=6 => shapes.push(Shape::Cylinder {
                            base: Point3::new(base.x, base.y, 0.0),
                            radius: rng.gen_range(0.08..0.18),
                            height: rng.gen_range(3.0..7.0),
                        }),
                        7 => {
                            let h = rng.gen_range(0.6..1.2);
                            shapes.push(Shape::Sphere {
                                center: Point3::new(base.x, base.y, h * 0.5),
                                radius: h,
                            });
                        }
                        _ => {
                            let size = if rng.gen_bool(0.5) {
                                Vector3::new(4.4, 1.8, 1.5)
                            } else {
                                Vector3::new(rng.gen_range(1.5..4.0), rng.gen_range(1.5..3.0), rng.gen_range(1.0..3.0))
                            };
                            shapes.push(Shape::Box {
                                center: Point3::new(base.x, base.y, size.z / 2.0),
                                half: size / 2.0,
                                yaw: yaw + rng.gen_range(-0.3..0.3),
                            });
                        }
                    }
                }
                s += rng.gen_range(4.0..11.0);
            }
        }
    }
    // Intersection corners get extra clutter so no view is purely planar.
    if layout == Layout::Intersection {
        for (x, y) in [(1.0, 1.0), (-1.0, 1.0), (-1.0, -1.0), (1.0, -1.0)] {
            shapes.push(Shape::Box {
                center: Point3::new(x * 29.0, y * 29.0, 1.0),
                half: Vector3::new(1.5, 1.5, 1.0),
                yaw: 0.4,
            });
        }
    }

    let mut actors = Vec::new();
    let mut add = |class: ActorClass, count: usize, rng: &mut ChaCha8Rng| {
        let candidates: Vec<usize> = (0..lanes.len()).filter(|&i| lanes[i].kind == class.lane_kind()).collect();
        for _ in 0..count {
            let lane = candidates[rng.gen_range(0..candidates.len())];
            let (lo, hi) = class.speed_range();
            actors.push(Actor {
                class,
                lane,
                start: rng.gen_range(0.0..lanes[lane].path.length()),
                speed: rng.gen_range(lo..hi),
            });
        }
    };
    add(ActorClass::Car, traffic.cars, &mut rng);
    add(ActorClass::Truck, traffic.trucks, &mut rng);
    add(ActorClass::Motorcycle, traffic.motorcycles, &mut rng);
    add(ActorClass::Bicycle, traffic.bicycles, &mut rng);
    add(ActorClass::Pedestrian, traffic.pedestrians, &mut rng);

    Scene {
        ground_half: 250.0,
        statics: Bvh::build(shapes),
        lanes,
        actors,
    }
}

/// Mounting pose of a pole-top sensor: yaw about z, then pitched down by
/// `tilt` (x forward, y left, z up).
pub fn mount_pose(x: f64, y: f64, height: f64, yaw: f64, tilt: f64) -> RigidTransform {
    let r = axis_angle_matrix(&Vector3::z(), yaw) * axis_angle_matrix(&Vector3::y(), tilt);
    RigidTransform::new(r, Point3::new(x, y, height))
}

/// Along a road the sensors look straight across it; at the intersection
/// and for custom sites they look towards the centroid of all sites.
pub fn default_mounts(layout: Layout, sites: &[(f64, f64)], height: f64, tilt: f64) -> Vec<RigidTransform> {
    let n = sites.len().max(1) as f64;
    let cx = sites.iter().map(|s| s.0).sum::<f64>() / n;
    let cy = sites.iter().map(|s| s.1).sum::<f64>() / n;
    let roads = road_centerlines(layout);
    sites
        .iter()
        .map(|&(x, y)| {
            let yaw = match layout {
                Layout::Straight | Layout::Curve => {
                    let q = roads[0].closest_xy(&Point3::new(x, y, 0.0));
                    (q.y - y).atan2(q.x - x)
                }
                Layout::Intersection | Layout::Custom => (cy - y).atan2(cx - x),
            };
            mount_pose(x, y, height, yaw, tilt)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn polyline_arc_length() {
        let p = Polyline::new(vec![Point3::zeros(), Point3::new(3.0, 0.0, 0.0), Point3::new(3.0, 4.0, 0.0)]);
        assert_eq!(p.length(), 7.0);
        let (q, yaw) = p.at(5.0);
        assert!((q - Point3::new(3.0, 2.0, 0.0)).norm() < 1e-12);
        assert!((yaw - std::f64::consts::FRAC_PI_2).abs() < 1e-12);
    }

    #[test]
    fn sensor_sites_are_off_road() {
        for layout in [Layout::Straight, Layout::Curve, Layout::Intersection] {
            for (x, y) in sensor_sites(layout, 4) {
                let p = Point3::new(x, y, 0.0);
                assert!(road_centerlines(layout).iter().all(|r| r.distance_xy(&p) > ROAD_HALF_WIDTH));
            }
        }
    }

    #[test]
    fn curve_has_two_poles_per_side_looking_across() {
        let sites = sensor_sites(Layout::Curve, 4);
        let outer = sites.iter().filter(|s| s.0.hypot(s.1 + 80.0) > 80.0).count();
        assert_eq!(outer, 2);
        let road = &road_centerlines(Layout::Curve)[0];
        for m in default_mounts(Layout::Curve, &sites, 6.0, 0.3) {
            let q = road.closest_xy(&m.translation);
            let to_road = Vector3::new(q.x - m.translation.x, q.y - m.translation.y, 0.0).normalize();
            let f = m.rotation.column(0);
            let heading = Vector3::new(f.x, f.y, 0.0).normalize();
            assert!(heading.dot(&to_road) > 1.0 - 1e-9);
        }
    }
}
