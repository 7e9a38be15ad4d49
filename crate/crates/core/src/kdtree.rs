//! Static 3-D k-d tree for nearest-neighbor, k-NN and radius queries.
//!
//! Points are copied into leaf order so leaf scans are contiguous. Returned
//! indices refer to the slice the tree was built from.

use crate::geom::Point3;

const LEAF_SIZE: usize = 12;
const NONE: u32 = u32::MAX;

#[derive(Debug, Clone)]
struct Node {
    start: u32,
    end: u32,
    dim: u8,
    split: f64,
    left: u32,
    right: u32,
}

#[derive(Debug, Clone)]
pub struct KdTree {
    nodes: Vec<Node>,
    points: Vec<[f64; 3]>,
    index: Vec<u32>,
}

/// A neighbor: original point index and squared distance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Neighbor {
    pub index: usize,
    pub dist2: f64,
}

impl KdTree {
    pub fn build(points: &[Point3]) -> Self {
        assert!(points.len() < u32::MAX as usize);
        let mut index: Vec<u32> = (0..points.len() as u32).collect();
        let mut nodes = Vec::with_capacity(2 * points.len() / LEAF_SIZE + 1);
        if !points.is_empty() {
            build_node(points, &mut index, 0, points.len(), &mut nodes);
        }
        let pts = index
            .iter()
            .map(|&i| {
                let p = points[i as usize];
                [p.x, p.y, p.z]
            })
            .collect();
        Self {
            nodes,
            points: pts,
            index,
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Nearest point with squared distance `<= max_dist2`.
    pub fn nearest_within(&self, q: &Point3, max_dist2: f64) -> Option<Neighbor> {
        if self.nodes.is_empty() {
            return None;
        }
        let q = [q.x, q.y, q.z];
        let mut best = (max_dist2, NONE);
        self.nearest_rec(0, &q, &mut best);
        (best.1 != NONE).then(|| Neighbor {
            index: self.index[best.1 as usize] as usize,
            dist2: best.0,
        })
    }

    pub fn nearest(&self, q: &Point3) -> Option<Neighbor> {
        self.nearest_within(q, f64::INFINITY)
    }

    fn nearest_rec(&self, node: usize, q: &[f64; 3], best: &mut (f64, u32)) {
        let n = &self.nodes[node];
        if n.left == NONE {
            for slot in n.start..n.end {
                let p = &self.points[slot as usize];
                let d = dist2(p, q);
                if d <= best.0 && (best.1 == NONE || d < best.0 || slot < best.1) {
                    *best = (d, slot);
                }
            }
            return;
        }
        let diff = q[n.dim as usize] - n.split;
        let (near, far) = if diff < 0.0 {
            (n.left, n.right)
        } else {
            (n.right, n.left)
        };
        self.nearest_rec(near as usize, q, best);
        if diff * diff <= best.0 {
            self.nearest_rec(far as usize, q, best);
        }
    }

    /// Up to `k` nearest neighbors sorted by distance.
    pub fn knn(&self, q: &Point3, k: usize) -> Vec<Neighbor> {
        let mut out = Vec::with_capacity(k + 1);
        self.knn_into(q, k, &mut out);
        out
    }

    /// Like [`knn`](Self::knn) but reuses the output buffer.
    pub fn knn_into(&self, q: &Point3, k: usize, out: &mut Vec<Neighbor>) {
        out.clear();
        if self.nodes.is_empty() || k == 0 {
            return;
        }
        let q = [q.x, q.y, q.z];
        self.knn_rec(0, &q, k, out);
        for n in out.iter_mut() {
            n.index = self.index[n.index] as usize;
        }
    }

    fn knn_rec(&self, node: usize, q: &[f64; 3], k: usize, out: &mut Vec<Neighbor>) {
        let n = &self.nodes[node];
        if n.left == NONE {
            for slot in n.start..n.end {
                let d = dist2(&self.points[slot as usize], q);
                if out.len() < k || d < out[out.len() - 1].dist2 {
                    let pos = out.partition_point(|x| x.dist2 <= d);
                    out.insert(
                        pos,
                        Neighbor {
                            index: slot as usize,
                            dist2: d,
                        },
                    );
                    if out.len() > k {
                        out.pop();
                    }
                }
            }
            return;
        }
        let diff = q[n.dim as usize] - n.split;
        let (near, far) = if diff < 0.0 {
            (n.left, n.right)
        } else {
            (n.right, n.left)
        };
        self.knn_rec(near as usize, q, k, out);
        if out.len() < k || diff * diff <= out[out.len() - 1].dist2 {
            self.knn_rec(far as usize, q, k, out);
        }
    }

    /// All points within `radius`, sorted by distance.
    pub fn radius(&self, q: &Point3, radius: f64) -> Vec<Neighbor> {
        let mut out = Vec::new();
        self.radius_into(q, radius, &mut out);
        out
    }

    pub fn radius_into(&self, q: &Point3, radius: f64, out: &mut Vec<Neighbor>) {
        out.clear();
        if self.nodes.is_empty() {
            return;
        }
        let q = [q.x, q.y, q.z];
        self.radius_rec(0, &q, radius * radius, out);
        for n in out.iter_mut() {
            n.index = self.index[n.index] as usize;
        }
        out.sort_by(|a, b| a.dist2.total_cmp(&b.dist2).then(a.index.cmp(&b.index)));
    }

    fn radius_rec(&self, node: usize, q: &[f64; 3], r2: f64, out: &mut Vec<Neighbor>) {
        let n = &self.nodes[node];
        if n.left == NONE {
            for slot in n.start..n.end {
                let d = dist2(&self.points[slot as usize], q);
                if d <= r2 {
                    out.push(Neighbor {
                        index: slot as usize,
                        dist2: d,
                    });
                }
            }
            return;
        }
        let diff = q[n.dim as usize] - n.split;
        let (near, far) = if diff < 0.0 {
            (n.left, n.right)
        } else {
            (n.right, n.left)
        };
        self.radius_rec(near as usize, q, r2, out);
        if diff * diff <= r2 {
            self.radius_rec(far as usize, q, r2, out);
        }
    }

    /// Number of points within `radius` (no allocation).
    pub fn count_within(&self, q: &Point3, radius: f64) -> usize {
        if self.nodes.is_empty() {
            return 0;
        }
        let q = [q.x, q.y, q.z];
        let mut count = 0;
        self.count_rec(0, &q, radius * radius, &mut count);
        count
    }

    fn count_rec(&self, node: usize, q: &[f64; 3], r2: f64, count: &mut usize) {
        let n = &self.nodes[node];
        if n.left == NONE {
            *count += (n.start..n.end)
                .filter(|&s| dist2(&self.points[s as usize], q) <= r2)
                .count();
            return;
        }
        let diff = q[n.dim as usize] - n.split;
        let (near, far) = if diff < 0.0 {
            (n.left, n.right)
        } else {
            (n.right, n.left)
        };
        self.count_rec(near as usize, q, r2, count);
        if diff * diff <= r2 {
            self.count_rec(far as usize, q, r2, count);
        }
    }
}

#[inline]
fn dist2(p: &[f64; 3], q: &[f64; 3]) -> f64 {
    let dx = p[0] - q[0];
    let dy = p[1] - q[1];
    let dz = p[2] - q[2];
    dx * dx + dy * dy + dz * dz
}

fn build_node(
    points: &[Point3],
    index: &mut [u32],
    start: usize,
    end: usize,
    nodes: &mut Vec<Node>,
) -> u32 {
    let id = nodes.len() as u32;
    nodes.push(Node {
        start: start as u32,
        end: end as u32,
        dim: 0,
        split: 0.0,
        left: NONE,
        right: NONE,
    });
    if end - start <= LEAF_SIZE {
        return id;
    }
    // Split along the axis of largest spread.
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for &i in &index[start..end] {
        let p = &points[i as usize];
        for d in 0..3 {
            lo[d] = lo[d].min(p[d]);
            hi[d] = hi[d].max(p[d]);
        }
    }
    let dim = (0..3)
        .max_by(|&a, &b| (hi[a] - lo[a]).total_cmp(&(hi[b] - lo[b])))
        .unwrap();
    if hi[dim] - lo[dim] <= 0.0 {
        // All points coincide.
        return id;
    }
    let mid = (start + end) / 2;
    let slice = &mut index[start..end];
    slice.select_nth_unstable_by(mid - start, |&a, &b| {
        points[a as usize][dim]
            .total_cmp(&points[b as usize][dim])
            .then(a.cmp(&b))
    });
    let split = points[index[mid] as usize][dim];
    let left = build_node(points, index, start, mid, nodes);
    let right = build_node(points, index, mid, end, nodes);
    let n = &mut nodes[id as usize];
    n.dim = dim as u8;
    n.split = split;
    n.left = left;
    n.right = right;
    id
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cloud(n: usize, seed: u64) -> Vec<Point3> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| Point3::new(rng.gen_range(-10.0..10.0), rng.gen_range(-10.0..10.0), rng.gen_range(-2.0..2.0)))
            .collect()
    }

    fn brute_knn(pts: &[Point3], q: &Point3, k: usize) -> Vec<(usize, f64)> {
        let mut d: Vec<(usize, f64)> = pts.iter().enumerate().map(|(i, p)| (i, (p - q).norm_squared())).collect();
        d.sort_by(|a, b| a.1.total_cmp(&b.1));
        d.truncate(k);
        d
    }

    #[test]
    fn matches_brute_force() {
        let pts = cloud(2000, 1);
        let tree = KdTree::build(&pts);
        let queries = cloud(200, 2);
        for q in &queries {
            let nn = tree.nearest(q).unwrap();
            let bf = brute_knn(&pts, q, 1)[0];
            assert!((nn.dist2 - bf.1).abs() < 1e-12);

            let knn = tree.knn(q, 10);
            let bf = brute_knn(&pts, q, 10);
            assert_eq!(knn.len(), 10);
            for (a, b) in knn.iter().zip(&bf) {
                assert!((a.dist2 - b.1).abs() < 1e-12);
            }

            let r = tree.radius(q, 1.5);
            let expect = pts.iter().filter(|p| (*p - q).norm() <= 1.5).count();
            assert_eq!(r.len(), expect);
            assert_eq!(tree.count_within(q, 1.5), expect);
            for n in &r {
                assert!(((pts[n.index] - q).norm_squared() - n.dist2).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn nearest_within_respects_gate() {
        let pts = vec![Point3::new(0.0, 0.0, 0.0), Point3::new(5.0, 0.0, 0.0)];
        let tree = KdTree::build(&pts);
        assert!(tree.nearest_within(&Point3::new(2.0, 0.0, 0.0), 1.0).is_none());
        assert_eq!(tree.nearest_within(&Point3::new(4.5, 0.0, 0.0), 1.0).unwrap().index, 1);
    }

    #[test]
    fn empty_and_duplicates() {
        let tree = KdTree::build(&[]);
        assert!(tree.nearest(&Point3::zeros()).is_none());
        assert!(tree.knn(&Point3::zeros(), 3).is_empty());
        let dup = vec![Point3::new(1.0, 1.0, 1.0); 40];
        let tree = KdTree::build(&dup);
        assert_eq!(tree.radius(&Point3::new(1.0, 1.0, 1.0), 0.1).len(), 40);
        assert_eq!(tree.knn(&Point3::zeros(), 5).len(), 5);
    }
}
