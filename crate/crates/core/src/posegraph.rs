//! Pose graph over sensor poses with a sliding window.
//!
//! A node `(sensor, time_step)` holds the pose mapping that sensor's frame
//! into the common frame (the root sensor at the first time step). An edge
//! `(i, f) → (j, g)` measures `T_{i,f}^{j,g}`, the transform taking points of
//! frame `(i, f)` into frame `(j, g)`. Its residual is
//! `log(Z⁻¹ · X_j⁻¹ · X_i)` and is robustified with a Huber loss on the
//! information-weighted norm.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use nalgebra::{DMatrix, DVector, Matrix6, Vector6};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geom::{se3_adjoint, se3_exp, se3_log, se3_right_jacobian_inv, RigidTransform};
use crate::icp::{gicp_prepared, GicpCloud, GicpParams};

/// `(sensor_id, time_step)`.
pub type NodeKey = (usize, usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum EdgeCategory {
    PrevFrame,
    FirstFrame,
    CrossSensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PoseEdge {
    pub from: NodeKey,
    pub to: NodeKey,
    pub measurement: RigidTransform,
    pub information: Matrix6<f64>,
    pub category: EdgeCategory,
}

impl PoseEdge {
    /// Edge with information `weight · I`.
    pub fn new(from: NodeKey, to: NodeKey, measurement: RigidTransform, weight: f64, category: EdgeCategory) -> Self {
        assert!(from != to, "self edge");
        assert!(weight > 0.0, "information must be positive definite");
        Self {
            from,
            to,
            measurement,
            information: Matrix6::identity() * weight,
            category,
        }
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct OptimizeParams {
    pub huber_delta: f64,
    pub max_iterations: usize,
}

impl Default for OptimizeParams {
    fn default() -> Self {
        Self {
            huber_delta: 0.1,
            max_iterations: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizeReport {
    pub initial_cost: f64,
    pub final_cost: f64,
    pub iterations: usize,
    /// False when the iteration cap was hit first.
    pub converged: bool,
    /// Non-pinned nodes with no path to a pinned node; left untouched.
    pub held_fixed: Vec<NodeKey>,
}

pub fn huber(s: f64, delta: f64) -> f64 {
    if s <= delta {
        s * s
    } else {
        2.0 * delta * s - delta * delta
    }
}

/// Residual and its Jacobians with respect to right perturbations
/// `X ← X·exp(ξ)` of the `from` and `to` poses.
pub fn edge_jacobians(
    x_from: &RigidTransform,
    x_to: &RigidTransform,
    z: &RigidTransform,
) -> (Vector6<f64>, Matrix6<f64>, Matrix6<f64>) {
    let rel = x_to.inverse().compose(x_from);
    let r = se3_log(&z.inverse().compose(&rel));
    let jr = se3_right_jacobian_inv(&r);
    let j_to = -jr * se3_adjoint(&rel.inverse());
    (r, jr, j_to)
}

#[derive(Debug, Clone, Default)]
pub struct PoseGraph {
    nodes: BTreeMap<NodeKey, RigidTransform>,
    edges: Vec<PoseEdge>,
    pinned: BTreeSet<NodeKey>,
}

impl PoseGraph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_node(&mut self, key: NodeKey, pose: RigidTransform) {
        self.nodes.insert(key, pose);
    }

    /// Adds an edge; both endpoints must exist.
    pub fn add_edge(&mut self, e: PoseEdge) -> Result<()> {
        for k in [e.from, e.to] {
            if !self.nodes.contains_key(&k) {
                return Err(Error::InvalidParameter(format!("edge references missing node {k:?}")));
            }
        }
        self.edges.push(e);
        Ok(())
    }

    pub fn pin(&mut self, key: NodeKey) {
        self.pinned.insert(key);
    }

    pub fn is_pinned(&self, key: &NodeKey) -> bool {
        self.pinned.contains(key)
    }

    pub fn pose(&self, key: &NodeKey) -> Option<&RigidTransform> {
        self.nodes.get(key)
    }

    pub fn set_pose(&mut self, key: NodeKey, pose: RigidTransform) {
        if let Some(p) = self.nodes.get_mut(&key) {
            *p = pose;
        }
    }

    pub fn nodes(&self) -> &BTreeMap<NodeKey, RigidTransform> {
        &self.nodes
    }

    pub fn edges(&self) -> &[PoseEdge] {
        &self.edges
    }

    pub fn pinned(&self) -> &BTreeSet<NodeKey> {
        &self.pinned
    }

    /// Removes nodes failing `keep` together with their edges and pins.
    pub fn retain_nodes(&mut self, keep: impl Fn(&NodeKey) -> bool) {
        self.nodes.retain(|k, _| keep(k));
        self.pinned.retain(|k| keep(k));
        let nodes = &self.nodes;
        self.edges.retain(|e| nodes.contains_key(&e.from) && nodes.contains_key(&e.to));
    }

    pub fn edge_residual(&self, e: &PoseEdge) -> Vector6<f64> {
        let rel = self.nodes[&e.to].inverse().compose(&self.nodes[&e.from]);
        se3_log(&e.measurement.inverse().compose(&rel))
    }

    /// Robust cost `Σ ρ(‖r‖_Λ)`.
    pub fn cost(&self, huber_delta: f64) -> f64 {
        self.cost_with(&self.nodes, huber_delta)
    }

    fn cost_with(&self, nodes: &BTreeMap<NodeKey, RigidTransform>, delta: f64) -> f64 {
        self.edges
            .iter()
            .map(|e| {
                let rel = nodes[&e.to].inverse().compose(&nodes[&e.from]);
                let r = se3_log(&e.measurement.inverse().compose(&rel));
                huber(r.dot(&(e.information * r)).max(0.0).sqrt(), delta)
            })
            .sum()
    }

    /// Nodes reachable from a pinned node through edges.
    fn anchored(&self) -> BTreeSet<NodeKey> {
        let mut adj: BTreeMap<NodeKey, Vec<NodeKey>> = BTreeMap::new();
        for e in &self.edges {
            adj.entry(e.from).or_default().push(e.to);
            adj.entry(e.to).or_default().push(e.from);
        }
        let mut seen: BTreeSet<NodeKey> = self.pinned.iter().filter(|k| self.nodes.contains_key(k)).copied().collect();
        let mut queue: VecDeque<NodeKey> = seen.iter().copied().collect();
        while let Some(k) = queue.pop_front() {
            for n in adj.get(&k).into_iter().flatten() {
                if seen.insert(*n) {
                    queue.push_back(*n);
                }
            }
        }
        seen
    }

    /// Levenberg-Marquardt with iteratively reweighted Huber weights over all
    /// non-pinned nodes connected to a pinned node.
    pub fn optimize(&mut self, p: &OptimizeParams) -> OptimizeReport {
        let anchored = self.anchored();
        let free: Vec<NodeKey> = self
            .nodes
            .keys()
            .filter(|k| !self.pinned.contains(k) && anchored.contains(k))
            .copied()
            .collect();
        let held_fixed: Vec<NodeKey> = self
            .nodes
            .keys()
            .filter(|k| !self.pinned.contains(k) && !anchored.contains(k))
            .copied()
            .collect();
        if !held_fixed.is_empty() {
            log::warn!("pose graph: {} node(s) not connected to a pinned node", held_fixed.len());
        }
        let slot: BTreeMap<NodeKey, usize> = free.iter().enumerate().map(|(i, k)| (*k, i)).collect();
        let dim = 6 * free.len();
        let initial_cost = self.cost(p.huber_delta);
        let mut cost = initial_cost;
        let mut report = OptimizeReport {
            initial_cost,
            final_cost: cost,
            iterations: 0,
            converged: true,
            held_fixed,
        };
        if dim == 0 {
            return report;
        }
        let mut lambda = 1e-6;
        report.converged = false;
        for it in 0..p.max_iterations {
            let mut h = DMatrix::<f64>::zeros(dim, dim);
            let mut b = DVector::<f64>::zeros(dim);
            for e in &self.edges {
                let (r, j_from, j_to) = edge_jacobians(&self.nodes[&e.from], &self.nodes[&e.to], &e.measurement);
                let s = r.dot(&(e.information * r)).max(0.0).sqrt();
                let w = if s <= p.huber_delta { 1.0 } else { p.huber_delta / s };
                let lam = e.information * w;
                let blocks = [(slot.get(&e.from), j_from), (slot.get(&e.to), j_to)];
                for (si, ji) in &blocks {
                    let Some(&si) = si else { continue };
                    let jl = ji.transpose() * lam;
                    let mut bv = b.fixed_rows_mut::<6>(6 * si);
                    bv += jl * r;
                    for (sj, jj) in &blocks {
                        let Some(&sj) = sj else { continue };
                        let mut hv = h.fixed_view_mut::<6, 6>(6 * si, 6 * sj);
                        hv += jl * jj;
                    }
                }
            }
            if b.amax() < 1e-14 {
                report.converged = true;
                break;
            }
            report.iterations = it + 1;
            let mut accepted = false;
            let mut tiny_step = false;
            for _ in 0..12 {
                let mut hd = h.clone();
                for d in 0..dim {
                    hd[(d, d)] += lambda * h[(d, d)].max(1e-12);
                }
                let Some(chol) = hd.cholesky() else {
                    lambda *= 10.0;
                    continue;
                };
                let delta = chol.solve(&(-&b));
                tiny_step = delta.amax() < 1e-10;
                let mut cand = self.nodes.clone();
                for (k, &si) in &slot {
                    let xi = Vector6::from_iterator(delta.rows(6 * si, 6).iter().copied());
                    let x = cand.get_mut(k).unwrap();
                    *x = x.compose(&se3_exp(&xi));
                }
                let c = self.cost_with(&cand, p.huber_delta);
                if c < cost {
                    let rel_drop = (cost - c) / cost.max(1e-300);
                    self.nodes = cand;
                    cost = c;
                    lambda = (lambda * 0.1).max(1e-12);
                    accepted = true;
                    if rel_drop < 1e-10 {
                        tiny_step = true;
                    }
                    break;
                }
                if tiny_step {
                    break;
                }
                lambda *= 10.0;
            }
            if !accepted || tiny_step {
                report.converged = true;
                break;
            }
        }
        if !report.converged {
            log::warn!("pose graph optimization hit the iteration cap ({})", p.max_iterations);
        }
        report.final_cost = cost;
        report
    }
}

/// Optimizes the first time step from pairwise measurements `(i, j) → T_i^j`
/// with sensor 0 fixed at identity. Returns the pose of every sensor.
pub fn build_initial_graph(
    pairwise: &BTreeMap<(usize, usize), RigidTransform>,
    n_sensors: usize,
    p: &OptimizeParams,
) -> Result<Vec<RigidTransform>> {
    let weighted: BTreeMap<(usize, usize), (RigidTransform, f64)> = pairwise.iter().map(|(k, t)| (*k, (*t, 1.0))).collect();
    Ok(initial_graph(&weighted, n_sensors, p)?.0)
}

/// Like [`build_initial_graph`] with per-edge information weights; also
/// returns the optimized graph.
pub fn initial_graph(
    pairwise: &BTreeMap<(usize, usize), (RigidTransform, f64)>,
    n_sensors: usize,
    p: &OptimizeParams,
) -> Result<(Vec<RigidTransform>, PoseGraph)> {
    if n_sensors == 0 {
        return Err(Error::Empty("no sensors".into()));
    }
    // Spanning-tree initialization from sensor 0.
    let mut init: Vec<Option<RigidTransform>> = vec![None; n_sensors];
    init[0] = Some(RigidTransform::identity());
    let mut queue = VecDeque::from([0usize]);
    while let Some(k) = queue.pop_front() {
        for (&(i, j), (t, _)) in pairwise {
            if i >= n_sensors || j >= n_sensors {
                return Err(Error::InvalidParameter(format!("pair ({i}, {j}) out of range")));
            }
            if j == k && init[i].is_none() {
                init[i] = Some(init[j].unwrap().compose(t));
                queue.push_back(i);
            } else if i == k && init[j].is_none() {
                init[j] = Some(init[i].unwrap().compose(&t.inverse()));
                queue.push_back(j);
            }
        }
    }
    let missing: Vec<usize> = (0..n_sensors).filter(|&i| init[i].is_none()).collect();
    if !missing.is_empty() {
        return Err(Error::DisconnectedGraph(missing));
    }
    let mut g = PoseGraph::new();
    for (i, x) in init.iter().enumerate() {
        g.add_node((i, 0), x.unwrap());
    }
    g.pin((0, 0));
    for (&(i, j), (t, w)) in pairwise {
        g.add_edge(PoseEdge::new((i, 0), (j, 0), *t, *w, EdgeCategory::CrossSensor))?;
    }
    g.optimize(p);
    let poses = (0..n_sensors).map(|i| *g.pose(&(i, 0)).unwrap()).collect();
    Ok((poses, g))
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct WindowParams {
    pub k_w: usize,
    pub optimize: OptimizeParams,
}

impl Default for WindowParams {
    fn default() -> Self {
        Self {
            k_w: 3,
            optimize: OptimizeParams::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdvanceReport {
    pub time_step: usize,
    pub nodes: usize,
    pub edges: usize,
    /// Sensors whose new node was seeded without a measurement to their
    /// previous node.
    pub fallback_seeded: Vec<usize>,
    /// Measurements dropped because an endpoint was not in the window.
    pub dropped_measurements: usize,
    pub optimize: OptimizeReport,
}

/// Sliding window of `k_w` time steps plus the permanently kept first-step
/// anchors.
#[derive(Debug, Clone)]
pub struct SlidingWindow {
    params: WindowParams,
    n_sensors: usize,
    graph: PoseGraph,
    latest: usize,
}

impl SlidingWindow {
    /// Starts from the first-step graph (typically from [`initial_graph`]);
    /// it must contain a node `(i, 0)` for every sensor.
    pub fn new(initial: PoseGraph, n_sensors: usize, params: WindowParams) -> Result<Self> {
        if params.k_w < 2 {
            return Err(Error::InvalidParameter("k_w must be at least 2".into()));
        }
        for i in 0..n_sensors {
            if initial.pose(&(i, 0)).is_none() {
                return Err(Error::InvalidParameter(format!("missing first-step node for sensor {i}")));
            }
        }
        let mut graph = initial;
        graph.pin((0, 0));
        Ok(Self {
            params,
            n_sensors,
            graph,
            latest: 0,
        })
    }

    pub fn from_poses(poses: &[RigidTransform], params: WindowParams) -> Result<Self> {
        let mut g = PoseGraph::new();
        for (i, x) in poses.iter().enumerate() {
            g.add_node((i, 0), *x);
        }
        Self::new(g, poses.len(), params)
    }

    pub fn params(&self) -> &WindowParams {
        &self.params
    }

    pub fn graph(&self) -> &PoseGraph {
        &self.graph
    }

    pub fn latest_step(&self) -> usize {
        self.latest
    }

    /// Whether cross-sensor edges are measured at step `n`.
    pub fn cross_sensor_due(&self, n: usize) -> bool {
        n.is_multiple_of(self.params.k_w - 1)
    }

    pub fn pose(&self, key: &NodeKey) -> Option<RigidTransform> {
        self.graph.pose(key).copied()
    }

    /// Pose of every sensor at the newest step, falling back to older
    /// steps for sensors without a node there.
    pub fn latest_poses(&self) -> Vec<RigidTransform> {
        (0..self.n_sensors)
            .map(|i| {
                (0..=self.latest)
                    .rev()
                    .find_map(|n| self.graph.pose(&(i, n)).copied())
                    .expect("first-step node is always present")
            })
            .collect()
    }

    pub fn max_nodes(&self) -> usize {
        self.n_sensors * self.params.k_w + self.n_sensors
    }

    /// Adds time step `n` with its measurements, drops nodes that left the
    /// window and re-optimizes.
    pub fn advance(&mut self, n: usize, measurements: Vec<PoseEdge>) -> AdvanceReport {
        assert!(n > self.latest, "time steps must increase");
        let mut fallback_seeded = Vec::new();
        for i in 0..self.n_sensors {
            let prev = (0..n).rev().find_map(|m| self.graph.pose(&(i, m)).copied().map(|x| (m, x)));
            let (m, x_prev) = prev.expect("first-step node is always present");
            let z = measurements
                .iter()
                .find(|e| e.from == (i, n) && e.to == (i, m));
            let seed = match z {
                Some(e) => x_prev.compose(&e.measurement),
                None => {
                    fallback_seeded.push(i);
                    log::info!("sensor {i} step {n}: no previous-frame measurement, seeding with identity motion");
                    x_prev
                }
            };
            self.graph.add_node((i, n), seed);
        }
        let mut dropped = 0;
        for e in measurements {
            if self.graph.add_edge(e).is_err() {
                dropped += 1;
            }
        }
        let start = (n + 1).saturating_sub(self.params.k_w);
        self.graph.retain_nodes(|k| k.1 == 0 || k.1 >= start);
        if start > 0 {
            for i in 0..self.n_sensors {
                self.graph.pin((i, 0));
            }
        }
        self.latest = n;
        let optimize = self.graph.optimize(&self.params.optimize);
        assert!(self.graph.nodes().len() <= self.max_nodes());
        AdvanceReport {
            time_step: n,
            nodes: self.graph.nodes().len(),
            edges: self.graph.edges().len(),
            fallback_seeded,
            dropped_measurements: dropped,
            optimize,
        }
    }
}

/// Inputs for measuring the edges of time step `n`. Per-sensor vectors are
/// indexed by sensor id; `None` marks missing data.
#[derive(Debug, Clone)]
pub struct EdgeInputs<'a> {
    pub time_step: usize,
    /// Static points of every sensor at step `n`.
    pub current: Vec<Option<&'a GicpCloud>>,
    /// Static points at step `n − 1`.
    pub previous: Vec<Option<&'a GicpCloud>>,
    /// First-frame clouds and masks of their usable points.
    pub first: Vec<Option<&'a GicpCloud>>,
    pub first_valid: Vec<Option<&'a [bool]>>,
    /// Last previous-frame measurement `T_{i,n-1}^{i,n-2}`.
    pub prev_motion: Vec<Option<RigidTransform>>,
    /// Initial value for the first-frame registration; `None` is identity.
    pub first_init: Vec<Option<RigidTransform>>,
    /// `T_{i,n-1}^{j,n-1}` for `i > j` from the last optimized poses.
    pub cross_init: BTreeMap<(usize, usize), RigidTransform>,
    /// `T_{i,0}^{j,0}`, used when `cross_init` lacks a pair.
    pub cross_fallback: BTreeMap<(usize, usize), RigidTransform>,
    pub include_cross: bool,
}

/// Runs G-ICP for every edge of step `n`: previous frame, first frame and
/// (when due) every sensor pair. Non-converged registrations are dropped.
pub fn measure_edges(input: &EdgeInputs, p: &GicpParams) -> Vec<PoseEdge> {
    let n = input.time_step;
    let n_sensors = input.current.len();
    struct Task<'b> {
        from: NodeKey,
        to: NodeKey,
        src: &'b GicpCloud,
        tgt: &'b GicpCloud,
        mask: Option<&'b [bool]>,
        init: RigidTransform,
        category: EdgeCategory,
    }
    let mut tasks = Vec::new();
    for i in 0..n_sensors {
        let Some(cur) = input.current[i] else {
            log::info!("sensor {i} step {n}: no data, edges omitted");
            continue;
        };
        if n > 1 {
            if let Some(prev) = input.previous.get(i).copied().flatten() {
                tasks.push(Task {
                    from: (i, n),
                    to: (i, n - 1),
                    src: cur,
                    tgt: prev,
                    mask: None,
                    init: input.prev_motion.get(i).copied().flatten().unwrap_or_default(),
                    category: EdgeCategory::PrevFrame,
                });
            }
        }
        if let Some(first) = input.first.get(i).copied().flatten() {
            tasks.push(Task {
                from: (i, n),
                to: (i, 0),
                src: cur,
                tgt: first,
                mask: input.first_valid.get(i).copied().flatten(),
                init: input.first_init.get(i).copied().flatten().unwrap_or_default(),
                category: EdgeCategory::FirstFrame,
            });
        }
    }
    if input.include_cross {
        for i in 0..n_sensors {
            for j in 0..i {
                let (Some(a), Some(b)) = (input.current[i], input.current[j]) else {
                    continue;
                };
                let init = input
                    .cross_init
                    .get(&(i, j))
                    .or_else(|| input.cross_fallback.get(&(i, j)))
                    .copied()
                    .unwrap_or_default();
                tasks.push(Task {
                    from: (i, n),
                    to: (j, n),
                    src: a,
                    tgt: b,
                    mask: None,
                    init,
                    category: EdgeCategory::CrossSensor,
                });
            }
        }
    }
    // At n = 1 the previous frame is the first frame; a single edge suffices.
    tasks
        .par_iter()
        .filter_map(|t| {
            let r = gicp_prepared(t.src, t.tgt, t.mask, &t.init, p);
            if !r.converged || r.correspondences == 0 {
                log::info!("edge {:?} → {:?} excluded: G-ICP did not converge", t.from, t.to);
                return None;
            }
            Some(PoseEdge::new(t.from, t.to, r.transform, r.correspondences as f64, t.category))
        })
        .collect()
}
