//! Initial registration of the first frame and the per-frame continuous
//! registration loop.

use std::collections::BTreeMap;
use std::time::Instant;

use lidarfuse_core::dynafilter::{detect_changes_indexed, BackgroundModel, SphericalIndex};
use lidarfuse_core::eval::{PoseRecord, RuntimeStats};
use lidarfuse_core::features::{coarse_register_validated, CoarseParams, CoarseRegistrationResult, FeatureCloud};
use lidarfuse_core::icp::{GicpCloud, GicpParams};
use lidarfuse_core::posegraph::{initial_graph, AdvanceReport, EdgeCategory, EdgeInputs, PoseGraph, SlidingWindow};
use lidarfuse_core::preprocess::{octree_downsample, remove_outliers, voxel_downsample, with_normals};
use lidarfuse_core::{Point3, PointCloud, RigidTransform};
use rayon::prelude::*;

use crate::config::{FirstFrameInit, RegistrationConfig};
use crate::error::{PipelineError, Result};
use crate::sync::Frame;

/// Outcome of the coarse registration of sensor `source` onto `target`.
#[derive(Debug, Clone)]
pub struct PairOutcome {
    pub source: usize,
    pub target: usize,
    pub result: std::result::Result<CoarseRegistrationResult, String>,
    /// Structure overlap of the result, see
    /// [`lidarfuse_core::features::structure_overlap`].
    pub overlap: f64,
    /// Outer RANSAC rounds run.
    pub rounds: usize,
    /// Whether the edge entered the first-step graph.
    pub accepted: bool,
}

/// Coarse registration of one pair with overlap validation.
fn register_pair(src: &FeatureCloud, tgt: &FeatureCloud, coarse: &CoarseParams, cfg: &RegistrationConfig, i: usize, j: usize) -> PairOutcome {
    let v = coarse_register_validated(src, tgt, coarse, &cfg.validation);
    PairOutcome {
        source: i,
        target: j,
        result: v.result.map_err(|e| e.to_string()),
        overlap: v.overlap,
        rounds: v.rounds,
        accepted: false,
    }
}

/// Drops edges that disagree with the spanning tree of the best-scoring
/// edges by more than the given tolerances.
fn consistent_edges(
    edges: &[(usize, usize, RigidTransform, f64)],
    n: usize,
    max_translation: f64,
    max_rotation: f64,
) -> Vec<bool> {
    let mut order: Vec<usize> = (0..edges.len()).collect();
    order.sort_by(|&a, &b| edges[b].3.total_cmp(&edges[a].3).then(a.cmp(&b)));
    // Kruskal on the score, keeping per-component poses relative to a root.
    let mut comp: Vec<usize> = (0..n).collect();
    let mut pose: Vec<RigidTransform> = vec![RigidTransform::identity(); n];
    let mut in_tree = vec![false; edges.len()];
    for &e in &order {
        let (i, j, t, _) = &edges[e];
        let (ci, cj) = (comp[*i], comp[*j]);
        if ci == cj {
            continue;
        }
        // Re-express i's component in j's: X_i = X_j · T.
        let shift = pose[*j].compose(t).compose(&pose[*i].inverse());
        for k in 0..n {
            if comp[k] == ci {
                comp[k] = cj;
                pose[k] = shift.compose(&pose[k]);
            }
        }
        in_tree[e] = true;
    }
    edges
        .iter()
        .enumerate()
        .map(|(e, (i, j, t, _))| {
            if in_tree[e] {
                return true;
            }
            let implied = pose[*j].inverse().compose(&pose[*i]);
            let d = implied.inverse().compose(t);
            d.translation.norm() <= max_translation && d.angle() <= max_rotation
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct InitialRegistration {
    /// `T_{i,0}^{0,0}` for every sensor.
    pub poses: Vec<RigidTransform>,
    pub graph: PoseGraph,
    pub pairs: Vec<PairOutcome>,
    pub runtime_s: f64,
}

/// Outlier removal and normals.
fn preprocess(c: &PointCloud, cfg: &RegistrationConfig) -> PointCloud {
    let cleaned = remove_outliers(c, cfg.outlier_k, cfg.outlier_stddev_mult).cloud;
    with_normals(&cleaned, cfg.normal_radius, &Point3::zeros())
}

/// Keypoints, descriptors and refinement data of one first-frame cloud.
pub fn prepare_feature_cloud(c: &PointCloud, cfg: &RegistrationConfig, coarse: &CoarseParams) -> Result<FeatureCloud> {
    let pre = preprocess(c, cfg);
    let down = octree_downsample(&pre, &cfg.octree)?;
    let refine = voxel_downsample(&pre, cfg.coarse_refine_voxel).points;
    Ok(FeatureCloud::new(down, Some(refine), coarse)?)
}

/// Pre-processing, octree downsampling, keypoints and descriptors per
/// sensor, then coarse registration of every pair `i > j` and the
/// first-step pose graph.
pub fn initial_registration(frame0: &[PointCloud], cfg: &RegistrationConfig) -> Result<InitialRegistration> {
    let start = Instant::now();
    let n = frame0.len();
    if n < 2 {
        return Err(PipelineError::Config(format!("initial registration needs at least 2 clouds, got {n}")));
    }
    let coarse = cfg.coarse_params();
    let prepared: Vec<FeatureCloud> = frame0
        .par_iter()
        .map(|c| prepare_feature_cloud(c, cfg, &coarse))
        .collect::<Result<_>>()?;
    let pairs_idx: Vec<(usize, usize)> = (0..n).flat_map(|i| (0..i).map(move |j| (i, j))).collect();
    let mut pairs: Vec<PairOutcome> = pairs_idx
        .par_iter()
        .map(|&(i, j)| {
            let out = register_pair(&prepared[i], &prepared[j], &coarse, cfg, i, j);
            match &out.result {
                Ok(r) => log::info!(
                    "pair {i} → {j}: {} inliers, p2p {:?}, structure overlap {:.2} after {} round(s)",
                    r.inlier_count,
                    r.p2p_error,
                    out.overlap,
                    out.rounds
                ),
                Err(e) => log::warn!("pair {i} → {j} failed: {e}"),
            }
            out
        })
        .collect();
    let candidates: Vec<(usize, (usize, usize, RigidTransform, f64))> = pairs
        .iter()
        .enumerate()
        .filter(|(_, p)| p.overlap >= cfg.validation.min_structure_overlap)
        .filter_map(|(k, p)| p.result.as_ref().ok().map(|r| (k, (p.source, p.target, r.transform, p.overlap))))
        .collect();
    let edges: Vec<_> = candidates.iter().map(|c| c.1).collect();
    let keep = consistent_edges(&edges, n, cfg.cycle_max_translation, cfg.cycle_max_rotation);
    let mut measured = BTreeMap::new();
    for ((k, (i, j, t, _)), ok) in candidates.iter().zip(keep) {
        if !ok {
            log::warn!("pair {i} → {j} disagrees with the other pairs, dropped");
            continue;
        }
        let inliers = pairs[*k].result.as_ref().map_or(1, |r| r.inlier_count.max(1));
        pairs[*k].accepted = true;
        measured.insert((*i, *j), (*t, inliers as f64));
    }
    let (poses, graph) = match initial_graph(&measured, n, &cfg.window.optimize) {
        Ok(x) => x,
        Err(lidarfuse_core::Error::DisconnectedGraph(unreachable)) => {
            let failed = pairs.iter().filter(|p| !p.accepted).map(|p| (p.source, p.target)).collect();
            return Err(PipelineError::InitialRegistration { failed, unreachable });
        }
        Err(e) => return Err(e.into()),
    };
    Ok(InitialRegistration {
        poses,
        graph,
        pairs,
        runtime_s: start.elapsed().as_secs_f64(),
    })
}

/// Union of all clouds mapped into the common frame with their poses,
/// tagged by sensor.
pub fn fuse(clouds: &[Option<PointCloud>], poses: &[RigidTransform]) -> Vec<(Point3, usize)> {
    clouds
        .iter()
        .zip(poses)
        .enumerate()
        .filter_map(|(i, (c, x))| c.as_ref().map(|c| (i, c, x)))
        .flat_map(|(i, c, x)| c.points.iter().map(move |p| (x.transform_point(p), i)))
        .collect()
}

struct SensorState {
    first_raw: Vec<Point3>,
    first_index: SphericalIndex,
    first_cloud: GicpCloud,
    first_valid: Vec<bool>,
    model: BackgroundModel,
    previous: Option<GicpCloud>,
    prev_motion: Option<RigidTransform>,
}

/// Per-sensor result of segmentation and downsampling for one frame.
struct Prepared {
    cloud: GicpCloud,
    dynamic: usize,
}

#[derive(Debug, Clone)]
pub struct StepOutput {
    pub time_step: usize,
    /// Sensor → common-frame poses after optimization.
    pub poses: Vec<RigidTransform>,
    pub runtime_ms: f64,
    /// Points classified dynamic per sensor (0 for missing sensors).
    pub dynamic_points: Vec<usize>,
    pub edges_measured: usize,
    pub report: AdvanceReport,
}

/// State of one running registration.
pub struct Session {
    cfg: RegistrationConfig,
    gicp: GicpParams,
    window: SlidingWindow,
    sensors: Vec<SensorState>,
    /// Internal consecutive step counter of the pose graph.
    step: usize,
    pub runtimes: RuntimeStats,
    pub initial: InitialRegistration,
}

impl Session {
    /// Runs the initial registration on the first frame, which must hold a
    /// cloud from every sensor.
    pub fn start(frame0: &Frame, cfg: RegistrationConfig) -> Result<Self> {
        cfg.validate()?;
        let clouds: Vec<PointCloud> = frame0
            .clouds
            .iter()
            .enumerate()
            .map(|(i, c)| c.clone().ok_or(PipelineError::IncompleteFirstFrame(i)))
            .collect::<Result<_>>()?;
        let initial = initial_registration(&clouds, &cfg)?;
        Self::with_initial(&clouds, initial, cfg)
    }

    /// Starts from known first-frame poses instead of running the coarse
    /// registration.
    pub fn from_poses(frame0: &[PointCloud], poses: Vec<RigidTransform>, cfg: RegistrationConfig) -> Result<Self> {
        cfg.validate()?;
        let mut graph = PoseGraph::new();
        for (i, x) in poses.iter().enumerate() {
            graph.add_node((i, 0), *x);
        }
        let initial = InitialRegistration {
            poses,
            graph,
            pairs: Vec::new(),
            runtime_s: 0.0,
        };
        Self::with_initial(frame0, initial, cfg)
    }

    /// Starts from the result of [`initial_registration`] on `frame0`.
    pub fn with_initial(frame0: &[PointCloud], initial: InitialRegistration, cfg: RegistrationConfig) -> Result<Self> {
        if frame0.len() != initial.poses.len() {
            return Err(PipelineError::Config("one first-frame cloud per pose expected".into()));
        }
        let gicp = cfg.gicp_params();
        let window = SlidingWindow::new(initial.graph.clone(), frame0.len(), cfg.window.clone())?;
        let sensors = frame0
            .par_iter()
            .map(|c| {
                let down = voxel_downsample(c, cfg.voxel_size);
                let first_cloud = GicpCloud::from_cloud(&down, &gicp);
                SensorState {
                    first_raw: c.points.clone(),
                    first_index: SphericalIndex::new(&c.points, cfg.change.cone_half_angle),
                    first_valid: vec![true; first_cloud.len()],
                    first_cloud,
                    model: BackgroundModel::from_params(&cfg.model),
                    previous: None,
                    prev_motion: None,
                }
            })
            .collect();
        let runtimes = RuntimeStats {
            initial_s: initial.runtime_s,
            per_frame_ms: Vec::new(),
        };
        Ok(Self {
            cfg,
            gicp,
            window,
            sensors,
            step: 0,
            runtimes,
            initial,
        })
    }

    pub fn n_sensors(&self) -> usize {
        self.sensors.len()
    }

    pub fn config(&self) -> &RegistrationConfig {
        &self.cfg
    }

    /// Current sensor → common-frame poses.
    pub fn poses(&self) -> Vec<RigidTransform> {
        self.window.latest_poses()
    }

    pub fn background_model(&self, sensor: usize) -> &BackgroundModel {
        &self.sensors[sensor].model
    }

    /// `T_{i,n-1}^{i,0}`: latest pose of sensor `i` relative to its first pose.
    fn relative_to_first(&self, i: usize, latest: &RigidTransform) -> RigidTransform {
        let x0 = self.window.pose(&(i, 0)).expect("first-step node is kept");
        x0.inverse().compose(latest)
    }

    /// Registers one synchronized frame. `clouds` is indexed by sensor;
    /// `None` marks a sensor without data in this frame.
    pub fn step(&mut self, time_step: usize, clouds: &[Option<PointCloud>]) -> Result<StepOutput> {
        if clouds.len() != self.n_sensors() {
            return Err(PipelineError::Config(format!(
                "frame {time_step} has {} slots for {} sensors",
                clouds.len(),
                self.n_sensors()
            )));
        }
        let start = Instant::now();
        let k = self.step + 1;
        let latest = self.window.latest_poses();
        let prealign: Vec<RigidTransform> = (0..self.n_sensors()).map(|i| self.relative_to_first(i, &latest[i])).collect();
        let cfg = &self.cfg;
        let gicp = &self.gicp;

        let prepared: Vec<Option<Prepared>> = self
            .sensors
            .par_iter_mut()
            .zip(clouds)
            .zip(&prealign)
            .map(|((s, c), pre)| c.as_ref().map(|c| segment_and_downsample(s, c, pre, cfg, gicp)))
            .collect();

        let t_seg = start.elapsed().as_secs_f64() * 1e3;
        let n = self.n_sensors();
        let mut cross_init = BTreeMap::new();
        let mut cross_fallback = BTreeMap::new();
        for i in 0..n {
            for j in 0..i {
                cross_init.insert((i, j), latest[j].inverse().compose(&latest[i]));
                let (xi, xj) = (self.window.pose(&(i, 0)).unwrap(), self.window.pose(&(j, 0)).unwrap());
                cross_fallback.insert((i, j), xj.inverse().compose(&xi));
            }
        }
        let inputs = EdgeInputs {
            time_step: k,
            current: prepared.iter().map(|p| p.as_ref().map(|p| &p.cloud)).collect(),
            previous: self.sensors.iter().map(|s| s.previous.as_ref()).collect(),
            first: self.sensors.iter().map(|s| Some(&s.first_cloud)).collect(),
            first_valid: self.sensors.iter().map(|s| Some(s.first_valid.as_slice())).collect(),
            prev_motion: self.sensors.iter().map(|s| s.prev_motion).collect(),
            first_init: prealign
                .iter()
                .map(|p| match self.cfg.first_frame_init {
                    FirstFrameInit::Identity => None,
                    FirstFrameInit::Predicted => Some(*p),
                })
                .collect(),
            cross_init,
            cross_fallback,
            include_cross: self.window.cross_sensor_due(k),
        };
        let edges = lidarfuse_core::posegraph::measure_edges(&inputs, &self.gicp);
        let edges_measured = edges.len();
        let t_meas = start.elapsed().as_secs_f64() * 1e3;

        for (i, s) in self.sensors.iter_mut().enumerate() {
            let motion_category = if k == 1 { EdgeCategory::FirstFrame } else { EdgeCategory::PrevFrame };
            s.prev_motion = edges
                .iter()
                .find(|e| e.from.0 == i && e.category == motion_category)
                .map(|e| e.measurement);
        }
        let report = self.window.advance(k, edges);
        log::debug!(
            "step {k}: segmentation {t_seg:.1} ms, edges {:.1} ms, optimization {:.1} ms",
            t_meas - t_seg,
            start.elapsed().as_secs_f64() * 1e3 - t_meas
        );
        let dynamic_points = prepared.iter().map(|p| p.as_ref().map_or(0, |p| p.dynamic)).collect();
        for (s, p) in self.sensors.iter_mut().zip(prepared) {
            s.previous = p.map(|p| p.cloud);
        }
        self.step = k;
        let poses = self.window.latest_poses();
        let runtime_ms = start.elapsed().as_secs_f64() * 1e3;
        self.runtimes.per_frame_ms.push((time_step, runtime_ms));
        Ok(StepOutput {
            time_step,
            poses,
            runtime_ms,
            dynamic_points,
            edges_measured,
            report,
        })
    }

    /// Pose records of a step.
    pub fn records(time_step: usize, poses: &[RigidTransform]) -> Vec<PoseRecord> {
        poses.iter().enumerate().map(|(i, x)| PoseRecord::from_transform(time_step, i, x)).collect()
    }
}

/// Static/dynamic split against the first frame, background model update
/// and voxel downsampling of the static points.
fn segment_and_downsample(
    s: &mut SensorState,
    c: &PointCloud,
    prealign: &RigidTransform,
    cfg: &RegistrationConfig,
    gicp: &GicpParams,
) -> Prepared {
    let c = if cfg.continuous_outlier_removal {
        remove_outliers(c, cfg.outlier_k, cfg.outlier_stddev_mult).cloud
    } else {
        c.clone()
    };
    let (stat, dynamic) = if cfg.dynamic_filter {
        let changes = detect_changes_indexed(&s.first_index, &c.points, prealign, &cfg.change);
        // Everything is judged in the sensor's first-frame coordinates,
        // where the model lives.
        let moved: Vec<Point3> = c.points.iter().map(|p| prealign.transform_point(p)).collect();
        let mut detected: Vec<Point3> = changes.additions.iter().map(|&k| moved[k]).collect();
        detected.extend(changes.subtractions.iter().map(|&k| s.first_raw[k]));
        s.model.update(&detected);
        let thr = cfg.model.weight_threshold;
        let mut keep = vec![true; moved.len()];
        for &k in &changes.additions {
            keep[k] = false;
        }
        for (k, p) in moved.iter().enumerate() {
            if s.model.weight(p) >= thr {
                keep[k] = false;
            }
        }
        for (v, p) in s.first_valid.iter_mut().zip(&s.first_cloud.points) {
            *v = s.model.weight(p) < thr;
        }
        let dynamic = keep.iter().filter(|k| !**k).count();
        (c.select(&keep), dynamic)
    } else {
        (c, 0)
    };
    let down = voxel_downsample(&stat, cfg.voxel_size);
    Prepared {
        cloud: GicpCloud::from_cloud(&down, gicp),
        dynamic,
    }
}
