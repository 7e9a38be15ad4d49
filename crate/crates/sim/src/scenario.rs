//! Scenario configuration, frame streaming and dataset export.

use std::path::{Path, PathBuf};
use std::sync::Mutex;

use lidarfuse_core::eval::PoseRecord;
use lidarfuse_core::io::{save_poses, write_frame, FrameEntry, Manifest};
use lidarfuse_core::{Error, PointCloud, Result, RigidTransform};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::lidar::{cast_ranges, ranges_to_cloud, LidarModel};
use crate::pendulum::{
    apply_offset, integrate_pendulum, pendulum_to_pose_offset, IntegratorParams, PendulumState, GRAVITY,
};
use crate::scene::{default_mounts, generate_scene, mount_pose, sensor_sites, Layout, Scene, TrafficConfig};

/// Explicit sensor placement for the custom layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensorSpec {
    pub x: f64,
    pub y: f64,
    /// Defaults to `sensor_height`.
    pub z: Option<f64>,
    /// Defaults to facing the centroid of all sensors.
    pub yaw_deg: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScenarioConfig {
    pub name: String,
    pub layout: Layout,
    pub n_sensors: usize,
    pub sensor_height: f64,
    pub tilt_deg: f64,
    pub pendulum_radius: f64,
    /// When false, sensors stay at their mounting poses.
    pub pendulum: bool,
    pub noise_sigma: f64,
    pub sample_rate: f64,
    pub duration: f64,
    /// Maximum |timestamp − nominal| per sensor, seconds. Must stay below
    /// half a period so that nearest-timestamp grouping is unambiguous.
    pub timestamp_jitter: f64,
    pub seed: u64,
    pub lidar: LidarModel,
    pub traffic: TrafficConfig,
    pub sensors: Vec<SensorSpec>,
    /// Overrides the sampled pendulum initial values, one per sensor.
    pub pendulum_initial: Vec<PendulumState>,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            name: "straight".into(),
            layout: Layout::Straight,
            n_sensors: 4,
            sensor_height: 6.0,
            tilt_deg: 17.0,
            pendulum_radius: 6.0,
            pendulum: true,
            noise_sigma: 0.1 / 3.0,
            sample_rate: 20.0,
            duration: 30.0,
            timestamp_jitter: 0.012,
            seed: 1,
            lidar: LidarModel::default(),
            traffic: TrafficConfig::moderate(),
            sensors: Vec::new(),
            pendulum_initial: Vec::new(),
        }
    }
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidParameter(m.into()));
        let n = if self.layout == Layout::Custom { self.sensors.len() } else { self.n_sensors };
        if !(2..=4).contains(&n) {
            return bad("the scenario needs 2 to 4 sensors");
        }
        if !(self.noise_sigma >= 0.0) {
            return bad("noise_sigma must be non-negative");
        }
        if !(self.sample_rate > 0.0) || !(self.duration >= 0.0) {
            return bad("sample_rate must be positive and duration non-negative");
        }
        if !(self.pendulum_radius > 0.0) {
            return bad("pendulum_radius must be positive");
        }
        if !(0.0..0.5 / self.sample_rate).contains(&self.timestamp_jitter) {
            return bad("timestamp_jitter must be below half a frame period");
        }
        if self.lidar.layers == 0 || self.lidar.horizontal_steps == 0 || !(self.lidar.max_range > 0.0) {
            return bad("invalid lidar model");
        }
        if !self.pendulum_initial.is_empty() && self.pendulum_initial.len() != n {
            return bad("pendulum_initial needs one state per sensor");
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let c: ScenarioConfig = toml::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        c.validate()?;
        Ok(c)
    }

    pub fn n_frames(&self) -> usize {
        (self.duration * self.sample_rate).round() as usize
    }
}

/// A generated scenario. Frames are produced on demand in any order.
pub struct Scenario {
    pub config: ScenarioConfig,
    pub scene: Scene,
    /// Nominal sensor → world poses.
    pub mounts: Vec<RigidTransform>,
    pub pendulum_initial: Vec<PendulumState>,
    /// Per sensor and frame, the pole offset.
    offsets: Vec<Vec<RigidTransform>>,
    time_offsets: Vec<Vec<f64>>,
    cache: Mutex<Vec<Option<(RigidTransform, std::sync::Arc<Vec<f64>>)>>>,
}

impl Scenario {
    pub fn new(config: ScenarioConfig) -> Result<Self> {
        config.validate()?;
        let tilt = config.tilt_deg.to_radians();
        let sites: Vec<(f64, f64)> = if config.layout == Layout::Custom {
            config.sensors.iter().map(|s| (s.x, s.y)).collect()
        } else {
            sensor_sites(config.layout, config.n_sensors)
        };
        let mut mounts = default_mounts(config.layout, &sites, config.sensor_height, tilt);
        if config.layout == Layout::Custom {
            for (m, s) in mounts.iter_mut().zip(&config.sensors) {
                let yaw = match s.yaw_deg {
                    Some(y) => y.to_radians(),
                    None => {
                        let f = m.rotation.column(0);
                        f.y.atan2(f.x)
                    }
                };
                *m = mount_pose(s.x, s.y, s.z.unwrap_or(config.sensor_height), yaw, tilt);
            }
        }
        let scene = generate_scene(config.layout, &config.traffic, config.seed, &sites);

        // Pendulum initial values come from their own stream so that every
        // layout with the same seed shares them.
        let mut prng = ChaCha8Rng::seed_from_u64(config.seed);
        prng.set_stream(1);
        let initial: Vec<PendulumState> = if config.pendulum_initial.is_empty() {
            (0..mounts.len()).map(|_| PendulumState::sample_initial(&mut prng)).collect()
        } else {
            config.pendulum_initial.clone()
        };
        let n_frames = config.n_frames();
        let dt = 1.0 / config.sample_rate;
        let offsets: Vec<Vec<RigidTransform>> = initial
            .iter()
            .map(|s0| {
                if !config.pendulum {
                    return vec![RigidTransform::identity(); n_frames];
                }
                let tr = integrate_pendulum(s0, GRAVITY, config.pendulum_radius, dt, n_frames.saturating_sub(1), &IntegratorParams::default());
                if tr.clamp_events > 0 {
                    log::warn!("pendulum passed the |θ| clamp {} times", tr.clamp_events);
                }
                tr.states.iter().map(|s| pendulum_to_pose_offset(s, config.pendulum_radius)).collect()
            })
            .collect();

        let mut trng = ChaCha8Rng::seed_from_u64(config.seed);
        trng.set_stream(2);
        let j = config.timestamp_jitter;
        let time_offsets = (0..mounts.len())
            .map(|_| {
                if j == 0.0 {
                    return vec![0.0; n_frames];
                }
                let base = trng.gen_range(-0.6 * j..=0.6 * j);
                (0..n_frames).map(|_| base + trng.gen_range(-0.4 * j..=0.4 * j)).collect()
            })
            .collect();

        let cache = Mutex::new(vec![None; mounts.len()]);
        Ok(Self {
            config,
            scene,
            mounts,
            pendulum_initial: initial,
            offsets,
            time_offsets,
            cache,
        })
    }

    pub fn n_sensors(&self) -> usize {
        self.mounts.len()
    }

    pub fn n_frames(&self) -> usize {
        self.config.n_frames()
    }

    pub fn nominal_time(&self, n: usize) -> f64 {
        n as f64 / self.config.sample_rate
    }

    pub fn timestamp(&self, sensor: usize, n: usize) -> f64 {
        self.nominal_time(n) + self.time_offsets[sensor][n]
    }

    /// Pole offset of `sensor` at frame `n`.
    pub fn offset(&self, sensor: usize, n: usize) -> &RigidTransform {
        &self.offsets[sensor][n]
    }

    /// Ground-truth sensor → world pose.
    pub fn gt_pose(&self, sensor: usize, n: usize) -> RigidTransform {
        apply_offset(&self.offsets[sensor][n], &self.mounts[sensor])
    }

    pub fn gt_records(&self) -> Vec<PoseRecord> {
        let mut out = Vec::with_capacity(self.n_frames() * self.n_sensors());
        for n in 0..self.n_frames() {
            for i in 0..self.n_sensors() {
                out.push(PoseRecord::from_transform(n, i, &self.gt_pose(i, n)));
            }
        }
        out
    }

    fn noise_seed(&self, sensor: usize, n: usize) -> u64 {
        // SplitMix-style mixing of (seed, sensor, frame).
        let mut z = self.config.seed ^ ((sensor as u64) << 40) ^ (n as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }

    /// Clouds of all sensors at frame `n`, each in its sensor frame. All
    /// geometry (sensor poses and road users) is evaluated at the nominal
    /// frame time; only the reported timestamps carry jitter.
    pub fn frame(&self, n: usize) -> Vec<PointCloud> {
        assert!(n < self.n_frames(), "frame {n} out of range");
        let t = self.nominal_time(n);
        let dynamic = self.scene.actor_shapes(t);
        (0..self.n_sensors())
            .map(|i| {
                let pose = self.gt_pose(i, n);
                let cached = if dynamic.is_empty() {
                    let c = self.cache.lock().unwrap();
                    c[i].as_ref().filter(|(p, _)| *p == pose).map(|(_, r)| r.clone())
                } else {
                    None
                };
                let ranges = match cached {
                    Some(r) => r,
                    None => {
                        let r = std::sync::Arc::new(cast_ranges(&self.scene, &dynamic, &pose, &self.config.lidar));
                        if dynamic.is_empty() {
                            self.cache.lock().unwrap()[i] = Some((pose, r.clone()));
                        }
                        r
                    }
                };
                let pts = ranges_to_cloud(&ranges, &self.config.lidar, self.config.noise_sigma, self.noise_seed(i, n));
                PointCloud::new(pts, i, self.timestamp(i, n))
            })
            .collect()
    }
}

/// Generates the scenario and writes frame files, ground truth and a
/// manifest to `out`. Returns the manifest path.
pub fn run_scenario(config: &ScenarioConfig, out: &Path) -> Result<PathBuf> {
    let sc = Scenario::new(config.clone())?;
    let frames_dir = out.join("frames");
    std::fs::create_dir_all(&frames_dir)?;
    let mut manifest = Manifest {
        dataset: config.name.clone(),
        sample_rate: config.sample_rate,
        n_sensors: sc.n_sensors(),
        ground_truth: Some("ground_truth.csv".into()),
        frames: Vec::new(),
    };
    for n in 0..sc.n_frames() {
        for c in sc.frame(n) {
            let rel = PathBuf::from("frames").join(format!("s{}_{n:06}.lfrm", c.sensor_id));
            write_frame(&out.join(&rel), &c)?;
            manifest.frames.push(FrameEntry {
                sensor: c.sensor_id,
                time_step: n,
                timestamp: c.timestamp,
                file: rel,
            });
        }
        if n % 100 == 0 {
            log::info!("simulated frame {n}/{}", sc.n_frames());
        }
    }
    save_poses(&out.join("ground_truth.csv"), &sc.gt_records())?;
    let text = toml::to_string(config).map_err(|e| Error::Format(e.to_string()))?;
    std::fs::write(out.join("scenario.toml"), text)?;
    let path = out.join("manifest.toml");
    manifest.save(&path)?;
    Ok(path)
}
