//! Spinning multi-layer LiDAR: rays on a fixed elevation × azimuth grid,
//! nearest hit per ray, Gaussian range noise.

use lidarfuse_core::{Point3, PointCloud, RigidTransform};
use nalgebra::Vector3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::scene::{Aabb, Scene, Shape};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LidarModel {
    pub layers: usize,
    /// Symmetric about the sensor's horizontal plane, degrees.
    pub vertical_fov_deg: f64,
    /// Rays per layer over 360°.
    pub horizontal_steps: usize,
    pub max_range: f64,
    pub min_range: f64,
}

impl Default for LidarModel {
    fn default() -> Self {
        Self {
            layers: 64,
            vertical_fov_deg: 33.2,
            horizontal_steps: 1024,
            max_range: 120.0,
            min_range: 0.5,
        }
    }
}

impl LidarModel {
    pub fn vertical_resolution(&self) -> f64 {
        if self.layers < 2 {
            return 0.0;
        }
        self.vertical_fov_deg.to_radians() / (self.layers - 1) as f64
    }

    pub fn horizontal_resolution(&self) -> f64 {
        2.0 * std::f64::consts::PI / self.horizontal_steps as f64
    }

    /// Unit ray directions in the sensor frame, layer-major.
    pub fn ray_directions(&self) -> Vec<Vector3<f64>> {
        let fov = self.vertical_fov_deg.to_radians();
        let mut out = Vec::with_capacity(self.layers * self.horizontal_steps);
        for k in 0..self.layers {
            let el = if self.layers > 1 {
                -fov / 2.0 + fov * k as f64 / (self.layers - 1) as f64
            } else {
                0.0
            };
            let (se, ce) = el.sin_cos();
            for j in 0..self.horizontal_steps {
                let az = -std::f64::consts::PI + self.horizontal_resolution() * j as f64;
                let (sa, ca) = az.sin_cos();
                out.push(Vector3::new(ce * ca, ce * sa, se));
            }
        }
        out
    }
}

/// Noiseless range per ray (`NaN` for misses and returns outside the
/// range limits), in [`LidarModel::ray_directions`] order.
pub fn cast_ranges(scene: &Scene, dynamic: &[(Aabb, Shape)], pose: &RigidTransform, model: &LidarModel) -> Vec<f64> {
    let dirs = model.ray_directions();
    let o = pose.translation;
    dirs.par_iter()
        .with_min_len(256)
        .map(|d| {
            let wd = pose.rotation * d;
            match scene.raycast(&o, &wd, dynamic, model.max_range) {
                Some(t) if t >= model.min_range => t,
                _ => f64::NAN,
            }
        })
        .collect()
}

/// Turns ranges into a sensor-frame cloud, adding `N(0, σ²)` to every range.
/// Noise is drawn in ray order from a generator seeded with `seed`.
pub fn ranges_to_cloud(ranges: &[f64], model: &LidarModel, noise_sigma: f64, seed: u64) -> Vec<Point3> {
    let dirs = model.ray_directions();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = (noise_sigma > 0.0).then(|| Normal::new(0.0, noise_sigma).unwrap());
    let mut out = Vec::with_capacity(ranges.len());
    for (d, &r) in dirs.iter().zip(ranges) {
        if r.is_nan() {
            continue;
        }
        let m = match &noise {
            Some(n) => r + n.sample(&mut rng),
            None => r,
        };
        if m > 0.0 {
            out.push(d * m);
        }
    }
    out
}

/// One scan from `sensor_pose` (sensor → world); points are returned in
/// the sensor frame.
pub fn simulate_lidar(
    scene: &Scene,
    dynamic: &[(Aabb, Shape)],
    sensor_pose: &RigidTransform,
    model: &LidarModel,
    noise_sigma: f64,
    seed: u64,
) -> PointCloud {
    let ranges = cast_ranges(scene, dynamic, sensor_pose, model);
    PointCloud::new(ranges_to_cloud(&ranges, model, noise_sigma, seed), 0, 0.0)
}
