//! Registration settings and the combined configuration file.

use std::path::Path;

use lidarfuse_core::dynafilter::{ChangeParams, ModelParams};
use lidarfuse_core::features::{CoarseParams, CoarseValidation};
use lidarfuse_core::icp::GicpParams;
use lidarfuse_core::posegraph::WindowParams;
use lidarfuse_core::preprocess::OctreeFilterParams;
use lidarfuse_sim::ScenarioConfig;
use serde::{Deserialize, Serialize};

use crate::error::{PipelineError, Result};

/// Initial value of the first-frame edge `T_{i,n}^{i,0}`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FirstFrameInit {
    Identity,
    /// `T_{i,n-1}^{i,0}` from the current poses, the same transform that
    /// pre-aligns the change detection.
    Predicted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RegistrationConfig {
    /// Voxel grid size of the continuous registration, meters.
    pub voxel_size: f64,
    pub window: WindowParams,
    /// Defaults to `GicpParams::for_voxel(voxel_size)`.
    pub gicp: Option<GicpParams>,
    pub outlier_k: usize,
    pub outlier_stddev_mult: f64,
    pub normal_radius: f64,
    pub octree: OctreeFilterParams,
    /// Defaults to `CoarseParams::for_max_voxel(octree.max_voxel_size)`.
    pub coarse: Option<CoarseParams>,
    /// Voxel size of the clouds used to refine and score coarse candidates.
    pub coarse_refine_voxel: f64,
    /// Acceptance of coarse pair results.
    pub validation: CoarseValidation,
    /// Accepted pairs must agree around cycles within these tolerances.
    pub cycle_max_translation: f64,
    pub cycle_max_rotation: f64,
    pub dynamic_filter: bool,
    pub change: ChangeParams,
    pub model: ModelParams,
    /// Run statistical outlier removal on every continuous frame too.
    pub continuous_outlier_removal: bool,
    pub first_frame_init: FirstFrameInit,
    /// Keep frames in which some sensor has no cloud.
    pub process_partial_frames: bool,
}

impl Default for RegistrationConfig {
    fn default() -> Self {
        Self {
            voxel_size: 1.0,
            window: WindowParams::default(),
            gicp: None,
            outlier_k: 16,
            outlier_stddev_mult: 2.0,
            normal_radius: 1.0,
            octree: OctreeFilterParams::default(),
            coarse: None,
            coarse_refine_voxel: 0.5,
            validation: CoarseValidation::default(),
            cycle_max_translation: 0.5,
            cycle_max_rotation: 2f64.to_radians(),
            dynamic_filter: true,
            change: ChangeParams::default(),
            model: ModelParams::default(),
            continuous_outlier_removal: false,
            first_frame_init: FirstFrameInit::Predicted,
            process_partial_frames: true,
        }
    }
}

impl RegistrationConfig {
    pub fn gicp_params(&self) -> GicpParams {
        self.gicp.clone().unwrap_or_else(|| GicpParams::for_voxel(self.voxel_size))
    }

    pub fn coarse_params(&self) -> CoarseParams {
        self.coarse
            .clone()
            .unwrap_or_else(|| CoarseParams::for_max_voxel(self.octree.max_voxel_size))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(PipelineError::Config(m));
        if !(self.voxel_size > 0.0) {
            return bad(format!("voxel_size must be positive, got {}", self.voxel_size));
        }
        if self.window.k_w < 2 {
            return bad(format!("window size must be at least 2, got {}", self.window.k_w));
        }
        if !(self.normal_radius > 0.0) || !(self.coarse_refine_voxel > 0.0) {
            return bad("normal_radius and coarse_refine_voxel must be positive".into());
        }
        let m = &self.model;
        if !(m.cell_size > 0.0 && m.attenuation > 0.0 && m.attenuation < 1.0 && m.insertion_weight >= 0.0) {
            return bad("background model needs cell_size > 0, 0 < attenuation < 1, insertion_weight >= 0".into());
        }
        self.octree.validate()?;
        Ok(())
    }
}

/// Layout of a configuration file: an optional `[scenario]` table for
/// `simulate` and a `[registration]` table for `register`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Config {
    pub scenario: ScenarioConfig,
    pub registration: RegistrationConfig,
}

impl Config {
    pub fn from_toml(text: &str) -> Result<Self> {
        let c: Config = toml::from_str(text).map_err(|e| PipelineError::Config(e.to_string()))?;
        c.registration.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(lidarfuse_core::Error::from)
            .map_err(PipelineError::input(path))?;
        Self::from_toml(&text).map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration serializes")
    }
}
