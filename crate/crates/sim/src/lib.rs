//! Procedural multi-LiDAR street scenarios with swaying sensor poles and
//! known ground-truth poses.

pub mod lidar;
pub mod pendulum;
pub mod scenario;
pub mod scene;

pub use lidar::{simulate_lidar, LidarModel};
pub use pendulum::{integrate_pendulum, pendulum_derivative, pendulum_to_pose_offset, PendulumState};
pub use scenario::{run_scenario, Scenario, ScenarioConfig};
pub use scene::{generate_scene, Layout, Scene, TrafficConfig};
