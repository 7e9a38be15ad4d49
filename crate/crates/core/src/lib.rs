//! Targetless registration and continuous extrinsic tracking for groups of
//! infrastructure LiDARs.
//!
//! The crate is organized along the processing chain:
//!
//! - [`geom`]: SE(3) transforms, quaternions and the point cloud container.
//! - [`preprocess`]: outlier removal, normals, octree and voxel-grid filters.
//! - [`features`]: keypoints, FPFH descriptors, RANSAC and coarse pairwise registration.
//! - [`icp`]: Generalized-ICP refinement.
//! - [`posegraph`]: sliding-window pose graph with Huber-robustified optimization.
//! - [`dynafilter`]: spherical change detection and attenuated background models.
//! - [`eval`]: world alignment and accuracy metrics.
//! - [`io`]: frame files, manifests and CSV records shared by the tools.

pub mod dynafilter;
pub mod error;
pub mod eval;
pub mod features;
pub mod geom;
pub mod icp;
pub mod io;
pub mod kdtree;
pub mod posegraph;
pub mod preprocess;

pub use error::{Error, Result};
pub use geom::{Point3, PointCloud, RigidTransform, UnitQuaternion};
