//! Accuracy metrics against ground truth.
//!
//! Estimated poses live in the root sensor's frame at t₀; ground truth lives
//! in the world frame. A single rigid `T_coord` estimated from the first
//! frame's sensor positions maps one onto the other and is held for the run.
//! Rotations are mapped as `R̃ = R_coord · R̂`; right-multiplying by
//! `R_coord⁻¹` leaves a residual for perfect predictions whenever the root
//! sensor is not world-aligned.

use std::collections::{BTreeMap, BTreeSet};

use nalgebra::Matrix3;

use crate::error::{Error, Result};
use crate::features::estimate_transform_svd;
use crate::geom::{rotation_angle, Point3, RigidTransform};

/// Pose of one sensor at one time step.
#[derive(Debug, Clone, PartialEq)]
pub struct PoseRecord {
    pub time_step: usize,
    pub sensor_id: usize,
    pub position: Point3,
    /// `None` when only positions are known (surveyed real-world setups).
    pub rotation: Option<Matrix3<f64>>,
}

impl PoseRecord {
    pub fn from_transform(time_step: usize, sensor_id: usize, t: &RigidTransform) -> Self {
        Self {
            time_step,
            sensor_id,
            position: t.translation,
            rotation: Some(t.rotation),
        }
    }
}

/// Least-squares rigid map from predicted to ground-truth sensor positions.
pub fn estimate_world_alignment(pred: &[Point3], gt: &[Point3]) -> Result<RigidTransform> {
    if pred.len() != gt.len() {
        return Err(Error::InvalidParameter(format!(
            "{} predicted vs {} ground-truth positions",
            pred.len(),
            gt.len()
        )));
    }
    if pred.len() < 3 {
        return Err(Error::AlignmentUnderdetermined);
    }
    let pairs: Vec<(Point3, Point3)> = pred.iter().copied().zip(gt.iter().copied()).collect();
    estimate_transform_svd(&pairs).map_err(|e| match e {
        Error::Degenerate(_) => Error::AlignmentUnderdetermined,
        e => e,
    })
}

pub fn trans_error(pred: &Point3, gt: &Point3) -> f64 {
    (pred - gt).norm()
}

pub fn rot_error(pred: &Matrix3<f64>, gt: &Matrix3<f64>) -> f64 {
    rotation_angle(&(pred * gt.transpose()))
}

pub fn rmse(errors: &[f64]) -> Result<f64> {
    if errors.is_empty() {
        return Err(Error::Empty("rmse of an empty list".into()));
    }
    Ok((errors.iter().map(|e| e * e).sum::<f64>() / errors.len() as f64).sqrt())
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrameError {
    pub time_step: usize,
    pub sensor_id: usize,
    pub e_trans: f64,
    pub e_rot: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SensorSummary {
    pub sensor_id: usize,
    pub frames: usize,
    pub rmse_trans: f64,
    pub rmse_rot: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub t_coord: RigidTransform,
    pub frames: Vec<FrameError>,
    pub sensors: Vec<SensorSummary>,
    /// Mean of per-sensor RMSE values, meters.
    pub avg_rmse_trans: f64,
    /// Radians; `None` when ground truth carries no orientation.
    pub avg_rmse_rot: Option<f64>,
    /// Ground-truth records without a matching prediction.
    pub missing: usize,
}

/// Aligns predictions to ground truth and computes per-frame errors and
/// per-sensor RMSE. The alignment uses the earliest time step at which
/// both streams cover the same ≥ 3 sensors.
pub fn evaluate_run(pred: &[PoseRecord], gt: &[PoseRecord]) -> Result<MetricsReport> {
    let pred_map: BTreeMap<(usize, usize), &PoseRecord> =
        pred.iter().map(|r| ((r.time_step, r.sensor_id), r)).collect();
    let gt_map: BTreeMap<(usize, usize), &PoseRecord> = gt.iter().map(|r| ((r.time_step, r.sensor_id), r)).collect();
    if gt_map.is_empty() {
        return Err(Error::Empty("ground truth".into()));
    }

    let steps: BTreeSet<usize> = gt_map.keys().map(|k| k.0).collect();
    let mut t_coord = None;
    for &n in &steps {
        let mut ps = Vec::new();
        let mut gs = Vec::new();
        for ((_, s), g) in gt_map.range((n, 0)..=(n, usize::MAX)) {
            if let Some(p) = pred_map.get(&(n, *s)) {
                ps.push(p.position);
                gs.push(g.position);
            }
        }
        if ps.len() >= 3 {
            t_coord = Some(estimate_world_alignment(&ps, &gs)?);
            break;
        }
    }
    let t_coord = t_coord.ok_or(Error::AlignmentUnderdetermined)?;

    let mut frames = Vec::new();
    let mut missing = 0;
    for (key, g) in &gt_map {
        let Some(p) = pred_map.get(key) else {
            missing += 1;
            continue;
        };
        let position = t_coord.transform_point(&p.position);
        let e_rot = match (p.rotation, g.rotation) {
            (Some(rp), Some(rg)) => Some(rot_error(&(t_coord.rotation * rp), &rg)),
            _ => None,
        };
        frames.push(FrameError {
            time_step: key.0,
            sensor_id: key.1,
            e_trans: trans_error(&position, &g.position),
            e_rot,
        });
    }
    if frames.is_empty() {
        return Err(Error::Empty("no prediction matches the ground truth".into()));
    }

    let ids: BTreeSet<usize> = frames.iter().map(|f| f.sensor_id).collect();
    let mut sensors = Vec::new();
    for id in ids {
        let et: Vec<f64> = frames.iter().filter(|f| f.sensor_id == id).map(|f| f.e_trans).collect();
        let er: Option<Vec<f64>> = frames.iter().filter(|f| f.sensor_id == id).map(|f| f.e_rot).collect();
        let rmse_trans = rmse(&et)?;
        let mean = et.iter().sum::<f64>() / et.len() as f64;
        assert!(rmse_trans >= mean * (1.0 - 1e-12), "rmse below mean error");
        sensors.push(SensorSummary {
            sensor_id: id,
            frames: et.len(),
            rmse_trans,
            rmse_rot: er.map(|v| rmse(&v)).transpose()?,
        });
    }
    let k = sensors.len() as f64;
    let avg_rmse_trans = sensors.iter().map(|s| s.rmse_trans).sum::<f64>() / k;
    let avg_rmse_rot = sensors
        .iter()
        .map(|s| s.rmse_rot)
        .collect::<Option<Vec<f64>>>()
        .map(|v| v.iter().sum::<f64>() / k);
    Ok(MetricsReport {
        t_coord,
        frames,
        sensors,
        avg_rmse_trans,
        avg_rmse_rot,
        missing,
    })
}

/// Wall-clock timings of one registration run.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RuntimeStats {
    pub initial_s: f64,
    /// `(time_step, milliseconds)` for every continuous frame.
    pub per_frame_ms: Vec<(usize, f64)>,
}

impl RuntimeStats {
    pub fn mean_continuous_ms(&self) -> f64 {
        if self.per_frame_ms.is_empty() {
            return 0.0;
        }
        self.per_frame_ms.iter().map(|r| r.1).sum::<f64>() / self.per_frame_ms.len() as f64
    }
}
