//! File formats shared by the simulator and the registration tools.
//!
//! - Frame files: little-endian `LFRM`, version, sensor id, timestamp,
//!   point count, then `f32` xyz triples.
//! - Manifest: TOML listing the sample rate, sensors and frame files.
//! - Pose CSV (ground truth and estimates):
//!   `time_step,sensor_id,px,py,pz,qw,qx,qy,qz`, quaternion fields may be empty.
//! - Metrics CSV, summary CSV and ASCII PLY for fused clouds.

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{FrameError, PoseRecord, RuntimeStats};
use crate::geom::{Point3, PointCloud, UnitQuaternion};

pub const FRAME_MAGIC: &[u8; 4] = b"LFRM";
pub const FRAME_VERSION: u16 = 1;
const HEADER_LEN: usize = 4 + 2 + 2 + 8 + 4;

pub fn encode_frame(c: &PointCloud) -> Result<Vec<u8>> {
    let id = u16::try_from(c.sensor_id).map_err(|_| Error::InvalidParameter(format!("sensor id {}", c.sensor_id)))?;
    let n = u32::try_from(c.len()).map_err(|_| Error::InvalidParameter("too many points".into()))?;
    let mut out = Vec::with_capacity(HEADER_LEN + 12 * c.len());
    out.extend_from_slice(FRAME_MAGIC);
    out.extend_from_slice(&FRAME_VERSION.to_le_bytes());
    out.extend_from_slice(&id.to_le_bytes());
    out.extend_from_slice(&c.timestamp.to_le_bytes());
    out.extend_from_slice(&n.to_le_bytes());
    for p in &c.points {
        for v in [p.x, p.y, p.z] {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_frame(bytes: &[u8]) -> Result<PointCloud> {
    if bytes.len() < HEADER_LEN || &bytes[..4] != FRAME_MAGIC {
        return Err(Error::Format("not an LFRM frame".into()));
    }
    let u16_at = |i: usize| u16::from_le_bytes([bytes[i], bytes[i + 1]]);
    let version = u16_at(4);
    if version != FRAME_VERSION {
        return Err(Error::Format(format!("unsupported frame version {version}")));
    }
    let sensor_id = u16_at(6) as usize;
    let timestamp = f64::from_le_bytes(bytes[8..16].try_into().unwrap());
    let n = u32::from_le_bytes(bytes[16..20].try_into().unwrap()) as usize;
    let body = &bytes[HEADER_LEN..];
    if body.len() != 12 * n {
        return Err(Error::Format(format!("frame declares {n} points but holds {} bytes", body.len())));
    }
    let points = body
        .chunks_exact(12)
        .map(|c| {
            let f = |i: usize| f32::from_le_bytes(c[i..i + 4].try_into().unwrap()) as f64;
            Point3::new(f(0), f(4), f(8))
        })
        .collect();
    Ok(PointCloud::new(points, sensor_id, timestamp))
}

pub fn write_frame(path: &Path, c: &PointCloud) -> Result<()> {
    std::fs::write(path, encode_frame(c)?)?;
    Ok(())
}

pub fn read_frame(path: &Path) -> Result<PointCloud> {
    let mut buf = Vec::new();
    File::open(path)?.read_to_end(&mut buf)?;
    decode_frame(&buf)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameEntry {
    pub sensor: usize,
    pub time_step: usize,
    pub timestamp: f64,
    /// Relative to the manifest's directory.
    pub file: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub dataset: String,
    pub sample_rate: f64,
    pub n_sensors: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ground_truth: Option<PathBuf>,
    #[serde(default)]
    pub frames: Vec<FrameEntry>,
}

impl Manifest {
    /// Checks sensor ids and per-sensor timestamp order.
    pub fn validate(&self) -> Result<()> {
        if !(self.sample_rate > 0.0) {
            return Err(Error::Format("sample_rate must be positive".into()));
        }
        let mut last = vec![f64::NEG_INFINITY; self.n_sensors];
        for f in &self.frames {
            let Some(l) = last.get_mut(f.sensor) else {
                return Err(Error::Format(format!("frame for unknown sensor {}", f.sensor)));
            };
            if f.timestamp < *l {
                return Err(Error::Format(format!("timestamps of sensor {} decrease at step {}", f.sensor, f.time_step)));
            }
            *l = f.timestamp;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let m: Manifest = toml::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        m.validate()?;
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = toml::to_string(self).map_err(|e| Error::Format(e.to_string()))?;
        std::fs::write(path, text)?;
        Ok(())
    }

    /// Frame entries of one sensor in timestamp order.
    pub fn stream(&self, sensor: usize) -> Vec<&FrameEntry> {
        let mut v: Vec<&FrameEntry> = self.frames.iter().filter(|f| f.sensor == sensor).collect();
        v.sort_by(|a, b| a.timestamp.total_cmp(&b.timestamp));
        v
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct PoseRow {
    time_step: usize,
    sensor_id: usize,
    px: f64,
    py: f64,
    pz: f64,
    qw: Option<f64>,
    qx: Option<f64>,
    qy: Option<f64>,
    qz: Option<f64>,
}

pub fn write_poses<W: Write>(w: W, records: &[PoseRecord]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    for r in records {
        let q = r.rotation.map(|m| UnitQuaternion::from_matrix(&m));
        out.serialize(PoseRow {
            time_step: r.time_step,
            sensor_id: r.sensor_id,
            px: r.position.x,
            py: r.position.y,
            pz: r.position.z,
            qw: q.map(|q| q.w),
            qx: q.map(|q| q.x),
            qy: q.map(|q| q.y),
            qz: q.map(|q| q.z),
        })?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_poses<R: Read>(r: R) -> Result<Vec<PoseRecord>> {
    let mut rd = csv::Reader::from_reader(r);
    let mut out = Vec::new();
    for row in rd.deserialize() {
        let row: PoseRow = row?;
        let rotation = match (row.qw, row.qx, row.qy, row.qz) {
            (Some(w), Some(x), Some(y), Some(z)) => Some(UnitQuaternion::new(w, x, y, z).to_matrix()),
            (None, None, None, None) => None,
            _ => return Err(Error::Format(format!("partial quaternion at step {}", row.time_step))),
        };
        out.push(PoseRecord {
            time_step: row.time_step,
            sensor_id: row.sensor_id,
            position: Point3::new(row.px, row.py, row.pz),
            rotation,
        });
    }
    Ok(out)
}

pub fn save_poses(path: &Path, records: &[PoseRecord]) -> Result<()> {
    write_poses(BufWriter::new(File::create(path)?), records)
}

pub fn load_poses(path: &Path) -> Result<Vec<PoseRecord>> {
    read_poses(File::open(path)?)
}

#[derive(Debug, Serialize, Deserialize)]
struct MetricsRow {
    time_step: usize,
    sensor_id: usize,
    e_trans_m: f64,
    e_rot_rad: Option<f64>,
    runtime_ms: Option<f64>,
}

/// Per-frame errors joined with the frame runtimes, when known.
pub fn write_metrics<W: Write>(w: W, frames: &[FrameError], runtime: Option<&RuntimeStats>) -> Result<()> {
    let times: std::collections::HashMap<usize, f64> =
        runtime.map(|r| r.per_frame_ms.iter().copied().collect()).unwrap_or_default();
    let mut out = csv::Writer::from_writer(w);
    for f in frames {
        out.serialize(MetricsRow {
            time_step: f.time_step,
            sensor_id: f.sensor_id,
            e_trans_m: f.e_trans,
            e_rot_rad: f.e_rot,
            runtime_ms: times.get(&f.time_step).copied(),
        })?;
    }
    out.flush()?;
    Ok(())
}

/// One row of the accuracy/runtime table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub scenario: String,
    pub voxel_size: f64,
    pub init_runtime_s: f64,
    pub mean_cont_runtime_ms: f64,
    pub avg_rmse_trans_cm: f64,
    pub avg_rmse_rot_deg: Option<f64>,
}

pub fn write_summary<W: Write>(w: W, rows: &[SummaryRow]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    for r in rows {
        out.serialize(r)?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_summary<R: Read>(r: R) -> Result<Vec<SummaryRow>> {
    let mut rd = csv::Reader::from_reader(r);
    rd.deserialize().map(|r| r.map_err(Error::from)).collect()
}

/// Runtimes as `time_step,runtime_ms`, with the initial registration on
/// a first line keyed `init`.
pub fn write_runtimes<W: Write>(mut w: W, r: &RuntimeStats) -> Result<()> {
    writeln!(w, "time_step,runtime_ms")?;
    writeln!(w, "init,{}", r.initial_s * 1e3)?;
    for (n, ms) in &r.per_frame_ms {
        writeln!(w, "{n},{ms}")?;
    }
    Ok(())
}

pub fn read_runtimes<R: Read>(r: R) -> Result<RuntimeStats> {
    let mut rd = csv::Reader::from_reader(r);
    let mut out = RuntimeStats::default();
    for rec in rd.records() {
        let rec = rec?;
        let ms: f64 = rec
            .get(1)
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Format("bad runtime row".into()))?;
        match rec.get(0) {
            Some("init") => out.initial_s = ms / 1e3,
            Some(s) => {
                let n = s.parse().map_err(|_| Error::Format(format!("bad time step {s:?}")))?;
                out.per_frame_ms.push((n, ms));
            }
            None => return Err(Error::Format("bad runtime row".into())),
        }
    }
    Ok(out)
}

/// ASCII PLY with an integer `sensor_id` vertex property.
pub fn write_ply<W: Write>(w: W, points: &[(Point3, usize)]) -> Result<()> {
    let mut w = BufWriter::new(w);
    writeln!(w, "ply\nformat ascii 1.0")?;
    writeln!(w, "element vertex {}", points.len())?;
    writeln!(w, "property float x\nproperty float y\nproperty float z\nproperty int sensor_id\nend_header")?;
    for (p, s) in points {
        writeln!(w, "{} {} {} {}", p.x as f32, p.y as f32, p.z as f32, s)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_ply<R: Read>(mut r: R) -> Result<Vec<(Point3, usize)>> {
    let mut text = String::new();
    r.read_to_string(&mut text)?;
    let mut lines = text.lines();
    let mut n = None;
    for line in lines.by_ref() {
        if let Some(v) = line.strip_prefix("element vertex ") {
            n = v.trim().parse::<usize>().ok();
        }
        if line == "end_header" {
            break;
        }
    }
    let n = n.ok_or_else(|| Error::Format("PLY without vertex count".into()))?;
    let mut out = Vec::with_capacity(n);
    for line in lines.take(n) {
        let f: Vec<&str> = line.split_whitespace().collect();
        let bad = || Error::Format(format!("bad PLY vertex {line:?}"));
        if f.len() != 4 {
            return Err(bad());
        }
        let c = |i: usize| f[i].parse::<f64>().map_err(|_| bad());
        out.push((Point3::new(c(0)?, c(1)?, c(2)?), f[3].parse().map_err(|_| bad())?));
    }
    if out.len() != n {
        return Err(Error::Format("truncated PLY".into()));
    }
    Ok(out)
}
