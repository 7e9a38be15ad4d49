//! Whole-dataset runs: frames from a manifest on disk or straight from a
//! simulated scenario, through the session, into pose records.

use std::path::{Path, PathBuf};

use lidarfuse_core::eval::{PoseRecord, RuntimeStats};
use lidarfuse_core::io::{read_frame, write_ply, Manifest};
use lidarfuse_core::RigidTransform;
use lidarfuse_sim::Scenario;

use crate::config::RegistrationConfig;
use crate::error::{PipelineError, Result};
use crate::session::{fuse, InitialRegistration, Session, StepOutput};
use crate::sync::{synchronize, Frame, SyncReport};

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Write the fused cloud of every `fused_every`-th frame (0 = never).
    pub fused_every: usize,
    pub fused_dir: Option<PathBuf>,
    /// Stop after this many frames.
    pub max_frames: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub poses: Vec<PoseRecord>,
    pub runtimes: RuntimeStats,
    pub sync: SyncReport,
    pub initial: InitialRegistration,
    pub steps: Vec<StepSummary>,
}

/// The parts of a [`StepOutput`] worth keeping for a whole run.
#[derive(Debug, Clone, PartialEq)]
pub struct StepSummary {
    pub time_step: usize,
    pub runtime_ms: f64,
    pub edges_measured: usize,
    pub dynamic_points: Vec<usize>,
}

impl From<&StepOutput> for StepSummary {
    fn from(s: &StepOutput) -> Self {
        Self {
            time_step: s.time_step,
            runtime_ms: s.runtime_ms,
            edges_measured: s.edges_measured,
            dynamic_points: s.dynamic_points.clone(),
        }
    }
}

/// Runs the session over `frames`; the first frame starts it.
pub fn run_frames<I>(frames: I, cfg: &RegistrationConfig, sync: SyncReport, opts: &RunOptions) -> Result<RunOutput>
where
    I: IntoIterator<Item = Result<Frame>>,
{
    let mut it = frames.into_iter();
    let first = it.next().ok_or(PipelineError::EmptyStream(0))??;
    let mut session = Session::start(&first, cfg.clone())?;
    let mut poses = Session::records(first.time_step, &session.initial.poses);
    export_fused(opts, 0, &first, &session.initial.poses)?;
    let mut steps = Vec::new();
    for (count, frame) in it.enumerate() {
        if opts.max_frames.is_some_and(|m| count + 1 >= m) {
            break;
        }
        let frame = frame?;
        let out = session.step(frame.time_step, &frame.clouds)?;
        poses.extend(Session::records(frame.time_step, &out.poses));
        export_fused(opts, count + 1, &frame, &out.poses)?;
        steps.push(StepSummary::from(&out));
        if (count + 1) % 100 == 0 {
            log::info!(
                "frame {} registered, mean {:.1} ms per frame",
                frame.time_step,
                session.runtimes.mean_continuous_ms()
            );
        }
    }
    Ok(RunOutput {
        poses,
        runtimes: session.runtimes.clone(),
        sync,
        initial: session.initial.clone(),
        steps,
    })
}

fn export_fused(opts: &RunOptions, index: usize, frame: &Frame, poses: &[RigidTransform]) -> Result<()> {
    let Some(dir) = &opts.fused_dir else { return Ok(()) };
    if opts.fused_every == 0 || !index.is_multiple_of(opts.fused_every) {
        return Ok(());
    }
    std::fs::create_dir_all(dir).map_err(lidarfuse_core::Error::from)?;
    let path = dir.join(format!("fused_{:06}.ply", frame.time_step));
    let file = std::fs::File::create(&path).map_err(lidarfuse_core::Error::from)?;
    write_ply(std::io::BufWriter::new(file), &fuse(&frame.clouds, poses))?;
    Ok(())
}

/// Registers a dataset described by a manifest. Frame files are read
/// lazily, one synchronized frame at a time.
pub fn run_manifest(manifest_path: &Path, cfg: &RegistrationConfig, opts: &RunOptions) -> Result<RunOutput> {
    let manifest = Manifest::load(manifest_path).map_err(PipelineError::input(manifest_path))?;
    let root = manifest_path.parent().map(Path::to_path_buf).unwrap_or_default();
    let streams: Vec<Vec<_>> = (0..manifest.n_sensors).map(|i| manifest.stream(i)).collect();
    let times: Vec<Vec<f64>> = streams.iter().map(|s| s.iter().map(|e| e.timestamp).collect()).collect();
    let sync = synchronize(&times, manifest.sample_rate, cfg.process_partial_frames)?;
    let frames = sync.groups.iter().map(|g| {
        let anchor = streams[0][g.members[0].expect("anchor is always present")];
        let clouds = g
            .members
            .iter()
            .enumerate()
            .map(|(j, m)| {
                m.map(|k| {
                    let path = root.join(&streams[j][k].file);
                    let mut c = read_frame(&path).map_err(PipelineError::input(&path))?;
                    c.sensor_id = j;
                    Ok(c)
                })
                .transpose()
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Frame {
            time_step: anchor.time_step,
            clouds,
        })
    });
    run_frames(frames, cfg, sync.clone(), opts)
}

/// Registers the first `n_frames` frames of a simulated scenario without
/// touching the disk.
pub fn run_scenario_frames(sc: &Scenario, n_frames: usize, cfg: &RegistrationConfig, opts: &RunOptions) -> Result<RunOutput> {
    let n_frames = n_frames.min(sc.n_frames());
    let times: Vec<Vec<f64>> = (0..sc.n_sensors())
        .map(|i| (0..n_frames).map(|n| sc.timestamp(i, n)).collect())
        .collect();
    let sync = synchronize(&times, sc.config.sample_rate, cfg.process_partial_frames)?;
    if sync.groups.iter().enumerate().any(|(n, g)| g.members.iter().any(|m| *m != Some(n))) {
        return Err(PipelineError::Config("simulated streams did not synchronize one to one".into()));
    }
    let frames = (0..n_frames).map(|n| {
        Ok(Frame {
            time_step: n,
            clouds: sc.frame(n).into_iter().map(Some).collect(),
        })
    });
    run_frames(frames, cfg, sync.clone(), opts)
}
