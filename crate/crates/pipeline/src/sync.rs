//! Grouping of per-sensor streams into frames by timestamp.

use lidarfuse_core::PointCloud;

use crate::error::{PipelineError, Result};

/// One synchronized group: an index into every sensor's stream, `None`
/// where the sensor had no cloud close enough to the anchor.
#[derive(Debug, Clone, PartialEq)]
pub struct SyncGroup {
    /// Anchor timestamp (sensor 0).
    pub time: f64,
    pub members: Vec<Option<usize>>,
}

impl SyncGroup {
    pub fn is_complete(&self) -> bool {
        self.members.iter().all(Option::is_some)
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SyncReport {
    pub groups: Vec<SyncGroup>,
    /// Groups discarded for breaking the time bound or, when partial frames
    /// are not processed, for missing a sensor.
    pub dropped: usize,
    /// Emitted groups that miss at least one sensor.
    pub partial: usize,
    /// Per sensor, clouds that ended up in no emitted group.
    pub unused: Vec<usize>,
}

/// Greedy nearest-timestamp grouping anchored on sensor 0. For every
/// sensor-0 timestamp each other sensor contributes its nearest not yet
/// used cloud within `1 / sample_rate`; a group is kept when the spread of
/// its timestamps stays within that bound.
pub fn synchronize(streams: &[Vec<f64>], sample_rate: f64, process_partial: bool) -> Result<SyncReport> {
    if !(sample_rate > 0.0) {
        return Err(PipelineError::Config(format!("sample rate must be positive, got {sample_rate}")));
    }
    for (i, s) in streams.iter().enumerate() {
        if s.is_empty() {
            return Err(PipelineError::EmptyStream(i));
        }
        if s.windows(2).any(|w| !(w[1] >= w[0])) {
            return Err(PipelineError::NonMonotone(i));
        }
    }
    let n = streams.len();
    if n == 0 {
        return Err(PipelineError::EmptyStream(0));
    }
    let bound = 1.0 / sample_rate;
    let mut next = vec![0usize; n];
    let mut used = vec![0usize; n];
    let mut report = SyncReport::default();

    for (a, &t0) in streams[0].iter().enumerate() {
        let mut members = vec![None; n];
        members[0] = Some(a);
        for j in 1..n {
            let s = &streams[j];
            while next[j] < s.len() && s[next[j]] < t0 - bound {
                next[j] += 1;
            }
            let mut best: Option<usize> = None;
            let mut k = next[j];
            while k < s.len() && s[k] <= t0 + bound {
                if best.is_none_or(|b| (s[k] - t0).abs() < (s[b] - t0).abs()) {
                    best = Some(k);
                }
                k += 1;
            }
            if let Some(b) = best {
                members[j] = Some(b);
                next[j] = b + 1;
            }
        }
        let times: Vec<f64> = members
            .iter()
            .enumerate()
            .filter_map(|(j, m)| m.map(|k| streams[j][k]))
            .collect();
        let spread = times.iter().cloned().fold(f64::NEG_INFINITY, f64::max) - times.iter().cloned().fold(f64::INFINITY, f64::min);
        let group = SyncGroup { time: t0, members };
        if spread > bound {
            log::warn!("group at t = {t0:.4} s spans {spread:.4} s > {bound:.4} s, dropped");
            report.dropped += 1;
            continue;
        }
        if !group.is_complete() {
            if !process_partial {
                log::info!("group at t = {t0:.4} s is incomplete, dropped");
                report.dropped += 1;
                continue;
            }
            report.partial += 1;
        }
        for (j, m) in group.members.iter().enumerate() {
            if m.is_some() {
                used[j] += 1;
            }
        }
        report.groups.push(group);
    }
    report.unused = streams.iter().zip(&used).map(|(s, u)| s.len() - u).collect();
    if report.dropped > 0 || report.partial > 0 {
        log::info!(
            "synchronization: {} groups, {} dropped, {} partial, unused clouds per sensor {:?}",
            report.groups.len(),
            report.dropped,
            report.partial,
            report.unused
        );
    }
    Ok(report)
}

/// A synchronized set of clouds, indexed by sensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub time_step: usize,
    pub clouds: Vec<Option<PointCloud>>,
}

/// [`synchronize`] on in-memory streams; frames are numbered by their
/// position in sensor 0's stream.
pub fn synchronize_clouds(streams: Vec<Vec<PointCloud>>, sample_rate: f64, process_partial: bool) -> Result<(Vec<Frame>, SyncReport)> {
    let times: Vec<Vec<f64>> = streams.iter().map(|s| s.iter().map(|c| c.timestamp).collect()).collect();
    let report = synchronize(&times, sample_rate, process_partial)?;
    let mut slots: Vec<Vec<Option<PointCloud>>> = streams.into_iter().map(|s| s.into_iter().map(Some).collect()).collect();
    let frames = report
        .groups
        .iter()
        .map(|g| Frame {
            time_step: g.members[0].expect("anchor is always present"),
            clouds: g.members.iter().enumerate().map(|(j, m)| m.and_then(|k| slots[j][k].take())).collect(),
        })
        .collect();
    Ok((frames, report))
}
