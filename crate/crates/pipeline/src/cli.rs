//! The `lidarfuse` command line tool.

use std::ffi::OsString;
use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use lidarfuse_core::eval::{evaluate_run, RuntimeStats};
use lidarfuse_core::io::{load_poses, read_runtimes, read_summary, save_poses, write_metrics, write_runtimes, write_summary, SummaryRow};
use lidarfuse_sim::run_scenario;

use crate::config::Config;
use crate::error::{PipelineError, Result};
use crate::run::{run_manifest, RunOptions};

#[derive(Debug, Parser)]
#[command(name = "lidarfuse", version, about = "Extrinsic registration of multiple infrastructure LiDARs")]
pub struct Cli {
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a simulated dataset.
    Simulate(SimulateArgs),
    /// Register a dataset and write poses, runtimes and fused clouds.
    Register(RegisterArgs),
    /// Compare estimated poses with ground truth.
    Evaluate(EvaluateArgs),
    /// Print summary CSV files as one table.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// Configuration file; its `[scenario]` table is used.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Length of the simulation, seconds.
    #[arg(long)]
    pub duration: Option<f64>,
    #[arg(long, default_value = "dataset")]
    pub output: PathBuf,
}

#[derive(Debug, Args)]
pub struct RegisterArgs {
    /// Dataset manifest.
    pub manifest: PathBuf,
    /// Configuration file; its `[registration]` table is used.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub voxel_size: Option<f64>,
    /// Sliding window size k_w.
    #[arg(long)]
    pub window: Option<usize>,
    #[arg(long)]
    pub no_dynamic_filter: bool,
    /// Seed of the coarse registration RANSAC.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Export the fused cloud of every n-th frame (0 = none).
    #[arg(long, default_value_t = 100)]
    pub fused_every: usize,
    /// Stop after this many frames.
    #[arg(long)]
    pub max_frames: Option<usize>,
    #[arg(long, default_value = "registration")]
    pub output: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// Estimated poses (CSV).
    #[arg(long)]
    pub poses: PathBuf,
    /// Ground-truth poses (CSV).
    #[arg(long)]
    pub ground_truth: PathBuf,
    /// Runtimes written by `register`.
    #[arg(long)]
    pub runtimes: Option<PathBuf>,
    /// Scenario name for the summary row.
    #[arg(long, default_value = "dataset")]
    pub scenario: String,
    /// Voxel size for the summary row.
    #[arg(long)]
    pub voxel_size: Option<f64>,
    #[arg(long, default_value = "evaluation")]
    pub output: PathBuf,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Summary CSV files written by `evaluate`.
    #[arg(required = true)]
    pub summaries: Vec<PathBuf>,
}

/// Parses `args` (program name first) and runs the command. Returns the
/// process exit code: 0 on success, 1 on usage errors, 2 on failures.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            2
        }
    }
}

pub fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        // Fails only when a global pool exists already, e.g. in tests.
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            log::warn!("thread count not applied: {e}");
        }
    }
    match cli.command {
        Command::Simulate(a) => simulate(&a),
        Command::Register(a) => register(&a),
        Command::Evaluate(a) => evaluate(&a),
        Command::Report(a) => report(&a),
    }
}

fn load_config(path: Option<&Path>) -> Result<Config> {
    path.map_or_else(|| Ok(Config::default()), Config::load)
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).map_err(lidarfuse_core::Error::from)?))
}

fn simulate(a: &SimulateArgs) -> Result<()> {
    let mut sc = load_config(a.config.as_deref())?.scenario;
    if let Some(s) = a.seed {
        sc.seed = s;
    }
    if let Some(d) = a.duration {
        sc.duration = d;
    }
    sc.validate()?;
    let manifest = run_scenario(&sc, &a.output)?;
    println!("{}", manifest.display());
    Ok(())
}

fn register(a: &RegisterArgs) -> Result<()> {
    let mut cfg = load_config(a.config.as_deref())?.registration;
    if let Some(v) = a.voxel_size {
        cfg.voxel_size = v;
    }
    if let Some(k) = a.window {
        cfg.window.k_w = k;
    }
    if a.no_dynamic_filter {
        cfg.dynamic_filter = false;
    }
    if let Some(s) = a.seed {
        let mut coarse = cfg.coarse_params();
        coarse.ransac.seed = s;
        cfg.coarse = Some(coarse);
    }
    cfg.validate()?;
    std::fs::create_dir_all(&a.output).map_err(lidarfuse_core::Error::from)?;
    let opts = RunOptions {
        fused_every: a.fused_every,
        fused_dir: Some(a.output.join("fused")),
        max_frames: a.max_frames,
    };
    let out = run_manifest(&a.manifest, &cfg, &opts)?;
    save_poses(&a.output.join("poses.csv"), &out.poses)?;
    write_runtimes(create(&a.output.join("runtimes.csv"))?, &out.runtimes)?;
    let effective = Config {
        registration: cfg,
        ..Config::default()
    };
    std::fs::write(a.output.join("registration.toml"), effective.to_toml()).map_err(lidarfuse_core::Error::from)?;
    println!(
        "{} frames, initial registration {:.2} s, mean {:.1} ms per frame",
        out.steps.len() + 1,
        out.runtimes.initial_s,
        out.runtimes.mean_continuous_ms()
    );
    Ok(())
}

fn evaluate(a: &EvaluateArgs) -> Result<()> {
    let pred = load_poses(&a.poses).map_err(PipelineError::input(&a.poses))?;
    let gt = load_poses(&a.ground_truth).map_err(PipelineError::input(&a.ground_truth))?;
    let report = evaluate_run(&pred, &gt)?;
    let runtimes: Option<RuntimeStats> = match &a.runtimes {
        Some(p) => Some(
            File::open(p)
                .map_err(lidarfuse_core::Error::from)
                .and_then(read_runtimes)
                .map_err(PipelineError::input(p))?,
        ),
        None => None,
    };
    std::fs::create_dir_all(&a.output).map_err(lidarfuse_core::Error::from)?;
    write_metrics(create(&a.output.join("metrics.csv"))?, &report.frames, runtimes.as_ref())?;
    let row = SummaryRow {
        scenario: a.scenario.clone(),
        voxel_size: a.voxel_size.unwrap_or(f64::NAN),
        init_runtime_s: runtimes.as_ref().map_or(f64::NAN, |r| r.initial_s),
        mean_cont_runtime_ms: runtimes.as_ref().map_or(f64::NAN, |r| r.mean_continuous_ms()),
        avg_rmse_trans_cm: report.avg_rmse_trans * 100.0,
        avg_rmse_rot_deg: report.avg_rmse_rot.map(f64::to_degrees),
    };
    write_summary(create(&a.output.join("summary.csv"))?, std::slice::from_ref(&row))?;
    for s in &report.sensors {
        println!(
            "sensor {}: {} frames, RMSE {:.2} cm, {}",
            s.sensor_id,
            s.frames,
            s.rmse_trans * 100.0,
            s.rmse_rot.map_or("no rotation".into(), |r| format!("{:.3}°", r.to_degrees()))
        );
    }
    print!("{}", format_table(&[row]));
    if report.missing > 0 {
        log::warn!("{} ground-truth records have no estimate", report.missing);
    }
    Ok(())
}

fn report(a: &ReportArgs) -> Result<()> {
    let mut rows = Vec::new();
    for p in &a.summaries {
        let f = File::open(p).map_err(lidarfuse_core::Error::from).map_err(PipelineError::input(p))?;
        rows.extend(read_summary(f).map_err(PipelineError::input(p))?);
    }
    print!("{}", format_table(&rows));
    Ok(())
}

/// Accuracy and runtime per scenario and voxel size.
pub fn format_table(rows: &[SummaryRow]) -> String {
    let mut s = format!(
        "{:<16} {:>8} {:>10} {:>12} {:>12} {:>12}\n",
        "scenario", "voxel m", "init s", "cont ms", "trans cm", "rot deg"
    );
    for r in rows {
        let rot = r.avg_rmse_rot_deg.map_or("-".into(), |v| format!("{v:.3}"));
        s += &format!(
            "{:<16} {:>8.1} {:>10.2} {:>12.1} {:>12.2} {:>12}\n",
            r.scenario, r.voxel_size, r.init_runtime_s, r.mean_cont_runtime_ms, r.avg_rmse_trans_cm, rot
        );
    }
    s
}
