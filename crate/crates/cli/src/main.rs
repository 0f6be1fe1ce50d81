//! Command-line front end: dataset generation (`simulate`), estimator runs
//! (`run`), trajectory-error evaluation (`eval`) and the offset × seed sweep
//! matrix (`sweep`).
//!
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 estimator
//! divergence.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Deserialize;

use tcvio::dataset::{export_dataset, load_dataset, read_groundtruth_csv};
use tcvio::estimator::Parameterization;
use tcvio::metrics::{rmse_ate_cm, TrajectoryRecord};
use tcvio::pipeline::{
    read_trajectory_csv, run_dataset, run_sweep, summarize_sweep, write_run_outputs,
    write_sweep_outputs, PipelineError, RunOptions, SweepConfig,
};
use tcvio::sim::{NoiseSpec, SimScenario, Simulator};

/// Largest admissible camera-IMU offset magnitude, seconds. Offsets beyond
/// this would put the image instant outside any realistic IMU buffer.
const MAX_ABS_TD_S: f64 = 0.5;

const EXIT_USAGE: u8 = 1;
const EXIT_DATA: u8 = 2;
const EXIT_DIVERGENCE: u8 = 3;

#[derive(Parser)]
#[command(name = "tcvio", about = "Visual-inertial odometry with online camera-IMU time offset calibration", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Shared {
    /// JSON file overriding defaults; explicit flags override the file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// RNG seed for simulated sensor noise.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a simulated dataset directory (imu.csv, frames.csv,
    /// groundtruth.csv, scenario.json).
    Simulate {
        #[command(flatten)]
        shared: Shared,
        /// Trajectory scenario name.
        #[arg(long, default_value = "sinusoid3d")]
        scenario: String,
        /// True camera-IMU time offset, milliseconds.
        #[arg(long, value_name = "MS")]
        offset_ms: Option<f64>,
        /// Pixel observation noise sigma, pixels.
        #[arg(long, value_name = "PX")]
        pixel_noise: Option<f64>,
        /// Trajectory duration, seconds.
        #[arg(long, value_name = "S")]
        duration_s: Option<f64>,
        /// Scale applied to the default IMU noise densities (0 disables IMU
        /// noise).
        #[arg(long, value_name = "SCALE")]
        imu_noise: Option<f64>,
    },
    /// Run the estimator over a dataset directory; writes report.json,
    /// td_trace.csv and est_trajectory.csv.
    Run {
        #[command(flatten)]
        shared: Shared,
        /// Dataset directory produced by `simulate` (or external CSVs in the
        /// same formats).
        #[arg(long)]
        dataset: PathBuf,
        /// Initial time-offset estimate, milliseconds.
        #[arg(long, value_name = "MS")]
        init_td_ms: Option<f64>,
        /// Estimate the time offset online, or hold it at the initial value.
        #[arg(long, value_name = "on|off")]
        calibrate_td: Option<Switch>,
        /// Number of key states in the sliding window.
        #[arg(long)]
        window_size: Option<usize>,
        /// Feature parameterization.
        #[arg(long, value_name = "xyz|invdepth")]
        parameterization: Option<ParamArg>,
    },
    /// Compute the trajectory alignment error between an estimate and ground
    /// truth.
    Eval {
        #[command(flatten)]
        shared: Shared,
        /// Estimated trajectory CSV (t_ns,px,py,pz,qw,qx,qy,qz).
        #[arg(long)]
        est: PathBuf,
        /// Ground-truth CSV (trajectory or groundtruth.csv format).
        #[arg(long)]
        gt: PathBuf,
    },
    /// Run the offset × seed × calibration matrix; writes sweep.csv and
    /// sweep_summary.csv.
    Sweep {
        #[command(flatten)]
        shared: Shared,
        /// Offsets to sweep, milliseconds.
        #[arg(long, value_name = "MS", value_delimiter = ',')]
        offsets_ms: Option<Vec<f64>>,
        /// Noise seeds to sweep.
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        /// Trajectory duration per cell, seconds.
        #[arg(long, value_name = "S")]
        duration_s: Option<f64>,
        /// Pixel observation noise sigma, pixels.
        #[arg(long, value_name = "PX")]
        pixel_noise: Option<f64>,
        /// Cells run in parallel.
        #[arg(long)]
        jobs: Option<usize>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Switch {
    On,
    Off,
}

impl Switch {
    fn as_bool(self) -> bool {
        matches!(self, Switch::On)
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum ParamArg {
    Xyz,
    Invdepth,
}

impl From<ParamArg> for Parameterization {
    fn from(p: ParamArg) -> Self {
        match p {
            ParamArg::Xyz => Parameterization::Xyz,
            ParamArg::Invdepth => Parameterization::InvDepth,
        }
    }
}

/// Optional overrides loaded from `--config`; every field falls back to the
/// built-in default when absent, and explicit flags win over the file.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileConfig {
    offset_ms: Option<f64>,
    pixel_noise: Option<f64>,
    duration_s: Option<f64>,
    imu_noise: Option<f64>,
    init_td_ms: Option<f64>,
    calibrate_td: Option<bool>,
    window_size: Option<usize>,
    parameterization: Option<String>,
    offsets_ms: Option<Vec<f64>>,
    seeds: Option<Vec<u64>>,
    jobs: Option<usize>,
}

#[derive(Debug)]
enum CliError {
    Usage(String),
    Data(String),
    Divergence(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Data(_) => EXIT_DATA,
            CliError::Divergence(_) => EXIT_DIVERGENCE,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Usage(m) | CliError::Data(m) | CliError::Divergence(m) => m,
        }
    }
}

impl From<PipelineError> for CliError {
    fn from(e: PipelineError) -> Self {
        match e {
            PipelineError::Estimator(inner) => CliError::Divergence(inner.to_string()),
            other => CliError::Data(other.to_string()),
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help and version requests are successes; everything else is a
            // usage error.
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    print!("{e}");
                    ExitCode::SUCCESS
                }
                _ => {
                    eprint!("{e}");
                    ExitCode::from(EXIT_USAGE)
                }
            };
        }
    };
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message());
            ExitCode::from(e.code())
        }
    }
}

fn dispatch(cmd: Command) -> Result<(), CliError> {
    match cmd {
        Command::Simulate { shared, scenario, offset_ms, pixel_noise, duration_s, imu_noise } => {
            let cfg = load_file_config(shared.config.as_deref())?;
            cmd_simulate(&shared, &cfg, &scenario, offset_ms, pixel_noise, duration_s, imu_noise)
        }
        Command::Run { shared, dataset, init_td_ms, calibrate_td, window_size, parameterization } => {
            let cfg = load_file_config(shared.config.as_deref())?;
            cmd_run(&shared, &cfg, &dataset, init_td_ms, calibrate_td, window_size, parameterization)
        }
        Command::Eval { shared, est, gt } => cmd_eval(&shared, &est, &gt),
        Command::Sweep { shared, offsets_ms, seeds, duration_s, pixel_noise, jobs } => {
            let cfg = load_file_config(shared.config.as_deref())?;
            cmd_sweep(&shared, &cfg, offsets_ms, seeds, duration_s, pixel_noise, jobs)
        }
    }
}

fn load_file_config(path: Option<&Path>) -> Result<FileConfig, CliError> {
    let Some(path) = path else {
        return Ok(FileConfig::default());
    };
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

fn require_out(shared: &Shared) -> Result<&Path, CliError> {
    shared
        .out
        .as_deref()
        .ok_or_else(|| CliError::Usage("--out is required".to_string()))
}

fn check_offset_ms(offset_ms: f64, flag: &str) -> Result<(), CliError> {
    if !offset_ms.is_finite() || offset_ms.abs() > MAX_ABS_TD_S * 1e3 {
        return Err(CliError::Usage(format!(
            "{flag} {offset_ms} exceeds the |td| sanity bound of {} ms",
            MAX_ABS_TD_S * 1e3
        )));
    }
    Ok(())
}

fn cmd_simulate(
    shared: &Shared,
    cfg: &FileConfig,
    scenario: &str,
    offset_ms: Option<f64>,
    pixel_noise: Option<f64>,
    duration_s: Option<f64>,
    imu_noise: Option<f64>,
) -> Result<(), CliError> {
    if scenario != "sinusoid3d" {
        return Err(CliError::Usage(format!("unknown scenario `{scenario}`; available: sinusoid3d")));
    }
    let out = require_out(shared)?;
    let offset_ms = offset_ms.or(cfg.offset_ms).unwrap_or(0.0);
    check_offset_ms(offset_ms, "--offset-ms")?;
    let pixel_noise = pixel_noise.or(cfg.pixel_noise).unwrap_or(1.0);
    let duration = duration_s.or(cfg.duration_s).unwrap_or(60.0);
    if pixel_noise < 0.0 {
        return Err(CliError::Usage(format!("--pixel-noise {pixel_noise} must be non-negative")));
    }
    if !(duration > 0.0) {
        return Err(CliError::Usage(format!("--duration-s {duration} must be positive")));
    }
    let imu_scale = imu_noise.or(cfg.imu_noise).unwrap_or(1.0);
    if imu_scale < 0.0 {
        return Err(CliError::Usage(format!("--imu-noise {imu_scale} must be non-negative")));
    }
    let seed = shared.seed.unwrap_or(0);
    let mut noise = NoiseSpec { pixel_sigma: pixel_noise, seed, ..NoiseSpec::default() };
    noise.imu.accel_noise_density *= imu_scale;
    noise.imu.gyro_noise_density *= imu_scale;
    noise.imu.accel_random_walk *= imu_scale;
    noise.imu.gyro_random_walk *= imu_scale;
    let scn = SimScenario::default_sinusoid3d(duration, offset_ms * 1e-3, noise);
    let sim = Simulator::new(scn).map_err(|e| CliError::Data(e.to_string()))?;
    export_dataset(&sim, out).map_err(|e| CliError::Data(e.to_string()))?;
    println!("wrote dataset to {}", out.display());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_run(
    shared: &Shared,
    cfg: &FileConfig,
    dataset: &Path,
    init_td_ms: Option<f64>,
    calibrate_td: Option<Switch>,
    window_size: Option<usize>,
    parameterization: Option<ParamArg>,
) -> Result<(), CliError> {
    let out = require_out(shared)?;
    let defaults = RunOptions::default();
    let init_td_ms = init_td_ms.or(cfg.init_td_ms).unwrap_or(defaults.init_td * 1e3);
    check_offset_ms(init_td_ms, "--init-td-ms")?;
    let parameterization = match parameterization {
        Some(p) => p.into(),
        None => match cfg.parameterization.as_deref() {
            Some("xyz") => Parameterization::Xyz,
            Some("invdepth") => Parameterization::InvDepth,
            Some(other) => {
                return Err(CliError::Usage(format!(
                    "config parameterization `{other}` must be xyz or invdepth"
                )))
            }
            None => defaults.parameterization,
        },
    };
    let opt = RunOptions {
        init_td: init_td_ms * 1e-3,
        calibrate_td: calibrate_td
            .map(Switch::as_bool)
            .or(cfg.calibrate_td)
            .unwrap_or(defaults.calibrate_td),
        window_size: window_size.or(cfg.window_size).unwrap_or(defaults.window_size),
        parameterization,
    };
    if opt.window_size < 3 {
        return Err(CliError::Usage(format!(
            "--window-size {} must be at least 3",
            opt.window_size
        )));
    }
    let ds = load_dataset(dataset).map_err(|e| CliError::Data(e.to_string()))?;
    let outcome = run_dataset(&ds, &opt)?;
    std::fs::create_dir_all(out).map_err(|e| CliError::Data(format!("{}: {e}", out.display())))?;
    write_run_outputs(out, &outcome)?;
    println!(
        "final_td_ms {:.4}  ate_rmse_cm {}  frames {}",
        outcome.report.final_td_ms,
        outcome
            .report
            .ate_rmse_cm
            .map(|a| format!("{a:.4}"))
            .unwrap_or_else(|| "n/a".to_string()),
        outcome.report.frames
    );
    Ok(())
}

/// Accept either the estimate format (8 columns) or the ground-truth format
/// (11 columns, trailing velocity) for `--gt`.
fn read_any_trajectory(path: &Path) -> Result<Vec<TrajectoryRecord>, CliError> {
    if let Ok(records) = read_trajectory_csv(path) {
        return Ok(records);
    }
    let gt = read_groundtruth_csv(path).map_err(|e| CliError::Data(e.to_string()))?;
    Ok(gt.into_iter().map(|g| TrajectoryRecord { t: g.t, p: g.p, q: g.q }).collect())
}

fn cmd_eval(shared: &Shared, est: &Path, gt: &Path) -> Result<(), CliError> {
    let est_records = read_trajectory_csv(est)?;
    let gt_records = read_any_trajectory(gt)?;
    let ate = rmse_ate_cm(&est_records, &gt_records).map_err(|e| CliError::Data(e.to_string()))?;
    let report = serde_json::json!({
        "ate_rmse_cm": ate,
        "alignment": "se3_umeyama_no_scale",
        "est_points": est_records.len(),
        "gt_points": gt_records.len(),
    });
    let text = serde_json::to_string_pretty(&report).expect("json serialization");
    println!("{text}");
    if let Some(out) = shared.out.as_deref() {
        std::fs::create_dir_all(out)
            .map_err(|e| CliError::Data(format!("{}: {e}", out.display())))?;
        let path = out.join("eval.json");
        std::fs::write(&path, text + "\n")
            .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    }
    Ok(())
}

fn cmd_sweep(
    shared: &Shared,
    cfg: &FileConfig,
    offsets_ms: Option<Vec<f64>>,
    seeds: Option<Vec<u64>>,
    duration_s: Option<f64>,
    pixel_noise: Option<f64>,
    jobs: Option<usize>,
) -> Result<(), CliError> {
    let out = require_out(shared)?;
    let defaults = SweepConfig::default();
    let sweep = SweepConfig {
        offsets_ms: offsets_ms.or_else(|| cfg.offsets_ms.clone()).unwrap_or(defaults.offsets_ms),
        seeds: seeds.or_else(|| cfg.seeds.clone()).unwrap_or(defaults.seeds),
        duration: duration_s.or(cfg.duration_s).unwrap_or(defaults.duration),
        pixel_sigma: pixel_noise.or(cfg.pixel_noise).unwrap_or(defaults.pixel_sigma),
        jobs: jobs.or(cfg.jobs).unwrap_or(defaults.jobs),
    };
    for &o in &sweep.offsets_ms {
        check_offset_ms(o, "--offsets-ms")?;
    }
    if sweep.offsets_ms.is_empty() || sweep.seeds.is_empty() {
        return Err(CliError::Usage("offsets and seeds must be non-empty".to_string()));
    }
    let rows = run_sweep(&sweep)?;
    std::fs::create_dir_all(out).map_err(|e| CliError::Data(format!("{}: {e}", out.display())))?;
    write_sweep_outputs(out, &rows)?;
    for s in summarize_sweep(&rows) {
        println!(
            "offset {:>5.1} ms  calibrate {:>3}  mean_td {}  mean_ate_cm {}  cells {}",
            s.offset_ms,
            if s.calibrate_td { "on" } else { "off" },
            s.mean_estimated_td_ms
                .map(|v| format!("{v:.3} ms"))
                .unwrap_or_else(|| "n/a".to_string()),
            s.mean_ate_cm.map(|v| format!("{v:.3}")).unwrap_or_else(|| "n/a".to_string()),
            s.cells
        );
    }
    Ok(())
}
