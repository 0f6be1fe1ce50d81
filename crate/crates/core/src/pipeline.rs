//! End-to-end evaluation: drive the estimator over a dataset, emit a run
//! report with the time-offset trace and trajectory error, and run the
//! offset × seed sweep matrix.
//!
//! Outputs per run: `report.json` (final offset, ATE, config echo, wall
//! time), `td_trace.csv` (`t_s,td_ms,cost`, one row per processed frame) and
//! `est_trajectory.csv` (`t_ns,px,py,pz,qw,qx,qy,qz`). All files are written
//! atomically (temp file + rename) and their float formatting is the
//! shortest round-trip representation, so identical runs produce identical
//! bytes.

use std::fs;
use std::io;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{sec_to_ns, Dataset, GroundTruthRecord};
use crate::estimator::{
    BootstrapState, Estimator, EstimatorConfig, EstimatorError, EstimatorOutput, FrameInput,
    Parameterization,
};
use crate::manifold::{Quat, Vec3};
use crate::metrics::{rmse_ate_cm, MetricsError, TrajectoryRecord};
use crate::preintegration::ImuNoise;
use crate::sim::{NoiseSpec, SimError, SimScenario, Simulator};

/// IMU lookahead fed before each frame, seconds. Covers the largest
/// admissible time offset plus the preintegration span to the key state.
const IMU_LOOKAHEAD: f64 = 0.15;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Data(#[from] crate::dataset::DataError),
    #[error(transparent)]
    Estimator(#[from] EstimatorError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
    #[error("{0}")]
    Internal(String),
}

fn io_err(path: &Path, source: io::Error) -> PipelineError {
    PipelineError::Io { path: path.display().to_string(), source }
}

/// Per-run options layered over the dataset's scenario description.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunOptions {
    /// Initial time-offset estimate, seconds.
    pub init_td: f64,
    pub calibrate_td: bool,
    pub window_size: usize,
    pub parameterization: Parameterization,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self {
            init_td: 0.0,
            calibrate_td: true,
            window_size: 10,
            parameterization: Parameterization::InvDepth,
        }
    }
}

/// One row of the offset trace: image time, current estimate, window cost.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TdTracePoint {
    pub t_s: f64,
    pub td_ms: f64,
    pub cost: f64,
}

/// Scalar echo of the estimator configuration actually used.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConfigEcho {
    pub window_size: usize,
    pub parameterization: Parameterization,
    pub calibrate_td: bool,
    pub init_td_ms: f64,
    pub pixel_sigma: f64,
    pub huber_threshold: f64,
    pub max_obs_per_frame: usize,
    pub solver_max_iters: usize,
    pub solver_cost_tol: f64,
}

impl ConfigEcho {
    fn from_config(cfg: &EstimatorConfig) -> Self {
        Self {
            window_size: cfg.window_size,
            parameterization: cfg.parameterization,
            calibrate_td: cfg.calibrate_td,
            init_td_ms: cfg.init_td * 1e3,
            pixel_sigma: cfg.pixel_sigma,
            huber_threshold: cfg.huber_threshold,
            max_obs_per_frame: cfg.max_obs_per_frame,
            solver_max_iters: cfg.solver.max_iters,
            solver_cost_tol: cfg.solver.cost_tol,
        }
    }
}

/// Summary of one estimator run; serialized as `report.json`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunReport {
    pub final_td_ms: f64,
    /// RMSE absolute trajectory error after alignment; absent without enough
    /// ground-truth overlap.
    pub ate_rmse_cm: Option<f64>,
    /// Alignment used for the ATE, recorded for transparency.
    pub alignment: String,
    pub frames: usize,
    pub config: ConfigEcho,
    pub wall_time_s: f64,
}

/// Everything produced by one run.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub report: RunReport,
    pub trace: Vec<TdTracePoint>,
    pub trajectory: Vec<TrajectoryRecord>,
}

/// Estimator configuration derived from the dataset's scenario (if present)
/// with the per-run options applied.
pub fn estimator_config(ds: &Dataset, opt: &RunOptions) -> EstimatorConfig {
    let mut cfg = EstimatorConfig {
        window_size: opt.window_size,
        parameterization: opt.parameterization,
        calibrate_td: opt.calibrate_td,
        init_td: opt.init_td,
        ..EstimatorConfig::default()
    };
    if let Some(scn) = &ds.scenario {
        // Whitening floor keeps noiseless datasets from collapsing σ to 0.
        cfg.pixel_sigma = scn.noise.pixel_sigma.max(0.5);
        cfg.imu_noise = scn.noise.imu;
        cfg.extrinsics = scn.extrinsics();
        cfg.intrinsics = scn.intrinsics;
    }
    cfg
}

/// Bootstrap from ground truth interpolated at the first key-state instant
/// (first image time plus the initial offset); identity at origin without
/// ground truth.
pub fn bootstrap(ds: &Dataset, t_key: f64) -> BootstrapState {
    let gt = &ds.ground_truth;
    let zero = BootstrapState {
        q: Quat::identity(),
        p: Vec3::zeros(),
        v: Vec3::zeros(),
        b_a: Vec3::zeros(),
        b_g: Vec3::zeros(),
    };
    let (Some(first), Some(last)) = (gt.first(), gt.last()) else {
        return zero;
    };
    let from = |g: &GroundTruthRecord| BootstrapState {
        q: g.q,
        p: g.p,
        v: g.v,
        b_a: Vec3::zeros(),
        b_g: Vec3::zeros(),
    };
    if t_key <= first.t {
        return from(first);
    }
    if t_key >= last.t {
        return from(last);
    }
    let i = gt.partition_point(|g| g.t < t_key);
    let (a, b) = (&gt[i - 1], &gt[i]);
    let alpha = (t_key - a.t) / (b.t - a.t);
    BootstrapState {
        q: a.q.slerp(&b.q, alpha),
        p: a.p * (1.0 - alpha) + b.p * alpha,
        v: a.v * (1.0 - alpha) + b.v * alpha,
        b_a: Vec3::zeros(),
        b_g: Vec3::zeros(),
    }
}

fn trace_point(out: &EstimatorOutput) -> TdTracePoint {
    TdTracePoint {
        t_s: out.t_image,
        td_ms: out.td * 1e3,
        cost: out.solve.as_ref().map(|s| s.final_cost).unwrap_or(0.0),
    }
}

/// Run the estimator over a dataset: IMU is fed ahead of each frame, every
/// frame produces one trace row and one trajectory record (the newest key
/// state, stamped on the IMU time axis).
pub fn run_dataset(ds: &Dataset, opt: &RunOptions) -> Result<RunOutcome, PipelineError> {
    let t0 = Instant::now();
    let cfg = estimator_config(ds, opt);
    let echo = ConfigEcho::from_config(&cfg);
    let t_key0 = ds.frames.first().map(|f| f.t_image + opt.init_td).unwrap_or(0.0);
    let mut est = Estimator::new(cfg, bootstrap(ds, t_key0));

    let mut trace = Vec::with_capacity(ds.frames.len());
    let mut trajectory = Vec::with_capacity(ds.frames.len());
    let mut imu_iter = ds.imu.iter().peekable();
    for f in &ds.frames {
        while let Some(s) = imu_iter.peek() {
            if s.t <= f.t_image + IMU_LOOKAHEAD {
                est.process_imu(**s)?;
                imu_iter.next();
            } else {
                break;
            }
        }
        let input = FrameInput { t_image: f.t_image, tracks: f.observations.clone() };
        let out = est.process_frame(&input)?;
        trajectory.push(TrajectoryRecord {
            t: out.state.t_stamp,
            p: out.state.p,
            q: out.state.q,
        });
        trace.push(trace_point(&out));
    }

    let gt: Vec<TrajectoryRecord> = ds
        .ground_truth
        .iter()
        .map(|g| TrajectoryRecord { t: g.t, p: g.p, q: g.q })
        .collect();
    let ate_rmse_cm = rmse_ate_cm(&trajectory, &gt).ok();

    let final_td_ms = trace.last().map(|p| p.td_ms).unwrap_or(opt.init_td * 1e3);
    Ok(RunOutcome {
        report: RunReport {
            final_td_ms,
            ate_rmse_cm,
            alignment: "se3_umeyama_no_scale".to_string(),
            frames: trace.len(),
            config: echo,
            wall_time_s: t0.elapsed().as_secs_f64(),
        },
        trace,
        trajectory,
    })
}

/// Build an in-memory dataset from a simulator instance.
pub fn dataset_from_sim(sim: &Simulator) -> Result<Dataset, PipelineError> {
    let ground_truth = sim
        .ground_truth()?
        .into_iter()
        .map(|(t, s)| GroundTruthRecord { t, p: s.p, q: s.q, v: s.v })
        .collect();
    Ok(Dataset {
        imu: sim.synth_imu()?,
        frames: sim.synth_frames()?,
        ground_truth,
        scenario: Some(sim.scenario().clone()),
    })
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), PipelineError> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(|e| io_err(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| io_err(path, e))
}

fn csv_bytes<T: Serialize>(rows: &[T]) -> Result<Vec<u8>, PipelineError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for row in rows {
        w.serialize(row).map_err(|e| PipelineError::Internal(e.to_string()))?;
    }
    w.into_inner().map_err(|e| PipelineError::Internal(e.to_string()))
}

#[derive(Debug, Serialize, Deserialize)]
struct EstRow {
    t_ns: i64,
    px: f64,
    py: f64,
    pz: f64,
    qw: f64,
    qx: f64,
    qy: f64,
    qz: f64,
}

/// Write `report.json`, `td_trace.csv` and `est_trajectory.csv` into `dir`.
pub fn write_run_outputs(dir: &Path, out: &RunOutcome) -> Result<(), PipelineError> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    let report = serde_json::to_vec_pretty(&out.report)
        .map_err(|e| PipelineError::Internal(e.to_string()))?;
    write_atomic(&dir.join("report.json"), &report)?;
    write_atomic(&dir.join("td_trace.csv"), &csv_bytes(&out.trace)?)?;
    let rows: Vec<EstRow> = out
        .trajectory
        .iter()
        .map(|r| EstRow {
            t_ns: sec_to_ns(r.t),
            px: r.p.x,
            py: r.p.y,
            pz: r.p.z,
            qw: r.q.w,
            qx: r.q.i,
            qy: r.q.j,
            qz: r.q.k,
        })
        .collect();
    write_atomic(&dir.join("est_trajectory.csv"), &csv_bytes(&rows)?)
}

/// Read an `est_trajectory.csv` back into trajectory records.
pub fn read_trajectory_csv(path: &Path) -> Result<Vec<TrajectoryRecord>, PipelineError> {
    let mut r = csv::Reader::from_path(path)
        .map_err(|e| PipelineError::Internal(format!("{}: {e}", path.display())))?;
    let mut out = Vec::new();
    for row in r.deserialize::<EstRow>() {
        let row = row.map_err(|e| PipelineError::Internal(format!("{}: {e}", path.display())))?;
        out.push(TrajectoryRecord {
            t: crate::dataset::ns_to_sec(row.t_ns),
            p: Vec3::new(row.px, row.py, row.pz),
            q: Quat::from_quaternion(nalgebra::Quaternion::new(row.qw, row.qx, row.qy, row.qz)),
        });
    }
    Ok(out)
}

/// Sweep matrix description: every offset × seed × calibrate-on/off cell is
/// one 60 s simulated run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepConfig {
    pub offsets_ms: Vec<f64>,
    pub seeds: Vec<u64>,
    pub duration: f64,
    pub pixel_sigma: f64,
    /// Worker threads; 1 = fully serial.
    pub jobs: usize,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            offsets_ms: vec![20.0, 40.0, 60.0],
            seeds: vec![1, 2, 3],
            duration: 60.0,
            pixel_sigma: 1.0,
            jobs: 1,
        }
    }
}

/// One sweep cell result; failed cells carry the error and keep the table.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepRow {
    pub scenario: String,
    pub offset_ms: f64,
    pub seed: u64,
    pub calibrate_td: bool,
    pub estimated_td_ms: Option<f64>,
    pub ate_cm: Option<f64>,
    pub error: Option<String>,
}

/// Per-offset, per-mode means over seeds (failed cells excluded).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepSummaryRow {
    pub scenario: String,
    pub offset_ms: f64,
    pub calibrate_td: bool,
    pub mean_estimated_td_ms: Option<f64>,
    pub mean_ate_cm: Option<f64>,
    pub cells: usize,
}

fn run_sweep_cell(offset_ms: f64, seed: u64, calibrate: bool, cfg: &SweepConfig) -> SweepRow {
    let mut row = SweepRow {
        scenario: "sinusoid3d".to_string(),
        offset_ms,
        seed,
        calibrate_td: calibrate,
        estimated_td_ms: None,
        ate_cm: None,
        error: None,
    };
    let noise = NoiseSpec { imu: ImuNoise::default(), pixel_sigma: cfg.pixel_sigma, seed };
    let result = Simulator::new(SimScenario::default_sinusoid3d(
        cfg.duration,
        offset_ms * 1e-3,
        noise,
    ))
    .map_err(PipelineError::from)
    .and_then(|sim| dataset_from_sim(&sim))
    .and_then(|ds| {
        run_dataset(&ds, &RunOptions { calibrate_td: calibrate, ..RunOptions::default() })
    });
    match result {
        Ok(out) => {
            row.estimated_td_ms = Some(out.report.final_td_ms);
            row.ate_cm = out.report.ate_rmse_cm;
        }
        Err(e) => row.error = Some(e.to_string()),
    }
    row
}

/// Run the full sweep matrix; cells run in parallel up to `jobs` workers and
/// failures are recorded per cell without aborting the table.
pub fn run_sweep(cfg: &SweepConfig) -> Result<Vec<SweepRow>, PipelineError> {
    let cells: Vec<(f64, u64, bool)> = cfg
        .offsets_ms
        .iter()
        .flat_map(|&o| {
            cfg.seeds
                .iter()
                .flat_map(move |&s| [(o, s, true), (o, s, false)])
        })
        .collect();
    if cfg.jobs <= 1 {
        return Ok(cells
            .iter()
            .map(|&(o, s, c)| run_sweep_cell(o, s, c, cfg))
            .collect());
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.jobs)
        .build()
        .map_err(|e| PipelineError::Internal(e.to_string()))?;
    use rayon::prelude::*;
    Ok(pool.install(|| {
        cells
            .par_iter()
            .map(|&(o, s, c)| run_sweep_cell(o, s, c, cfg))
            .collect()
    }))
}

/// Per-offset means over seeds, split by calibration mode.
pub fn summarize_sweep(rows: &[SweepRow]) -> Vec<SweepSummaryRow> {
    let mut keys: Vec<(f64, bool)> = Vec::new();
    for r in rows {
        if !keys.contains(&(r.offset_ms, r.calibrate_td)) {
            keys.push((r.offset_ms, r.calibrate_td));
        }
    }
    keys.iter()
        .map(|&(offset_ms, calibrate_td)| {
            let group: Vec<&SweepRow> = rows
                .iter()
                .filter(|r| r.offset_ms == offset_ms && r.calibrate_td == calibrate_td)
                .collect();
            let mean = |vals: Vec<f64>| {
                if vals.is_empty() {
                    None
                } else {
                    Some(vals.iter().sum::<f64>() / vals.len() as f64)
                }
            };
            SweepSummaryRow {
                scenario: "sinusoid3d".to_string(),
                offset_ms,
                calibrate_td,
                mean_estimated_td_ms: mean(
                    group.iter().filter_map(|r| r.estimated_td_ms).collect(),
                ),
                mean_ate_cm: mean(group.iter().filter_map(|r| r.ate_cm).collect()),
                cells: group.len(),
            }
        })
        .collect()
}

/// Write `sweep.csv` and `sweep_summary.csv` into `dir`.
pub fn write_sweep_outputs(dir: &Path, rows: &[SweepRow]) -> Result<(), PipelineError> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    write_atomic(&dir.join("sweep.csv"), &csv_bytes(rows)?)?;
    write_atomic(&dir.join("sweep_summary.csv"), &csv_bytes(&summarize_sweep(rows))?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_sim(true_td: f64, noise: NoiseSpec) -> Simulator {
        Simulator::new(SimScenario::default_sinusoid3d(12.0, true_td, noise)).unwrap()
    }

    #[test]
    fn run_produces_one_trace_row_per_frame() {
        let sim = small_sim(0.01, NoiseSpec::noiseless(3));
        let ds = dataset_from_sim(&sim).unwrap();
        let out = run_dataset(&ds, &RunOptions { init_td: 0.01, ..RunOptions::default() }).unwrap();
        assert_eq!(out.trace.len(), ds.frames.len());
        assert_eq!(out.trajectory.len(), ds.frames.len());
        assert_eq!(out.report.frames, ds.frames.len());
        assert!(out.report.ate_rmse_cm.is_some());
    }

    #[test]
    fn matched_offset_noise_free_run_is_tight() {
        let sim = small_sim(0.01, NoiseSpec::noiseless(3));
        let ds = dataset_from_sim(&sim).unwrap();
        let out = run_dataset(&ds, &RunOptions { init_td: 0.01, ..RunOptions::default() }).unwrap();
        assert!((out.report.final_td_ms - 10.0).abs() < 0.1, "td {}", out.report.final_td_ms);
        let ate = out.report.ate_rmse_cm.unwrap();
        assert!(ate < 0.1, "ate {ate} cm");
    }

    #[test]
    fn outputs_round_trip_through_files() {
        let sim = small_sim(0.0, NoiseSpec::noiseless(4));
        let ds = dataset_from_sim(&sim).unwrap();
        let out = run_dataset(&ds, &RunOptions::default()).unwrap();
        let dir = std::env::temp_dir().join("tcvio_pipeline_roundtrip");
        let _ = fs::remove_dir_all(&dir);
        write_run_outputs(&dir, &out).unwrap();
        let traj = read_trajectory_csv(&dir.join("est_trajectory.csv")).unwrap();
        assert_eq!(traj.len(), out.trajectory.len());
        for (a, b) in traj.iter().zip(&out.trajectory) {
            assert_eq!(a.p, b.p);
        }
        let report: RunReport =
            serde_json::from_slice(&fs::read(dir.join("report.json")).unwrap()).unwrap();
        assert_eq!(report.final_td_ms, out.report.final_td_ms);
        let _ = fs::remove_dir_all(&dir);
    }

    #[test]
    fn repeated_runs_are_byte_identical() {
        let sim = small_sim(0.02, NoiseSpec { imu: ImuNoise::default(), pixel_sigma: 1.0, seed: 9 });
        let ds = dataset_from_sim(&sim).unwrap();
        let a = run_dataset(&ds, &RunOptions::default()).unwrap();
        let b = run_dataset(&ds, &RunOptions::default()).unwrap();
        assert_eq!(csv_bytes(&a.trace).unwrap(), csv_bytes(&b.trace).unwrap());
        assert_eq!(a.report.final_td_ms.to_bits(), b.report.final_td_ms.to_bits());
    }

    #[test]
    fn sweep_records_cell_failures_without_aborting() {
        // Zero-duration scenario fails validation; the row carries the error.
        let cfg = SweepConfig {
            offsets_ms: vec![20.0],
            seeds: vec![1],
            duration: 2.0,
            pixel_sigma: 1.0,
            jobs: 1,
        };
        let rows = run_sweep(&cfg).unwrap();
        assert_eq!(rows.len(), 2);
        for row in &rows {
            assert!(row.error.is_some() || row.estimated_td_ms.is_some());
        }
    }

    #[test]
    fn summary_groups_by_offset_and_mode() {
        let rows = vec![
            SweepRow {
                scenario: "sinusoid3d".into(),
                offset_ms: 20.0,
                seed: 1,
                calibrate_td: true,
                estimated_td_ms: Some(19.0),
                ate_cm: Some(1.0),
                error: None,
            },
            SweepRow {
                scenario: "sinusoid3d".into(),
                offset_ms: 20.0,
                seed: 2,
                calibrate_td: true,
                estimated_td_ms: Some(21.0),
                ate_cm: Some(3.0),
                error: None,
            },
            SweepRow {
                scenario: "sinusoid3d".into(),
                offset_ms: 20.0,
                seed: 1,
                calibrate_td: false,
                estimated_td_ms: Some(0.0),
                ate_cm: Some(9.0),
                error: None,
            },
        ];
        let summary = summarize_sweep(&rows);
        assert_eq!(summary.len(), 2);
        let on = summary.iter().find(|s| s.calibrate_td).unwrap();
        assert_eq!(on.mean_estimated_td_ms, Some(20.0));
        assert_eq!(on.mean_ate_cm, Some(2.0));
        assert_eq!(on.cells, 2);
    }
}
