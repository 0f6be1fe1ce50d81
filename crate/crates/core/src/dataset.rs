//! Dataset serialization: EuRoC-style CSV files plus a versioned scenario
//! description.
//!
//! Formats (single header line, comma separated, integer nanoseconds):
//! - `imu.csv`         — `t_ns,wx,wy,wz,ax,ay,az`
//! - `frames.csv`      — `t_ns,feature_id,u_px,v_px`
//! - `groundtruth.csv` — `t_ns,px,py,pz,qw,qx,qy,qz,vx,vy,vz`
//! - `scenario.json`   — all simulator fields, with `schema_version`
//!
//! Floats are written in the shortest representation that parses back to the
//! identical value, so text → values → text is stable.

use std::fs;
use std::io;
use std::path::Path;

use nalgebra::{Quaternion, UnitQuaternion};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::manifold::{Quat, Vec3};
use crate::preintegration::ImuSample;
use crate::sim::{FrameInput, SimScenario, Simulator};
use crate::visual::Vec2;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
    #[error("{path}:{line}: {msg}")]
    Parse { path: String, line: u64, msg: String },
    #[error("{path}: {msg}")]
    Format { path: String, msg: String },
    #[error("unsupported scenario schema version {0}")]
    SchemaVersion(u32),
}

fn io_err(path: &Path, source: io::Error) -> DataError {
    DataError::Io { path: path.display().to_string(), source }
}

pub fn sec_to_ns(t: f64) -> i64 {
    (t * 1e9).round() as i64
}

pub fn ns_to_sec(ns: i64) -> f64 {
    ns as f64 / 1e9
}

/// Ground-truth record: pose and velocity on the IMU time axis.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruthRecord {
    pub t: f64,
    pub p: Vec3,
    pub q: Quat,
    pub v: Vec3,
}

/// Fully loaded dataset; the scenario is present only for simulated data.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub imu: Vec<ImuSample>,
    pub frames: Vec<FrameInput>,
    pub ground_truth: Vec<GroundTruthRecord>,
    pub scenario: Option<SimScenario>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ImuRow {
    t_ns: i64,
    wx: f64,
    wy: f64,
    wz: f64,
    ax: f64,
    ay: f64,
    az: f64,
}

#[derive(Debug, Serialize, Deserialize)]
struct FrameRow {
    t_ns: i64,
    feature_id: u64,
    u_px: f64,
    v_px: f64,
}

#[derive(Debug, Serialize, Deserialize)]
struct GtRow {
    t_ns: i64,
    px: f64,
    py: f64,
    pz: f64,
    qw: f64,
    qx: f64,
    qy: f64,
    qz: f64,
    vx: f64,
    vy: f64,
    vz: f64,
}

fn write_csv<T: Serialize>(path: &Path, rows: impl Iterator<Item = T>) -> Result<(), DataError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    for row in rows {
        w.serialize(row).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| io_err(path, e))?;
    Ok(())
}

fn csv_err(path: &Path, e: csv::Error) -> DataError {
    let line = match e.position() {
        Some(pos) => pos.line(),
        None => 0,
    };
    DataError::Parse { path: path.display().to_string(), line, msg: e.to_string() }
}

fn read_csv<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>, DataError> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    let mut out = Vec::new();
    for row in r.deserialize() {
        out.push(row.map_err(|e| csv_err(path, e))?);
    }
    Ok(out)
}

pub fn write_imu_csv(path: &Path, imu: &[ImuSample]) -> Result<(), DataError> {
    write_csv(
        path,
        imu.iter().map(|s| ImuRow {
            t_ns: sec_to_ns(s.t),
            wx: s.gyro.x,
            wy: s.gyro.y,
            wz: s.gyro.z,
            ax: s.accel.x,
            ay: s.accel.y,
            az: s.accel.z,
        }),
    )
}

pub fn read_imu_csv(path: &Path) -> Result<Vec<ImuSample>, DataError> {
    let rows: Vec<ImuRow> = read_csv(path)?;
    let mut out: Vec<ImuSample> = Vec::with_capacity(rows.len());
    for (i, r) in rows.iter().enumerate() {
        let t = ns_to_sec(r.t_ns);
        if let Some(prev) = out.last() {
            if t <= prev.t {
                return Err(DataError::Parse {
                    path: path.display().to_string(),
                    line: i as u64 + 2,
                    msg: format!("non-increasing timestamp {} after {}", r.t_ns, sec_to_ns(prev.t)),
                });
            }
        }
        out.push(ImuSample {
            t,
            gyro: Vec3::new(r.wx, r.wy, r.wz),
            accel: Vec3::new(r.ax, r.ay, r.az),
        });
    }
    Ok(out)
}

pub fn write_frames_csv(path: &Path, frames: &[FrameInput]) -> Result<(), DataError> {
    write_csv(
        path,
        frames.iter().flat_map(|f| {
            let t_ns = sec_to_ns(f.t_image);
            f.observations
                .iter()
                .map(move |(id, px)| FrameRow { t_ns, feature_id: *id, u_px: px.x, v_px: px.y })
        }),
    )
}

pub fn read_frames_csv(path: &Path) -> Result<Vec<FrameInput>, DataError> {
    let rows: Vec<FrameRow> = read_csv(path)?;
    let mut out: Vec<FrameInput> = Vec::new();
    for (i, r) in rows.iter().enumerate() {
        let t = ns_to_sec(r.t_ns);
        match out.last_mut() {
            Some(f) if sec_to_ns(f.t_image) == r.t_ns => {
                f.observations.push((r.feature_id, Vec2::new(r.u_px, r.v_px)));
            }
            Some(f) if f.t_image > t => {
                return Err(DataError::Parse {
                    path: path.display().to_string(),
                    line: i as u64 + 2,
                    msg: format!("frame timestamp {} goes backwards", r.t_ns),
                });
            }
            _ => out.push(FrameInput {
                t_image: t,
                observations: vec![(r.feature_id, Vec2::new(r.u_px, r.v_px))],
            }),
        }
    }
    Ok(out)
}

pub fn write_groundtruth_csv(path: &Path, gt: &[GroundTruthRecord]) -> Result<(), DataError> {
    write_csv(
        path,
        gt.iter().map(|r| GtRow {
            t_ns: sec_to_ns(r.t),
            px: r.p.x,
            py: r.p.y,
            pz: r.p.z,
            qw: r.q.as_ref().w,
            qx: r.q.as_ref().i,
            qy: r.q.as_ref().j,
            qz: r.q.as_ref().k,
            vx: r.v.x,
            vy: r.v.y,
            vz: r.v.z,
        }),
    )
}

pub fn read_groundtruth_csv(path: &Path) -> Result<Vec<GroundTruthRecord>, DataError> {
    let rows: Vec<GtRow> = read_csv(path)?;
    Ok(rows
        .into_iter()
        .map(|r| GroundTruthRecord {
            t: ns_to_sec(r.t_ns),
            p: Vec3::new(r.px, r.py, r.pz),
            q: UnitQuaternion::from_quaternion(Quaternion::new(r.qw, r.qx, r.qy, r.qz)),
            v: Vec3::new(r.vx, r.vy, r.vz),
        })
        .collect())
}

/// Generate all sensor streams from the simulator and write the four dataset
/// files. Re-running with the same scenario is byte-identical.
pub fn export_dataset(sim: &Simulator, dir: &Path) -> Result<(), DataError> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    let imu = sim.synth_imu().map_err(|e| DataError::Format {
        path: dir.display().to_string(),
        msg: e.to_string(),
    })?;
    let frames = sim.synth_frames().map_err(|e| DataError::Format {
        path: dir.display().to_string(),
        msg: e.to_string(),
    })?;
    let gt = sim.ground_truth().map_err(|e| DataError::Format {
        path: dir.display().to_string(),
        msg: e.to_string(),
    })?;
    write_imu_csv(&dir.join("imu.csv"), &imu)?;
    write_frames_csv(&dir.join("frames.csv"), &frames)?;
    let gt_records: Vec<GroundTruthRecord> = gt
        .into_iter()
        .map(|(t, s)| GroundTruthRecord { t, p: s.p, q: s.q, v: s.v })
        .collect();
    write_groundtruth_csv(&dir.join("groundtruth.csv"), &gt_records)?;
    let scen_path = dir.join("scenario.json");
    let text = serde_json::to_string_pretty(sim.scenario()).map_err(|e| DataError::Format {
        path: scen_path.display().to_string(),
        msg: e.to_string(),
    })?;
    fs::write(&scen_path, text + "\n").map_err(|e| io_err(&scen_path, e))?;
    Ok(())
}

/// Load a dataset directory; scenario.json is optional (external datasets in
/// the documented CSV formats are accepted without it).
pub fn load_dataset(dir: &Path) -> Result<Dataset, DataError> {
    let imu = read_imu_csv(&dir.join("imu.csv"))?;
    let frames = read_frames_csv(&dir.join("frames.csv"))?;
    let gt_path = dir.join("groundtruth.csv");
    let ground_truth =
        if gt_path.exists() { read_groundtruth_csv(&gt_path)? } else { Vec::new() };
    let scen_path = dir.join("scenario.json");
    let scenario = if scen_path.exists() {
        let text = fs::read_to_string(&scen_path).map_err(|e| io_err(&scen_path, e))?;
        let scn: SimScenario = serde_json::from_str(&text).map_err(|e| DataError::Parse {
            path: scen_path.display().to_string(),
            line: e.line() as u64,
            msg: e.to_string(),
        })?;
        if scn.schema_version != crate::sim::SCENARIO_SCHEMA_VERSION {
            return Err(DataError::SchemaVersion(scn.schema_version));
        }
        Some(scn)
    } else {
        None
    };
    Ok(Dataset { imu, frames, ground_truth, scenario })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::NoiseSpec;

    fn small_sim(noise_seed: u64) -> Simulator {
        let mut scn =
            SimScenario::default_sinusoid3d(12.0, 0.010, NoiseSpec { seed: noise_seed, ..NoiseSpec::default() });
        scn.trajectory = crate::sim::TrajectorySpec::default_sinusoid3d(12.0, 1);
        Simulator::new(scn).unwrap()
    }

    #[test]
    fn export_load_roundtrip_is_exact() {
        let dir = std::env::temp_dir().join("tcvio_ds_roundtrip");
        let _ = fs::remove_dir_all(&dir);
        let sim = small_sim(5);
        export_dataset(&sim, &dir).unwrap();
        let ds = load_dataset(&dir).unwrap();

        let imu = sim.synth_imu().unwrap();
        assert_eq!(ds.imu.len(), imu.len());
        for (a, b) in ds.imu.iter().zip(&imu) {
            assert_eq!(a.t.to_bits(), b.t.to_bits(), "timestamp round trip");
            assert_eq!(a.accel, b.accel);
            assert_eq!(a.gyro, b.gyro);
        }
        let frames = sim.synth_frames().unwrap();
        assert_eq!(ds.frames, frames);
        assert_eq!(ds.scenario.as_ref(), Some(sim.scenario()));

        let gt = sim.ground_truth().unwrap();
        assert_eq!(ds.ground_truth.len(), gt.len());
        for (a, (t, s)) in ds.ground_truth.iter().zip(&gt) {
            assert_eq!(a.t.to_bits(), t.to_bits());
            assert_eq!(a.p, s.p);
            assert_eq!(a.v, s.v);
            assert_eq!(a.q.as_ref().coords, s.q.as_ref().coords);
        }
    }

    #[test]
    fn rewriting_loaded_data_is_byte_identical() {
        let dir1 = std::env::temp_dir().join("tcvio_ds_stable1");
        let dir2 = std::env::temp_dir().join("tcvio_ds_stable2");
        let _ = fs::remove_dir_all(&dir1);
        let _ = fs::remove_dir_all(&dir2);
        let sim = small_sim(6);
        export_dataset(&sim, &dir1).unwrap();
        let ds = load_dataset(&dir1).unwrap();
        fs::create_dir_all(&dir2).unwrap();
        write_imu_csv(&dir2.join("imu.csv"), &ds.imu).unwrap();
        write_frames_csv(&dir2.join("frames.csv"), &ds.frames).unwrap();
        write_groundtruth_csv(&dir2.join("groundtruth.csv"), &ds.ground_truth).unwrap();
        for name in ["imu.csv", "frames.csv", "groundtruth.csv"] {
            let a = fs::read(dir1.join(name)).unwrap();
            let b = fs::read(dir2.join(name)).unwrap();
            assert_eq!(a, b, "{name} not stable under round trip");
        }
    }

    #[test]
    fn same_seed_identical_files_different_seed_same_truth() {
        let dir1 = std::env::temp_dir().join("tcvio_ds_seed1");
        let dir2 = std::env::temp_dir().join("tcvio_ds_seed2");
        let dir3 = std::env::temp_dir().join("tcvio_ds_seed3");
        for d in [&dir1, &dir2, &dir3] {
            let _ = fs::remove_dir_all(d);
        }
        export_dataset(&small_sim(5), &dir1).unwrap();
        export_dataset(&small_sim(5), &dir2).unwrap();
        export_dataset(&small_sim(9), &dir3).unwrap();
        for name in ["imu.csv", "frames.csv", "groundtruth.csv", "scenario.json"] {
            assert_eq!(
                fs::read(dir1.join(name)).unwrap(),
                fs::read(dir2.join(name)).unwrap(),
                "{name} differs under identical seed"
            );
        }
        // Different noise seed: noise differs, ground truth identical.
        assert_ne!(fs::read(dir1.join("imu.csv")).unwrap(), fs::read(dir3.join("imu.csv")).unwrap());
        assert_eq!(
            fs::read(dir1.join("groundtruth.csv")).unwrap(),
            fs::read(dir3.join("groundtruth.csv")).unwrap()
        );
    }

    #[test]
    fn headers_match_documented_formats() {
        let dir = std::env::temp_dir().join("tcvio_ds_headers");
        let _ = fs::remove_dir_all(&dir);
        export_dataset(&small_sim(5), &dir).unwrap();
        let first_line = |name: &str| {
            let text = fs::read_to_string(dir.join(name)).unwrap();
            text.lines().next().unwrap().to_string()
        };
        assert_eq!(first_line("imu.csv"), "t_ns,wx,wy,wz,ax,ay,az");
        assert_eq!(first_line("frames.csv"), "t_ns,feature_id,u_px,v_px");
        assert_eq!(first_line("groundtruth.csv"), "t_ns,px,py,pz,qw,qx,qy,qz,vx,vy,vz");
    }

    #[test]
    fn parse_errors_carry_line_numbers() {
        let dir = std::env::temp_dir().join("tcvio_ds_badline");
        let _ = fs::remove_dir_all(&dir);
        fs::create_dir_all(&dir).unwrap();
        fs::write(
            dir.join("imu.csv"),
            "t_ns,wx,wy,wz,ax,ay,az\n0,0,0,0,0,0,9.81\n1000000,bad,0,0,0,0,9.81\n",
        )
        .unwrap();
        let err = read_imu_csv(&dir.join("imu.csv")).unwrap_err();
        match err {
            DataError::Parse { line, .. } => assert_eq!(line, 3),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn non_monotonic_imu_is_rejected() {
        let dir = std::env::temp_dir().join("tcvio_ds_nonmono");
        let _ = fs::remove_dir_all(&dir);
        fs::create_dir_all(&dir).unwrap();
        fs::write(
            dir.join("imu.csv"),
            "t_ns,wx,wy,wz,ax,ay,az\n1000000,0,0,0,0,0,9.81\n1000000,0,0,0,0,0,9.81\n",
        )
        .unwrap();
        assert!(matches!(read_imu_csv(&dir.join("imu.csv")), Err(DataError::Parse { .. })));
    }

    #[test]
    fn schema_version_is_checked() {
        let dir = std::env::temp_dir().join("tcvio_ds_schema");
        let _ = fs::remove_dir_all(&dir);
        export_dataset(&small_sim(5), &dir).unwrap();
        let path = dir.join("scenario.json");
        let text = fs::read_to_string(&path).unwrap().replace("\"schema_version\": 1", "\"schema_version\": 99");
        fs::write(&path, text).unwrap();
        assert!(matches!(load_dataset(&dir), Err(DataError::SchemaVersion(99))));
    }
}
