//! On-disk dataset layout.
//!
//! ```text
//! world.txt            analytic planes, one patch per line
//! imu.csv              t,wx,wy,wz,ax,ay,az
//! scans.csv            index,t
//! scans/NNNNNN.csv     x,y,z per point in the LiDAR frame
//! gt.tum               ground truth poses
//! ```

use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use nalgebra::Vector3;
use thiserror::Error;

use crate::evaluation::{EvalError, Trajectory};
use crate::plane_map::{AnalyticMap, MapError};
use crate::propagation::ImuSample;
use crate::simulator::{Scan, ScenarioDataset};

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("{path}:{line}: {msg}")]
    Parse { path: PathBuf, line: usize, msg: String },
    #[error("{path}: {source}")]
    World { path: PathBuf, source: MapError },
    #[error("{path}: {source}")]
    Trajectory { path: PathBuf, source: EvalError },
}

/// Dataset contents as read back from disk.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub imu: Vec<ImuSample>,
    pub scans: Vec<Scan>,
    pub world: Option<AnalyticMap>,
    pub ground_truth: Option<Trajectory>,
}

impl From<ScenarioDataset> for Dataset {
    fn from(d: ScenarioDataset) -> Self {
        Self { imu: d.imu, scans: d.scans, world: Some(d.world), ground_truth: Some(d.ground_truth) }
    }
}

fn write(path: &Path, text: &str) -> Result<(), DatasetError> {
    fs::write(path, text).map_err(|source| DatasetError::Io { path: path.to_path_buf(), source })
}

fn read(path: &Path) -> Result<String, DatasetError> {
    fs::read_to_string(path).map_err(|source| DatasetError::Io { path: path.to_path_buf(), source })
}

pub fn scan_file_name(index: usize) -> String {
    format!("{index:06}.csv")
}

/// Write a generated dataset under `dir`, creating it if needed.
pub fn write_dataset(dir: &Path, data: &ScenarioDataset) -> Result<(), DatasetError> {
    let scans_dir = dir.join("scans");
    fs::create_dir_all(&scans_dir).map_err(|source| DatasetError::Io { path: scans_dir.clone(), source })?;
    write(&dir.join("world.txt"), &data.world.to_world_file())?;

    let mut imu = String::from("t,wx,wy,wz,ax,ay,az\n");
    for s in &data.imu {
        let _ = writeln!(
            imu,
            "{:.6},{:.9},{:.9},{:.9},{:.9},{:.9},{:.9}",
            s.t, s.gyro.x, s.gyro.y, s.gyro.z, s.accel.x, s.accel.y, s.accel.z
        );
    }
    write(&dir.join("imu.csv"), &imu)?;

    let mut index = String::from("index,t\n");
    for (i, scan) in data.scans.iter().enumerate() {
        let _ = writeln!(index, "{i},{:.6}", scan.t);
        let mut body = String::from("x,y,z\n");
        for p in &scan.points {
            let _ = writeln!(body, "{:.6},{:.6},{:.6}", p.x, p.y, p.z);
        }
        write(&scans_dir.join(scan_file_name(i)), &body)?;
    }
    write(&dir.join("scans.csv"), &index)?;
    write(&dir.join("gt.tum"), &data.ground_truth.to_tum())
}

/// Numeric CSV rows; a non-numeric first line is taken as a header.
fn parse_csv(path: &Path, text: &str, width: usize) -> Result<Vec<Vec<f64>>, DatasetError> {
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Result<Vec<f64>, _> = line.split(',').map(|f| f.trim().parse::<f64>()).collect();
        match fields {
            Ok(v) if v.len() == width => rows.push(v),
            Ok(v) => {
                return Err(DatasetError::Parse {
                    path: path.to_path_buf(),
                    line: i + 1,
                    msg: format!("expected {width} fields, found {}", v.len()),
                })
            }
            Err(_) if i == 0 => continue,
            Err(e) => return Err(DatasetError::Parse { path: path.to_path_buf(), line: i + 1, msg: e.to_string() }),
        }
    }
    Ok(rows)
}

/// Read a dataset directory; `world.txt` and `gt.tum` are optional.
pub fn read_dataset(dir: &Path) -> Result<Dataset, DatasetError> {
    let imu_path = dir.join("imu.csv");
    let imu = parse_csv(&imu_path, &read(&imu_path)?, 7)?
        .into_iter()
        .map(|r| ImuSample { t: r[0], gyro: Vector3::new(r[1], r[2], r[3]), accel: Vector3::new(r[4], r[5], r[6]) })
        .collect();

    let index_path = dir.join("scans.csv");
    let mut scans = Vec::new();
    for (line, r) in parse_csv(&index_path, &read(&index_path)?, 2)?.into_iter().enumerate() {
        if !(r[0] >= 0.0 && r[0].fract() == 0.0) {
            return Err(DatasetError::Parse { path: index_path.clone(), line: line + 2, msg: format!("bad scan index {}", r[0]) });
        }
        let path = dir.join("scans").join(scan_file_name(r[0] as usize));
        let points = parse_csv(&path, &read(&path)?, 3)?.into_iter().map(|p| Vector3::new(p[0], p[1], p[2])).collect();
        scans.push(Scan { t: r[1], points });
    }

    let world_path = dir.join("world.txt");
    let world = if world_path.exists() {
        Some(AnalyticMap::parse(&read(&world_path)?).map_err(|source| DatasetError::World { path: world_path, source })?)
    } else {
        None
    };
    let gt_path = dir.join("gt.tum");
    let ground_truth = if gt_path.exists() { Some(read_trajectory(&gt_path)?) } else { None };
    Ok(Dataset { imu, scans, world, ground_truth })
}

pub fn read_trajectory(path: &Path) -> Result<Trajectory, DatasetError> {
    Trajectory::from_tum(&read(path)?).map_err(|source| DatasetError::Trajectory { path: path.to_path_buf(), source })
}

pub fn write_text(path: &Path, text: &str) -> Result<(), DatasetError> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|source| DatasetError::Io { path: parent.to_path_buf(), source })?;
    }
    write(path, text)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simulator::{generate, Scenario, ScenarioKind};

    #[test]
    fn round_trip_through_disk() {
        let mut s = Scenario::new(ScenarioKind::Room, 4);
        s.duration = 1.0;
        s.rays_per_scan = 400;
        let data = generate(&s).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_dataset(dir.path(), &data).unwrap();
        let back = read_dataset(dir.path()).unwrap();
        assert_eq!(back.imu.len(), data.imu.len());
        assert_eq!(back.scans.len(), data.scans.len());
        assert_eq!(back.scans[3].points.len(), data.scans[3].points.len());
        assert!((back.scans[3].points[7] - data.scans[3].points[7]).norm() < 1e-5);
        assert!((back.imu[10].accel - data.imu[10].accel).norm() < 1e-8);
        assert_eq!(back.world.unwrap().patches.len(), 6);
        assert_eq!(back.ground_truth.unwrap().len(), data.ground_truth.len());
        assert!(fs::read_to_string(dir.path().join("scans/000002.csv")).unwrap().starts_with("x,y,z\n"));
    }

    #[test]
    fn missing_and_malformed_files() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(read_dataset(dir.path()), Err(DatasetError::Io { .. })));
        fs::write(dir.path().join("imu.csv"), "t,wx,wy,wz,ax,ay,az\n0,1,2\n").unwrap();
        assert!(matches!(read_dataset(dir.path()), Err(DatasetError::Parse { line: 2, .. })));
    }
}
