//! Native sequence log layout.
//!
//! ```text
//! <dir>/imu.csv             t,wx,wy,wz,ax,ay,az
//! <dir>/lidar_stamps.csv    index,frame_time_s
//! <dir>/scans/NNNNNN.bin    repeated little-endian {f64 offset_t, f32 x, f32 y, f32 z}
//! <dir>/camera_stamps.csv   index,t
//! <dir>/images/NNNNNN.bin   opaque image payload
//! <dir>/gripper.csv         t,width
//! <dir>/ground_truth.csv    LiDAR trajectory, timestamp_s,x,y,z,qx,qy,qz,qw
//! ```

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use nalgebra::Vector3;

use super::{ImuSample, LidarPoint, LidarScan, SimError};
use crate::geometry::{read_trajectory_csv, write_trajectory_csv, StampedPose};
use crate::textio::read_numeric_csv;

const RECORD_BYTES: usize = 8 + 3 * 4;

/// In-memory contents of one sequence directory.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct SensorLog {
    pub imu: Vec<ImuSample>,
    pub scans: Vec<LidarScan>,
    pub camera_stamps: Vec<f64>,
    pub images: Vec<Vec<u8>>,
    /// `(t, width_m)` auxiliary channel.
    pub gripper: Vec<(f64, f64)>,
    pub ground_truth: Vec<StampedPose>,
}

fn log_err(path: &Path, msg: impl ToString) -> SimError {
    SimError::Log { path: path.display().to_string(), msg: msg.to_string() }
}

fn create(path: &Path) -> Result<BufWriter<fs::File>, SimError> {
    fs::File::create(path).map(BufWriter::new).map_err(|e| log_err(path, e))
}

pub fn encode_scan(scan: &LidarScan) -> Vec<u8> {
    let mut buf = Vec::with_capacity(scan.points.len() * RECORD_BYTES);
    for p in &scan.points {
        buf.extend_from_slice(&p.offset.to_le_bytes());
        for c in p.position.iter() {
            buf.extend_from_slice(&(*c as f32).to_le_bytes());
        }
    }
    buf
}

pub fn decode_scan(frame_time: f64, bytes: &[u8], path: &Path) -> Result<LidarScan, SimError> {
    if bytes.len() % RECORD_BYTES != 0 {
        return Err(log_err(path, format!("size {} is not a multiple of {RECORD_BYTES}-byte records", bytes.len())));
    }
    let points = bytes
        .chunks_exact(RECORD_BYTES)
        .map(|r| {
            let f = |at: usize| f32::from_le_bytes(r[at..at + 4].try_into().unwrap()) as f64;
            LidarPoint { offset: f64::from_le_bytes(r[0..8].try_into().unwrap()), position: Vector3::new(f(8), f(12), f(16)) }
        })
        .collect();
    Ok(LidarScan { frame_time, points })
}

pub fn write_log(dir: &Path, log: &SensorLog) -> Result<(), SimError> {
    fs::create_dir_all(dir.join("scans")).map_err(|e| log_err(dir, e))?;
    fs::create_dir_all(dir.join("images")).map_err(|e| log_err(dir, e))?;

    let path = dir.join("imu.csv");
    let mut w = create(&path)?;
    let io = |e: std::io::Error| log_err(&path, e);
    writeln!(w, "t,wx,wy,wz,ax,ay,az").map_err(io)?;
    for s in &log.imu {
        writeln!(w, "{},{},{},{},{},{},{}", s.t, s.gyro.x, s.gyro.y, s.gyro.z, s.accel.x, s.accel.y, s.accel.z).map_err(io)?;
    }
    w.flush().map_err(io)?;

    let path = dir.join("lidar_stamps.csv");
    let mut w = create(&path)?;
    let io = |e: std::io::Error| log_err(&path, e);
    writeln!(w, "index,frame_time_s").map_err(io)?;
    for (i, scan) in log.scans.iter().enumerate() {
        writeln!(w, "{i},{}", scan.frame_time).map_err(io)?;
        let p = dir.join("scans").join(format!("{i:06}.bin"));
        fs::write(&p, encode_scan(scan)).map_err(|e| log_err(&p, e))?;
    }
    w.flush().map_err(io)?;

    let path = dir.join("camera_stamps.csv");
    let mut w = create(&path)?;
    let io = |e: std::io::Error| log_err(&path, e);
    writeln!(w, "index,t").map_err(io)?;
    for (i, t) in log.camera_stamps.iter().enumerate() {
        writeln!(w, "{i},{t}").map_err(io)?;
    }
    w.flush().map_err(io)?;
    for (i, img) in log.images.iter().enumerate() {
        let p = dir.join("images").join(format!("{i:06}.bin"));
        fs::write(&p, img).map_err(|e| log_err(&p, e))?;
    }

    let path = dir.join("gripper.csv");
    let mut w = create(&path)?;
    let io = |e: std::io::Error| log_err(&path, e);
    writeln!(w, "t,width").map_err(io)?;
    for (t, width) in &log.gripper {
        writeln!(w, "{t},{width}").map_err(io)?;
    }
    w.flush().map_err(io)?;

    let path = dir.join("ground_truth.csv");
    let w = create(&path)?;
    write_trajectory_csv(w, &log.ground_truth).map_err(|e| log_err(&path, e))?;
    Ok(())
}

fn text_err(e: crate::textio::TextError) -> SimError {
    SimError::Log { path: e.path.clone(), msg: format!("line {}: {}", e.line, e.msg) }
}

/// Reads a log directory. `images/`, `gripper.csv` and `ground_truth.csv` are
/// optional; the IMU, LiDAR and camera streams are required.
pub fn read_log(dir: &Path) -> Result<SensorLog, SimError> {
    if !dir.is_dir() {
        return Err(log_err(dir, "not a directory"));
    }
    let imu = read_numeric_csv(&dir.join("imu.csv"), "t,wx,wy,wz,ax,ay,az")
        .map_err(text_err)?
        .into_iter()
        .map(|r| ImuSample::new(r[0], Vector3::new(r[1], r[2], r[3]), Vector3::new(r[4], r[5], r[6])))
        .collect();

    let stamps = read_numeric_csv(&dir.join("lidar_stamps.csv"), "index,frame_time_s").map_err(text_err)?;
    if stamps.is_empty() {
        return Err(log_err(&dir.join("scans"), "no LiDAR scans in log"));
    }
    let mut scans = Vec::with_capacity(stamps.len());
    for row in &stamps {
        let p = dir.join("scans").join(format!("{:06}.bin", row[0] as usize));
        let bytes = fs::read(&p).map_err(|e| log_err(&p, e))?;
        scans.push(decode_scan(row[1], &bytes, &p)?);
    }

    let camera_stamps: Vec<f64> =
        read_numeric_csv(&dir.join("camera_stamps.csv"), "index,t").map_err(text_err)?.into_iter().map(|r| r[1]).collect();
    let mut images = Vec::new();
    if dir.join("images").is_dir() {
        for i in 0..camera_stamps.len() {
            let p = dir.join("images").join(format!("{i:06}.bin"));
            if !p.exists() {
                break;
            }
            images.push(fs::read(&p).map_err(|e| log_err(&p, e))?);
        }
    }
    let gripper = if dir.join("gripper.csv").exists() {
        read_numeric_csv(&dir.join("gripper.csv"), "t,width").map_err(text_err)?.into_iter().map(|r| (r[0], r[1])).collect()
    } else {
        Vec::new()
    };
    let gt_path = dir.join("ground_truth.csv");
    let ground_truth = if gt_path.exists() {
        let f = fs::File::open(&gt_path).map_err(|e| log_err(&gt_path, e))?;
        read_trajectory_csv(std::io::BufReader::new(f)).map_err(|e| log_err(&gt_path, e))?
    } else {
        Vec::new()
    };
    Ok(SensorLog { imu, scans, camera_stamps, images, gripper, ground_truth })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simulation::{simulate_sequence, SimConfig};

    #[test]
    fn log_roundtrip_keeps_streams() {
        let mut cfg = SimConfig::benchmark();
        cfg.trajectory.duration = 0.5;
        cfg.rays_per_scan = 100;
        let log = simulate_sequence(&cfg, 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_log(dir.path(), &log).unwrap();
        let back = read_log(dir.path()).unwrap();
        assert_eq!(back.imu, log.imu);
        assert_eq!(back.camera_stamps, log.camera_stamps);
        assert_eq!(back.images, log.images);
        assert_eq!(back.gripper, log.gripper);
        assert_eq!(back.scans.len(), log.scans.len());
        for (a, b) in back.scans.iter().zip(&log.scans) {
            assert_eq!(a.frame_time, b.frame_time);
            for (p, q) in a.points.iter().zip(&b.points) {
                assert_eq!(p.offset, q.offset);
                assert!((p.position - q.position).norm() < 1e-5);
            }
        }
    }

    #[test]
    fn truncated_scan_is_reported() {
        let err = decode_scan(0.0, &[0u8; 7], Path::new("scans/000000.bin")).unwrap_err();
        assert!(err.to_string().contains("000000.bin"));
    }

    #[test]
    fn empty_scan_directory_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("imu.csv"), "t,wx,wy,wz,ax,ay,az\n").unwrap();
        fs::write(dir.path().join("lidar_stamps.csv"), "index,frame_time_s\n").unwrap();
        fs::write(dir.path().join("camera_stamps.csv"), "index,t\n").unwrap();
        let err = read_log(dir.path()).unwrap_err();
        assert!(err.to_string().contains("no LiDAR scans"));
    }
}
