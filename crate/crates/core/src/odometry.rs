//! End-to-end LiDAR-inertial odometry: scan recombination, undistortion,
//! predict/update and incremental mapping.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{
    lidar_to_camera_trajectory, pose_from_fields, pose_to_fields, write_trajectory_csv, FrameChain, NavState, Pose, Rotation,
    StampedPose, Vec24,
};
use crate::measurement::{iterated_update, MeasurementError, PointStatus, UpdateConfig};
use crate::propagation::{
    imu_knots, integrate, static_initialize, Covariance24, NoiseConfig, PropagationError, StaticInitConfig,
};
use crate::simulation::{default_chain, read_log, ImuSample, LidarPoint, LidarScan, SensorLog, SimError};
use crate::voxel_map::{VoxelMap, VoxelMapConfig};

#[derive(Debug, Error)]
pub enum OdometryError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Propagation(#[from] PropagationError),
    #[error(transparent)]
    Measurement(#[from] MeasurementError),
    #[error(transparent)]
    Log(#[from] SimError),
    #[error("{path}: {msg}")]
    Io { path: String, msg: String },
    #[error("scan period must be positive, got {0}")]
    EmptyPeriod(f64),
    #[error("point timestamps decrease at index {index}: {prev} then {next}")]
    NonMonotone { index: usize, prev: f64, next: f64 },
    #[error("scan ending at {end:.4} s does not advance past {current:.4} s")]
    StaleScan { end: f64, current: f64 },
    #[error("pipeline is not initialized")]
    NotInitialized,
    #[error("no scan ends after initialization at {0:.3} s")]
    NoScans(f64),
}

fn io_err(path: &Path, e: impl ToString) -> OdometryError {
    OdometryError::Io { path: path.display().to_string(), msg: e.to_string() }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineSection {
    /// Nominal LiDAR frame period (s).
    pub scan_period: f64,
    /// Largest tolerated gap between IMU samples (s).
    pub max_imu_gap: f64,
    /// Length of the stationary buffer used for initialization (s).
    pub init_duration: f64,
    /// Voxels farther than this from the current LiDAR position are evicted.
    pub map_radius: Option<f64>,
}

impl Default for PipelineSection {
    fn default() -> Self {
        Self { scan_period: 0.1, max_imu_gap: 0.1, init_duration: 1.0, map_radius: None }
    }
}

/// Frame chain as `[x, y, z, qx, qy, qz, qw]` arrays.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ChainConfig {
    pub imu_lidar: [f64; 7],
    pub lidar_camera: [f64; 7],
    pub lidar_tcp: [f64; 7],
}

impl Default for ChainConfig {
    fn default() -> Self {
        Self::from_chain(&default_chain())
    }
}

impl ChainConfig {
    pub fn from_chain(chain: &FrameChain) -> Self {
        Self {
            imu_lidar: pose_to_fields(&chain.imu_lidar),
            lidar_camera: pose_to_fields(&chain.lidar_camera),
            lidar_tcp: pose_to_fields(&chain.lidar_tcp),
        }
    }

    pub fn to_chain(&self) -> Result<FrameChain, String> {
        let pose = |name: &str, v: &[f64; 7]| -> Result<Pose, String> {
            let qn = (v[3] * v[3] + v[4] * v[4] + v[5] * v[5] + v[6] * v[6]).sqrt();
            if !v.iter().all(|c| c.is_finite()) || (qn - 1.0).abs() > 1e-6 {
                return Err(format!("chain.{name}: quaternion must be finite and unit length (norm {qn})"));
            }
            pose_from_fields(v).ok_or_else(|| format!("chain.{name}: degenerate quaternion"))
        };
        Ok(FrameChain {
            imu_lidar: pose("imu_lidar", &self.imu_lidar)?,
            lidar_camera: pose("lidar_camera", &self.lidar_camera)?,
            lidar_tcp: pose("lidar_tcp", &self.lidar_tcp)?,
        })
    }
}

/// Constant per-stream latencies (s), subtracted from raw stamps.
#[derive(Clone, Copy, Debug, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LatencyConfig {
    pub imu: f64,
    pub lidar: f64,
    pub camera: f64,
    pub aux: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub noise: NoiseConfig,
    pub map: VoxelMapConfig,
    pub update: UpdateConfig,
    pub init: StaticInitConfig,
    pub pipeline: PipelineSection,
    pub chain: ChainConfig,
    pub latency: LatencyConfig,
}

impl PipelineConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, OdometryError> {
        let cfg: Self = toml::from_str(text).map_err(|e| OdometryError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, OdometryError> {
        let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            OdometryError::Config(msg) => OdometryError::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("configuration serializes")
    }

    pub fn validate(&self) -> Result<(), OdometryError> {
        let c = OdometryError::Config;
        self.noise.validate().map_err(c)?;
        self.map.validate().map_err(c)?;
        self.update.validate().map_err(c)?;
        self.chain.to_chain().map_err(c)?;
        let p = &self.pipeline;
        if !(p.scan_period > 0.0) {
            return Err(OdometryError::EmptyPeriod(p.scan_period));
        }
        if !(p.max_imu_gap > 0.0 && p.max_imu_gap <= crate::propagation::MAX_DT) {
            return Err(c(format!("max_imu_gap must lie in (0, 0.1], got {}", p.max_imu_gap)));
        }
        if !(p.init_duration > 0.0) {
            return Err(c(format!("init_duration must be positive, got {}", p.init_duration)));
        }
        if let Some(r) = p.map_radius {
            if !(r > 0.0) {
                return Err(c(format!("map_radius must be positive, got {r}")));
            }
        }
        let l = &self.latency;
        if ![l.imu, l.lidar, l.camera, l.aux].iter().all(|v| v.is_finite()) {
            return Err(c("latencies must be finite".into()));
        }
        Ok(())
    }

    pub fn frame_chain(&self) -> FrameChain {
        self.chain.to_chain().expect("validated chain")
    }
}

/// Buckets a time-ordered point stream into frames `[start + kT, start + (k+1)T)`.
/// Empty frames are omitted; each point keeps its absolute time as
/// `frame_time + offset`.
pub fn recombine_scan(stream: &[(f64, Vector3<f64>)], period: f64, start: f64) -> Result<Vec<LidarScan>, OdometryError> {
    if !(period > 0.0) {
        return Err(OdometryError::EmptyPeriod(period));
    }
    for (i, w) in stream.windows(2).enumerate() {
        if w[1].0 < w[0].0 {
            return Err(OdometryError::NonMonotone { index: i + 1, prev: w[0].0, next: w[1].0 });
        }
    }
    let mut scans: Vec<LidarScan> = Vec::new();
    let mut current: Option<i64> = None;
    for &(t, p) in stream {
        let k = ((t - start) / period).floor() as i64;
        let frame_time = start + k as f64 * period;
        if current != Some(k) {
            scans.push(LidarScan { frame_time, points: Vec::new() });
            current = Some(k);
        }
        let scan = scans.last_mut().expect("pushed above");
        scan.points.push(LidarPoint { offset: t - scan.frame_time, position: p });
    }
    Ok(scans)
}

/// One backward interval of the undistortion: state at the later knot and
/// the constant inputs over the interval.
struct Segment {
    t1: f64,
    rotation: Rotation,
    position: Vector3<f64>,
    velocity: Vector3<f64>,
    omega: Vector3<f64>,
    accel: Vector3<f64>,
}

impl Segment {
    fn imu_pose(&self, t: f64) -> Pose {
        let tau = self.t1 - t;
        Pose::new(
            self.rotation * Rotation::exp(&(-self.omega * tau)),
            self.position - self.velocity * tau + self.accel * (0.5 * tau * tau),
        )
    }
}

fn backward_segments(
    imu: &[ImuSample],
    state_end: &NavState,
    start: f64,
    end: f64,
    max_gap: f64,
) -> Result<(Vec<Segment>, Vec<f64>), OdometryError> {
    let knots = imu_knots(imu, start, end, max_gap)?;
    let mut segments = Vec::with_capacity(knots.len());
    let (mut rot, mut pos, mut vel) = (state_end.attitude, state_end.position, state_end.velocity);
    for w in knots.windows(2).rev() {
        let dt = w[1].t - w[0].t;
        let omega = (w[0].gyro + w[1].gyro) * 0.5 - state_end.gyro_bias;
        let f = (w[0].accel + w[1].accel) * 0.5 - state_end.accel_bias;
        let mid = rot * Rotation::exp(&(-omega * (0.5 * dt)));
        let accel = mid * f + state_end.gravity;
        let seg = Segment { t1: w[1].t, rotation: rot, position: pos, velocity: vel, omega, accel };
        let begin = seg.imu_pose(w[0].t);
        rot = begin.rotation;
        pos = begin.translation;
        vel -= accel * dt;
        segments.push(seg);
    }
    segments.reverse();
    Ok((segments, knots.iter().map(|k| k.t).collect()))
}

/// LiDAR poses at every IMU knot in `(start, end]`, integrated backward from
/// the end-of-interval state.
pub fn interval_lidar_poses(
    imu: &[ImuSample],
    state_end: &NavState,
    start: f64,
    end: f64,
    max_gap: f64,
) -> Result<Vec<StampedPose>, OdometryError> {
    let (segments, _) = backward_segments(imu, state_end, start, end, max_gap)?;
    let ext = state_end.extrinsic();
    Ok(segments.iter().filter(|s| s.t1 > start).map(|s| StampedPose::new(s.t1, s.imu_pose(s.t1).compose(&ext))).collect())
}

/// Re-expresses every point in the LiDAR frame at `scan_end`.
///
/// IMU motion is integrated backward from `state_end` with bias-corrected
/// inputs held constant per IMU interval; each point's LiDAR pose at its
/// sample instant is then related to the end-of-scan pose.
pub fn undistort_scan(
    scan: &LidarScan,
    imu: &[ImuSample],
    state_end: &NavState,
    scan_end: f64,
    max_gap: f64,
) -> Result<Vec<Vector3<f64>>, OdometryError> {
    if scan.is_empty() {
        return Ok(Vec::new());
    }
    let first = (0..scan.len()).map(|i| scan.point_time(i)).fold(f64::INFINITY, f64::min).min(scan_end);
    let start = first.min(scan.frame_time).min(scan_end);
    let (segments, times) = backward_segments(imu, state_end, start, scan_end, max_gap)?;
    let ext = state_end.extrinsic();
    let end_inv = state_end.lidar_pose().inverse();
    Ok((0..scan.len())
        .map(|i| {
            let t = scan.point_time(i).clamp(start, scan_end);
            let seg = if segments.is_empty() {
                None
            } else {
                let k = times.partition_point(|&kt| kt < t).clamp(1, segments.len());
                Some(&segments[k - 1])
            };
            let lidar = seg.map_or(state_end.imu_pose(), |s| s.imu_pose(t)).compose(&ext);
            end_inv.transform_point(&lidar.transform_point(&scan.points[i].position))
        })
        .collect())
}

/// Per-scan pipeline output.
#[derive(Clone, Debug, PartialEq)]
pub struct ScanRecord {
    /// End-of-scan time.
    pub t: f64,
    pub imu_pose: Pose,
    pub lidar_pose: Pose,
    pub camera_pose: Pose,
    pub covariance_diagonal: Vec24,
    pub iterations: usize,
    pub inliers: usize,
    pub residual_rms: f64,
    pub degenerate: bool,
    /// LiDAR poses at the IMU knots since the previous scan end, the last one at `t`.
    pub interval_poses: Vec<StampedPose>,
}

#[derive(Clone, Debug)]
pub struct OdometryOutput {
    pub init_time: f64,
    pub records: Vec<ScanRecord>,
    pub map: VoxelMap,
}

impl OdometryOutput {
    pub fn lidar_trajectory(&self) -> Vec<StampedPose> {
        self.records.iter().map(|r| StampedPose::new(r.t, r.lidar_pose)).collect()
    }

    pub fn camera_trajectory(&self) -> Vec<StampedPose> {
        self.records.iter().map(|r| StampedPose::new(r.t, r.camera_pose)).collect()
    }

    /// LiDAR poses at IMU rate from initialization to the last scan end.
    pub fn dense_lidar_trajectory(&self) -> Vec<StampedPose> {
        self.records.iter().flat_map(|r| r.interval_poses.iter().copied()).collect()
    }

    /// Camera poses at IMU rate, for matching against camera stamps.
    pub fn dense_camera_trajectory(&self, chain: &FrameChain) -> Vec<StampedPose> {
        self.dense_lidar_trajectory().into_iter().map(|sp| StampedPose::new(sp.t, chain.camera_pose(&sp.pose))).collect()
    }

    pub fn imu_trajectory(&self) -> Vec<StampedPose> {
        self.records.iter().map(|r| StampedPose::new(r.t, r.imu_pose)).collect()
    }
}

/// A single-sequence filter instance.
#[derive(Clone, Debug)]
pub struct Odometry {
    pub config: PipelineConfig,
    chain: FrameChain,
    state: NavState,
    covariance: Covariance24,
    map: VoxelMap,
    time: f64,
    initialized: bool,
    mapped: bool,
}

impl Odometry {
    pub fn new(config: PipelineConfig) -> Result<Self, OdometryError> {
        config.validate()?;
        Ok(Self {
            chain: config.frame_chain(),
            state: NavState::default(),
            covariance: Covariance24::zeros(),
            map: VoxelMap::new(config.map),
            time: f64::NEG_INFINITY,
            initialized: false,
            mapped: false,
            config,
        })
    }

    pub fn state(&self) -> &NavState {
        &self.state
    }

    pub fn covariance(&self) -> &Covariance24 {
        &self.covariance
    }

    pub fn map(&self) -> &VoxelMap {
        &self.map
    }

    pub fn time(&self) -> f64 {
        self.time
    }

    /// Static initialization from the first `init_duration` seconds of IMU.
    /// Returns the initialization time, at which the IMU frame is the global
    /// frame.
    pub fn initialize(&mut self, imu: &[ImuSample]) -> Result<f64, OdometryError> {
        let t0 = imu.first().ok_or(PropagationError::Coverage { from: 0.0, to: 0.0 })?.t;
        let t_end = t0 + self.config.pipeline.init_duration;
        let n = imu.partition_point(|s| s.t <= t_end + 1e-9);
        let (state, cov) = static_initialize(&imu[..n], &self.config.init)?;
        self.state = state.with_extrinsic(&self.chain.imu_lidar);
        self.covariance = cov;
        self.time = imu[n - 1].t;
        self.initialized = true;
        Ok(self.time)
    }

    /// Propagates to the end of `scan`, undistorts it, runs the iterated
    /// update (skipped on the first scan, which seeds the map), inserts
    /// inlier and unassociated points and emits the poses.
    pub fn process_scan(&mut self, scan: &LidarScan, imu: &[ImuSample]) -> Result<ScanRecord, OdometryError> {
        if !self.initialized {
            return Err(OdometryError::NotInitialized);
        }
        let gap = self.config.pipeline.max_imu_gap;
        let end = scan.frame_time + self.config.pipeline.scan_period;
        if !(end > self.time) {
            return Err(OdometryError::StaleScan { end, current: self.time });
        }
        let (prior, prior_cov, _) = integrate(&self.state, &self.covariance, imu, self.time, end, &self.config.noise, gap)?;
        let points = undistort_scan(scan, imu, &prior, end, gap)?;

        let (state, cov, iterations, inliers, rms, degenerate, status) = if !self.mapped {
            (prior, prior_cov, 0, 0, 0.0, false, vec![PointStatus::Unassociated; points.len()])
        } else {
            match iterated_update(&prior, &prior_cov, &points, &self.map, &self.config.update) {
                Ok(out) => {
                    (out.state, out.covariance, out.iterations, out.inliers, out.residual_rms, out.weakly_constrained, out.status)
                }
                Err(MeasurementError::Degenerate { inliers, .. }) => {
                    (prior, prior_cov, 0, inliers, f64::NAN, true, vec![PointStatus::Rejected; points.len()])
                }
                Err(MeasurementError::EmptyScan) => (prior, prior_cov, 0, 0, f64::NAN, true, Vec::new()),
                Err(e) => return Err(e.into()),
            }
        };

        let lidar_pose = state.lidar_pose();
        let to_insert: Vec<_> = points
            .iter()
            .zip(&status)
            .filter(|(_, s)| **s != PointStatus::Rejected)
            .map(|(p, _)| (lidar_pose.transform_point(p), self.config.update.point_covariance(p)))
            .collect();
        self.map.insert_points(&to_insert, &lidar_pose.translation);
        if let Some(radius) = self.config.pipeline.map_radius {
            self.map.evict(&lidar_pose.translation, radius);
        }
        self.mapped |= !to_insert.is_empty();

        let interval_poses = interval_lidar_poses(imu, &state, self.time, end, gap)?;
        self.state = state;
        self.covariance = cov;
        self.time = end;
        Ok(ScanRecord {
            t: end,
            imu_pose: state.imu_pose(),
            lidar_pose,
            camera_pose: self.chain.camera_pose(&lidar_pose),
            covariance_diagonal: cov.diagonal(),
            iterations,
            inliers,
            residual_rms: rms,
            degenerate,
            interval_poses,
        })
    }
}

/// Applies latencies, recombines scans and runs the whole log.
pub fn run_log(log: &SensorLog, config: &PipelineConfig) -> Result<OdometryOutput, OdometryError> {
    let mut odom = Odometry::new(*config)?;
    let lat = config.latency;
    let imu: Vec<ImuSample> = log.imu.iter().map(|s| ImuSample { t: s.t - lat.imu, ..*s }).collect();
    let Some(first) = log.scans.first() else {
        return Err(SimError::Log { path: "scans".into(), msg: "no LiDAR scans in log".into() }.into());
    };
    let stream: Vec<(f64, Vector3<f64>)> =
        log.scans.iter().flat_map(|s| (0..s.len()).map(move |i| (s.point_time(i) - lat.lidar, s.points[i].position))).collect();
    let scans = recombine_scan(&stream, config.pipeline.scan_period, first.frame_time - lat.lidar)?;

    let init_time = odom.initialize(&imu)?;
    let imu_end = imu.last().map_or(f64::NEG_INFINITY, |s| s.t);
    let mut records = Vec::new();
    for scan in &scans {
        let end = scan.frame_time + config.pipeline.scan_period;
        if scan.frame_time < init_time - 1e-9 || end > imu_end + 1e-9 {
            continue;
        }
        records.push(odom.process_scan(scan, &imu)?);
    }
    if records.is_empty() {
        return Err(OdometryError::NoScans(init_time));
    }
    Ok(OdometryOutput { init_time, records, map: odom.map })
}

/// Paths written by [`write_outputs`].
#[derive(Clone, Debug)]
pub struct OutputFiles {
    pub lidar_trajectory: PathBuf,
    pub camera_trajectory: PathBuf,
    pub diagnostics: PathBuf,
    pub map: PathBuf,
}

/// `lidar_trajectory.csv` holds one scan-end pose per scan; `camera_trajectory.csv`
/// holds camera poses at IMU rate so it can be matched against camera stamps.
pub fn write_outputs(out_dir: &Path, output: &OdometryOutput, chain: &FrameChain) -> Result<OutputFiles, OdometryError> {
    fs::create_dir_all(out_dir).map_err(|e| io_err(out_dir, e))?;
    let files = OutputFiles {
        lidar_trajectory: out_dir.join("lidar_trajectory.csv"),
        camera_trajectory: out_dir.join("camera_trajectory.csv"),
        diagnostics: out_dir.join("diagnostics.csv"),
        map: out_dir.join("map.ply"),
    };
    let lidar = output.lidar_trajectory();
    let camera =
        lidar_to_camera_trajectory(&output.dense_lidar_trajectory(), chain).map_err(|e| io_err(&files.camera_trajectory, e))?;
    let create = |p: &Path| fs::File::create(p).map(BufWriter::new).map_err(|e| io_err(p, e));

    let mut w = create(&files.lidar_trajectory)?;
    write_trajectory_csv(&mut w, &lidar).and_then(|_| w.flush()).map_err(|e| io_err(&files.lidar_trajectory, e))?;
    let mut w = create(&files.camera_trajectory)?;
    write_trajectory_csv(&mut w, &camera).and_then(|_| w.flush()).map_err(|e| io_err(&files.camera_trajectory, e))?;

    let mut w = create(&files.diagnostics)?;
    let res: std::io::Result<()> = (|| {
        writeln!(w, "t,iters,inliers,residual_rms,degenerate")?;
        for r in &output.records {
            writeln!(w, "{},{},{},{},{}", r.t, r.iterations, r.inliers, r.residual_rms, r.degenerate as u8)?;
        }
        w.flush()
    })();
    res.map_err(|e| io_err(&files.diagnostics, e))?;

    let mut w = create(&files.map)?;
    output.map.write_ply(&mut w).and_then(|_| w.flush()).map_err(|e| io_err(&files.map, e))?;
    Ok(files)
}

/// Reads a log directory, runs the pipeline and writes trajectories,
/// diagnostics and the map into `out_dir`.
pub fn run_sequence(log_dir: &Path, config: &PipelineConfig, out_dir: &Path) -> Result<OdometryOutput, OdometryError> {
    let log = read_log(log_dir)?;
    let output = run_log(&log, config)?;
    write_outputs(out_dir, &output, &config.frame_chain())?;
    Ok(output)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::transform_point;
    use crate::simulation::{sample_imu, ImuConfig};
    use crate::simulation::{sample_lidar_scan, LidarConfig, ScanPattern, SceneModel, SimConfig, TrajectorySpec};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn config_roundtrips_through_toml() {
        let cfg = PipelineConfig::default();
        let text = cfg.to_toml_string();
        assert!(text.contains("[noise]") && text.contains("[chain]") && text.contains("[latency]"));
        let back = PipelineConfig::from_toml_str(&text).unwrap();
        assert_eq!(back.noise, cfg.noise);
        assert_eq!(back.update, cfg.update);
        let chain = back.frame_chain();
        assert!((chain.imu_lidar.translation - default_chain().imu_lidar.translation).norm() < 1e-15);
    }

    #[test]
    fn config_errors_are_descriptive() {
        let err = PipelineConfig::from_toml_str("[update]\ntua = 3.0\n").unwrap_err().to_string();
        assert!(err.contains("tua"), "{err}");
        let err = PipelineConfig::from_toml_str("[pipeline]\nscan_period = 0.0\n").unwrap_err();
        assert!(matches!(err, OdometryError::EmptyPeriod(_)));
        let err = PipelineConfig::from_toml_str("[chain]\nimu_lidar = [0, 0, 0, 0, 0, 0, 2]\n").unwrap_err();
        assert!(err.to_string().contains("imu_lidar"));
    }

    fn stream(n: usize, duration: f64) -> Vec<(f64, Vector3<f64>)> {
        (0..n).map(|i| (i as f64 * duration / n as f64, Vector3::new(i as f64, 0.0, 1.0))).collect()
    }

    #[test]
    fn recombination_buckets_by_period() {
        let scans = recombine_scan(&stream(1000, 1.0), 0.1, 0.0).unwrap();
        assert_eq!(scans.len(), 10);
        assert!(recombine_scan(&[], 0.1, 0.0).unwrap().is_empty());
        assert!(matches!(recombine_scan(&stream(10, 1.0), 0.0, 0.0), Err(OdometryError::EmptyPeriod(_))));
        let mut bad = stream(10, 1.0);
        bad.swap(3, 4);
        assert!(matches!(recombine_scan(&bad, 0.1, 0.0), Err(OdometryError::NonMonotone { index: 4, .. })));
    }

    #[test]
    fn recombination_preserves_the_multiset() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut t = 0.0;
        let input: Vec<_> = (0..500)
            .map(|_| {
                t += rng.random_range(0.0..0.01);
                (t, Vector3::new(rng.random(), rng.random(), rng.random()))
            })
            .collect();
        let scans = recombine_scan(&input, 0.1, 0.0).unwrap();
        let out: Vec<_> = scans.iter().flat_map(|s| (0..s.len()).map(move |i| (s.point_time(i), s.points[i].position))).collect();
        assert_eq!(out.len(), input.len());
        for (a, b) in out.iter().zip(&input) {
            assert!((a.0 - b.0).abs() < 1e-12);
            assert_eq!(a.1, b.1);
        }
        assert!(scans.iter().all(|s| s.points.iter().all(|p| p.offset >= 0.0 && p.offset < 0.1 + 1e-12)));
    }

    fn level_imu(duration: f64, accel_x: f64) -> Vec<ImuSample> {
        (0..=(duration * 200.0).round() as usize)
            .map(|i| ImuSample::new(i as f64 / 200.0, Vector3::zeros(), Vector3::new(accel_x, 0.0, 9.81)))
            .collect()
    }

    fn scan_of(points: &[(f64, Vector3<f64>)], frame_time: f64) -> LidarScan {
        LidarScan { frame_time, points: points.iter().map(|(o, p)| LidarPoint { offset: *o, position: *p }).collect() }
    }

    #[test]
    fn static_rig_points_are_unchanged() {
        let imu = level_imu(1.0, 0.0);
        let state = NavState::default().with_extrinsic(&default_chain().imu_lidar);
        let pts = [(0.0, Vector3::new(1.0, 2.0, 3.0)), (0.05, Vector3::new(-1.0, 0.5, 2.0))];
        let out = undistort_scan(&scan_of(&pts, 0.5), &imu, &state, 0.6, 0.1).unwrap();
        for (o, (_, p)) in out.iter().zip(&pts) {
            assert!((o - p).norm() < 1e-12);
        }
    }

    #[test]
    fn constant_velocity_shift_is_analytic() {
        let imu = level_imu(1.0, 0.0);
        let mut state = NavState::default();
        state.velocity = Vector3::new(1.0, 0.0, 0.0);
        let p = Vector3::new(2.0, 0.0, 1.0);
        let out = undistort_scan(&scan_of(&[(0.05, p)], 0.5), &imu, &state, 0.6, 0.1).unwrap();
        assert!((out[0] - (p - Vector3::new(0.05, 0.0, 0.0))).norm() < 1e-12);
    }

    #[test]
    fn imu_gap_inside_scan_is_an_error() {
        let mut imu = level_imu(1.0, 0.0);
        imu.retain(|s| !(0.52..0.7).contains(&s.t));
        let state = NavState::default();
        let err = undistort_scan(&scan_of(&[(0.0, Vector3::x())], 0.5), &imu, &state, 0.6, 0.1).unwrap_err();
        assert!(matches!(err, OdometryError::Propagation(PropagationError::ImuGap { .. })));
    }

    fn true_state(spec: &TrajectorySpec, t: f64, chain: &FrameChain) -> NavState {
        let k = spec.kinematics(t);
        let mut x = NavState::default().with_extrinsic(&chain.imu_lidar);
        x.attitude = k.pose.rotation;
        x.position = k.pose.translation;
        x.velocity = k.velocity;
        x
    }

    #[test]
    fn simulated_scans_undistort_onto_planes() {
        let spec = TrajectorySpec::benchmark();
        let chain = default_chain();
        let scene = SceneModel::corner_room();
        let imu = sample_imu(&spec, &ImuConfig::noiseless(200.0), 0).unwrap();
        let cfg = LidarConfig { range_noise: 0.0, ..LidarConfig::default() };
        let mut worst: f64 = 0.0;
        let mut worst_raw: f64 = 0.0;
        for k in [15u64, 42, 77] {
            let t0 = k as f64 * 0.1;
            let scan =
                sample_lidar_scan(&spec, &chain.imu_lidar, &scene, t0, &ScanPattern::quasi_random(2000, k), &cfg, k).unwrap();
            let end = true_state(&spec, t0 + 0.1, &chain);
            let pts = undistort_scan(&scan, &imu, &end, t0 + 0.1, 0.1).unwrap();
            let pose = end.lidar_pose();
            for (p, raw) in pts.iter().zip(&scan.points) {
                worst = worst.max(scene.distance_to_nearest_plane(&transform_point(&pose, p)));
                worst_raw = worst_raw.max(scene.distance_to_nearest_plane(&transform_point(&pose, &raw.position)));
            }
        }
        assert!(worst < 1e-3, "max deviation {worst}");
        assert!(worst_raw > 10.0 * worst, "raw {worst_raw} vs undistorted {worst}");
    }

    fn short_benchmark(duration: f64) -> SensorLog {
        let mut cfg = SimConfig::benchmark_noiseless();
        cfg.trajectory.duration = duration;
        crate::simulation::simulate_sequence(&cfg, 1).unwrap()
    }

    #[test]
    fn first_scan_anchors_identity_and_noiseless_errors_stay_small() {
        let log = short_benchmark(4.0);
        let out = run_log(&log, &PipelineConfig::default()).unwrap();
        assert!((out.init_time - 1.0).abs() < 1e-9);
        let chain = default_chain();
        let spec = TrajectorySpec { duration: 4.0, ..TrajectorySpec::benchmark() };
        let world_from_global = spec.kinematics(out.init_time).pose;
        let first = &out.records[0];
        assert_eq!(first.iterations, 0);
        let anchor = spec.kinematics(first.t).pose;
        let expected_first = world_from_global.inverse().compose(&anchor);
        assert!((first.imu_pose.translation - expected_first.translation).norm() < 1e-4);
        let mut worst: f64 = 0.0;
        for r in &out.records {
            let truth = world_from_global.inverse().compose(&spec.kinematics(r.t).pose).compose(&chain.imu_lidar);
            worst = worst.max((r.lidar_pose.translation - truth.translation).norm());
            let cam = r.lidar_pose.compose(&chain.lidar_camera);
            assert!((cam.translation - r.camera_pose.translation).norm() < 1e-12);
        }
        assert!(worst < 1e-3, "worst per-scan error {worst}");
        assert!(out.records.windows(2).all(|w| w[1].t > w[0].t));

        let dense = out.dense_lidar_trajectory();
        assert!(dense.len() > 15 * out.records.len());
        assert!(dense.windows(2).all(|w| w[1].t > w[0].t + 1e-6));
        for r in &out.records {
            let last = r.interval_poses.last().unwrap();
            assert!((last.t - r.t).abs() < 1e-12);
            assert!((last.pose.translation - r.lidar_pose.translation).norm() < 1e-12);
        }
        let worst_dense = dense
            .iter()
            .map(|sp| {
                let truth = world_from_global.inverse().compose(&spec.kinematics(sp.t).pose).compose(&chain.imu_lidar);
                (sp.pose.translation - truth.translation).norm()
            })
            .fold(0.0, f64::max);
        assert!(worst_dense < 2e-3, "worst dense error {worst_dense}");
    }

    #[test]
    fn imu_gap_mid_sequence_fails_without_output() {
        let mut log = short_benchmark(2.0);
        log.imu.retain(|s| !(1.52..1.7).contains(&s.t));
        let err = run_log(&log, &PipelineConfig::default()).unwrap_err();
        assert!(matches!(err, OdometryError::Propagation(PropagationError::ImuGap { .. })), "{err}");
    }

    #[test]
    fn processing_requires_initialization() {
        let mut odom = Odometry::new(PipelineConfig::default()).unwrap();
        let err = odom.process_scan(&LidarScan::default(), &[]).unwrap_err();
        assert!(matches!(err, OdometryError::NotInitialized));
    }
}
