//! Synthetic sensor rig: analytic trajectories, IMU and LiDAR sampling over a
//! plane-world scene, and clocked camera/LiDAR timestamps.

mod log;
mod scene;

pub use log::{read_log, write_log, SensorLog};
pub use scene::{SceneModel, ScenePlane};

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::geometry::{so3_right_jacobian, FrameChain, Pose, Rotation, StampedPose};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("time {t} s outside trajectory range [0, {duration}] s")]
    OutOfRange { t: f64, duration: f64 },
    #[error("invalid parameter `{name}`: {msg}")]
    InvalidParameter { name: &'static str, msg: String },
    #[error("scene has no planes")]
    EmptyScene,
    #[error("log {path}: {msg}")]
    Log { path: String, msg: String },
}

/// Quintic smoothstep with its first and second derivatives. C² at both ends.
fn smootherstep(x: f64) -> (f64, f64, f64) {
    if x <= 0.0 {
        return (0.0, 0.0, 0.0);
    }
    if x >= 1.0 {
        return (1.0, 0.0, 0.0);
    }
    let x2 = x * x;
    let x3 = x2 * x;
    (x3 * (10.0 - 15.0 * x + 6.0 * x2), 30.0 * x2 * (1.0 - x) * (1.0 - x), 60.0 * x * (1.0 - x) * (1.0 - 2.0 * x))
}

/// Per-axis sum-of-sinusoids `A·sin(ω·τ + φ)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Sinusoid3 {
    pub amplitude: Vector3<f64>,
    pub frequency: Vector3<f64>,
    pub phase: Vector3<f64>,
}

impl Sinusoid3 {
    pub fn zero() -> Self {
        Self { amplitude: Vector3::zeros(), frequency: Vector3::zeros(), phase: Vector3::zeros() }
    }

    /// Value and first two derivatives at `tau`.
    fn eval(&self, tau: f64) -> [Vector3<f64>; 3] {
        let mut out = [Vector3::zeros(); 3];
        for i in 0..3 {
            let (a, w, p) = (self.amplitude[i], self.frequency[i], self.phase[i]);
            let arg = w * tau + p;
            out[0][i] = a * (arg.sin() - p.sin());
            out[1][i] = a * w * arg.cos();
            out[2][i] = -a * w * w * arg.sin();
        }
        out
    }
}

/// Smooth analytic rig trajectory: static for `static_duration`, then blends
/// into sinusoidal motion over `ramp_duration`.
///
/// The pose is that of the IMU body in the world frame:
/// `p(t) = p₀ + w(t)·s(τ)`, `R(t) = R₀·Exp(w(t)·θ(τ))`, `τ = t − static_duration`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrajectorySpec {
    pub origin: Pose,
    pub duration: f64,
    pub static_duration: f64,
    pub ramp_duration: f64,
    pub position: Sinusoid3,
    pub rotation: Sinusoid3,
}

/// Position/velocity/acceleration and attitude/body-rate at one instant.
#[derive(Clone, Copy, Debug)]
pub struct Kinematics {
    pub pose: Pose,
    pub velocity: Vector3<f64>,
    pub acceleration: Vector3<f64>,
    pub body_rate: Vector3<f64>,
}

impl TrajectorySpec {
    pub fn stationary(origin: Pose, duration: f64) -> Self {
        Self {
            origin,
            duration,
            static_duration: duration,
            ramp_duration: 1.0,
            position: Sinusoid3::zero(),
            rotation: Sinusoid3::zero(),
        }
    }

    /// 10 s hand-held style motion: 1 s at rest, then up to ~0.5 m/s and ~1 rad/s.
    pub fn benchmark() -> Self {
        Self {
            origin: Pose::new(Rotation::identity(), Vector3::new(0.0, 0.0, 1.2)),
            duration: 10.0,
            static_duration: 1.0,
            ramp_duration: 1.0,
            position: Sinusoid3 {
                amplitude: Vector3::new(0.25, 0.22, 0.08),
                frequency: Vector3::new(1.3, 1.1, 1.7),
                phase: Vector3::new(0.0, 0.7, 1.3),
            },
            rotation: Sinusoid3 {
                amplitude: Vector3::new(0.25, 0.2, 0.45),
                frequency: Vector3::new(1.9, 2.3, 1.4),
                phase: Vector3::new(0.3, 1.1, 0.0),
            },
        }
    }

    fn blend(&self, t: f64) -> (f64, f64, f64) {
        let (w, dw, ddw) = smootherstep((t - self.static_duration) / self.ramp_duration);
        let r = self.ramp_duration;
        (w, dw / r, ddw / (r * r))
    }

    fn check(&self, t: f64) -> Result<(), SimError> {
        if !(0.0..=self.duration).contains(&t) {
            return Err(SimError::OutOfRange { t, duration: self.duration });
        }
        Ok(())
    }

    /// Full kinematic state. `t` is not range-checked.
    pub fn kinematics(&self, t: f64) -> Kinematics {
        let tau = t - self.static_duration;
        let (w, dw, ddw) = self.blend(t);
        let [s, ds, dds] = self.position.eval(tau);
        let position = self.origin.translation + w * s;
        let velocity = dw * s + w * ds;
        let acceleration = ddw * s + 2.0 * dw * ds + w * dds;

        let [g, dg, _] = self.rotation.eval(tau);
        let theta = w * g;
        let dtheta = dw * g + w * dg;
        let attitude = self.origin.rotation * Rotation::exp(&theta);
        let body_rate = so3_right_jacobian(&theta) * dtheta;
        Kinematics { pose: Pose::new(attitude, position), velocity, acceleration, body_rate }
    }

    /// Analytic IMU pose at `t`.
    pub fn ground_truth_pose(&self, t: f64) -> Result<Pose, SimError> {
        self.check(t)?;
        Ok(self.kinematics(t).pose)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ImuSample {
    pub t: f64,
    pub gyro: Vector3<f64>,
    pub accel: Vector3<f64>,
}

impl ImuSample {
    pub fn new(t: f64, gyro: Vector3<f64>, accel: Vector3<f64>) -> Self {
        Self { t, gyro, accel }
    }

    /// Linear interpolation between two samples.
    pub fn lerp(a: &ImuSample, b: &ImuSample, t: f64) -> ImuSample {
        let s = if b.t > a.t { (t - a.t) / (b.t - a.t) } else { 0.0 };
        ImuSample::new(t, a.gyro + (b.gyro - a.gyro) * s, a.accel + (b.accel - a.accel) * s)
    }
}

/// IMU sampling parameters. Noise terms are white-noise densities (per √Hz).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ImuConfig {
    pub rate_hz: f64,
    pub gyro_noise: f64,
    pub accel_noise: f64,
    pub gyro_bias: Vector3<f64>,
    pub accel_bias: Vector3<f64>,
    pub gravity: Vector3<f64>,
}

impl Default for ImuConfig {
    fn default() -> Self {
        Self {
            rate_hz: 200.0,
            gyro_noise: 1e-3,
            accel_noise: 1e-2,
            gyro_bias: Vector3::zeros(),
            accel_bias: Vector3::zeros(),
            gravity: Vector3::new(0.0, 0.0, -9.81),
        }
    }
}

impl ImuConfig {
    pub fn noiseless(rate_hz: f64) -> Self {
        Self { rate_hz, gyro_noise: 0.0, accel_noise: 0.0, ..Default::default() }
    }
}

/// Samples `ω_m = ω + b_ω + n_ω` and `a_m = Rᵀ(a − g) + b_a + n_a` at `k / rate`
/// over the trajectory duration.
pub fn sample_imu(traj: &TrajectorySpec, cfg: &ImuConfig, seed: u64) -> Result<Vec<ImuSample>, SimError> {
    if !(cfg.rate_hz > 0.0) {
        return Err(SimError::InvalidParameter { name: "rate_hz", msg: format!("must be positive, got {}", cfg.rate_hz) });
    }
    if cfg.gyro_noise < 0.0 || cfg.accel_noise < 0.0 {
        return Err(SimError::InvalidParameter { name: "noise", msg: "noise densities must be non-negative".into() });
    }
    let dt = 1.0 / cfg.rate_hz;
    let gyro_sigma = cfg.gyro_noise / dt.sqrt();
    let accel_sigma = cfg.accel_noise / dt.sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    let std_normal = Normal::new(0.0, 1.0).expect("unit normal");
    let noise3 = |sigma: f64, rng: &mut ChaCha8Rng| {
        Vector3::new(std_normal.sample(rng), std_normal.sample(rng), std_normal.sample(rng)) * sigma
    };
    let n = (traj.duration * cfg.rate_hz + 1e-9).floor() as usize;
    let mut out = Vec::with_capacity(n + 1);
    for k in 0..=n {
        let t = k as f64 / cfg.rate_hz;
        let kin = traj.kinematics(t);
        let r_t = kin.pose.rotation.transpose();
        let gyro = kin.body_rate + cfg.gyro_bias + noise3(gyro_sigma, &mut rng);
        let accel = r_t * (kin.acceleration - cfg.gravity) + cfg.accel_bias + noise3(accel_sigma, &mut rng);
        out.push(ImuSample::new(t, gyro, accel));
    }
    Ok(out)
}

/// One LiDAR return: time offset from the frame start and position in the
/// LiDAR frame at that instant.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LidarPoint {
    pub offset: f64,
    pub position: Vector3<f64>,
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct LidarScan {
    pub frame_time: f64,
    pub points: Vec<LidarPoint>,
}

impl LidarScan {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn point_time(&self, i: usize) -> f64 {
        self.frame_time + self.points[i].offset
    }
}

/// Ordered ray directions in the LiDAR frame; ray `k` of `n` fires at
/// `k·period/n` after the frame start.
#[derive(Clone, Debug, PartialEq)]
pub struct ScanPattern {
    pub directions: Vec<Vector3<f64>>,
}

fn radical_inverse(mut i: u64, base: u64) -> f64 {
    let inv = 1.0 / base as f64;
    let mut f = inv;
    let mut r = 0.0;
    while i > 0 {
        r += f * (i % base) as f64;
        i /= base;
        f *= inv;
    }
    r
}

impl ScanPattern {
    /// Non-repetitive quasi-random spherical pattern: a Halton (2, 3) sequence
    /// mapped to the unit sphere, continuing where the previous scan stopped.
    pub fn quasi_random(rays: usize, scan_index: u64) -> Self {
        let start = scan_index * rays as u64 + 1;
        let directions = (0..rays as u64)
            .map(|k| {
                let i = start + k;
                let z = 1.0 - 2.0 * radical_inverse(i, 2);
                let phi = 2.0 * std::f64::consts::PI * radical_inverse(i, 3);
                let rho = (1.0 - z * z).max(0.0).sqrt();
                Vector3::new(rho * phi.cos(), rho * phi.sin(), z)
            })
            .collect();
        Self { directions }
    }

    pub fn from_directions(directions: Vec<Vector3<f64>>) -> Self {
        Self { directions: directions.into_iter().map(|d| d.normalize()).collect() }
    }
}

/// LiDAR sampling parameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LidarConfig {
    pub period: f64,
    pub range_noise: f64,
    pub max_range: f64,
    pub min_range: f64,
}

impl Default for LidarConfig {
    fn default() -> Self {
        Self { period: 0.1, range_noise: 0.002, max_range: 40.0, min_range: 0.05 }
    }
}

/// Ray-casts one scan while the rig moves: ray `k` leaves from the LiDAR pose at
/// its own firing instant, so the returned points carry motion distortion.
pub fn sample_lidar_scan(
    traj: &TrajectorySpec,
    imu_lidar: &Pose,
    scene: &SceneModel,
    frame_time: f64,
    pattern: &ScanPattern,
    cfg: &LidarConfig,
    seed: u64,
) -> Result<LidarScan, SimError> {
    if scene.planes.is_empty() {
        return Err(SimError::EmptyScene);
    }
    if cfg.range_noise < 0.0 {
        return Err(SimError::InvalidParameter { name: "range_noise", msg: "must be non-negative".into() });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(2);
    let noise = Normal::new(0.0, cfg.range_noise.max(f64::MIN_POSITIVE)).expect("normal");
    let n = pattern.directions.len().max(1);
    let mut points = Vec::with_capacity(n);
    for (k, dir) in pattern.directions.iter().enumerate() {
        let offset = k as f64 * cfg.period / n as f64;
        let t = (frame_time + offset).clamp(0.0, traj.duration);
        let lidar_pose = traj.kinematics(t).pose.compose(imu_lidar);
        let origin = lidar_pose.translation;
        let d_world = lidar_pose.rotation * *dir;
        let draw: f64 = noise.sample(&mut rng);
        let Some((range, _)) = scene.intersect(&origin, &d_world, cfg.max_range) else {
            continue;
        };
        let range = if cfg.range_noise > 0.0 { range + draw } else { range };
        if range < cfg.min_range {
            continue;
        }
        points.push(LidarPoint { offset, position: *dir * range });
    }
    Ok(LidarScan { frame_time, points })
}

/// Shared-clock configuration: a PPS pulse, a frequency-divided camera trigger and
/// the LiDAR frame rate, plus constant per-stream latencies.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClockConfig {
    pub pps_hz: f64,
    pub camera_hz: f64,
    pub lidar_hz: f64,
    pub camera_offset: f64,
    pub lidar_offset: f64,
}

impl Default for ClockConfig {
    fn default() -> Self {
        Self { pps_hz: 1.0, camera_hz: 20.0, lidar_hz: 10.0, camera_offset: 0.0, lidar_offset: 0.0 }
    }
}

impl ClockConfig {
    /// Camera frames per LiDAR frame.
    pub fn ratio(&self) -> usize {
        (self.camera_hz / self.lidar_hz).round() as usize
    }

    pub fn validate(&self) -> Result<(), SimError> {
        for (name, v) in [("pps_hz", self.pps_hz), ("camera_hz", self.camera_hz), ("lidar_hz", self.lidar_hz)] {
            if !(v > 0.0) {
                return Err(SimError::InvalidParameter { name, msg: format!("must be positive, got {v}") });
            }
        }
        let ratio = self.camera_hz / self.lidar_hz;
        if (ratio - ratio.round()).abs() > 1e-9 || ratio.round() < 1.0 {
            return Err(SimError::InvalidParameter {
                name: "camera_hz",
                msg: format!("camera rate {} is not an integer multiple of lidar rate {}", self.camera_hz, self.lidar_hz),
            });
        }
        Ok(())
    }
}

/// LiDAR and camera stamps on the shared time base over `[0, duration)`.
pub fn generate_timestamps(clock: &ClockConfig, duration: f64) -> Result<(Vec<f64>, Vec<f64>), SimError> {
    clock.validate()?;
    if !(duration > 0.0) {
        return Err(SimError::InvalidParameter { name: "duration", msg: "must be positive".into() });
    }
    let stamps = |hz: f64, offset: f64| -> Vec<f64> {
        let n = (duration * hz - 1e-9).ceil().max(0.0) as u64;
        (0..n).map(|k| k as f64 / hz + offset).collect()
    };
    Ok((stamps(clock.lidar_hz, clock.lidar_offset), stamps(clock.camera_hz, clock.camera_offset)))
}

/// Everything needed to synthesize a complete sensor log.
#[derive(Clone, Debug, PartialEq)]
pub struct SimConfig {
    pub trajectory: TrajectorySpec,
    pub scene: SceneModel,
    pub imu: ImuConfig,
    pub lidar: LidarConfig,
    pub clock: ClockConfig,
    pub chain: FrameChain,
    pub rays_per_scan: usize,
    /// Rate of the gripper-width channel.
    pub gripper_hz: f64,
    pub gripper_offset: f64,
    /// Bytes of synthetic payload per camera frame.
    pub image_bytes: usize,
}

impl SimConfig {
    /// Noiseless 10 s corner-room benchmark.
    pub fn benchmark_noiseless() -> Self {
        let mut cfg = Self::benchmark();
        cfg.imu.gyro_noise = 0.0;
        cfg.imu.accel_noise = 0.0;
        cfg.imu.gyro_bias = Vector3::zeros();
        cfg.imu.accel_bias = Vector3::zeros();
        cfg.lidar.range_noise = 0.0;
        cfg
    }

    /// 10 s corner-room benchmark with consumer-grade sensor noise.
    pub fn benchmark() -> Self {
        Self {
            trajectory: TrajectorySpec::benchmark(),
            scene: SceneModel::corner_room(),
            imu: ImuConfig {
                gyro_bias: Vector3::new(0.002, -0.001, 0.0015),
                accel_bias: Vector3::new(0.02, -0.01, 0.015),
                ..ImuConfig::default()
            },
            lidar: LidarConfig::default(),
            clock: ClockConfig::default(),
            chain: default_chain(),
            rays_per_scan: 2000,
            gripper_hz: 60.0,
            gripper_offset: 0.0,
            image_bytes: 64,
        }
    }
}

/// Rig extrinsics used by the simulator defaults.
pub fn default_chain() -> FrameChain {
    FrameChain {
        imu_lidar: Pose::new(Rotation::exp(&Vector3::new(0.01, -0.02, 0.03)), Vector3::new(0.04, 0.01, -0.03)),
        lidar_camera: Pose::new(Rotation::exp(&Vector3::new(-1.2, 1.2, -1.2)), Vector3::new(0.05, -0.02, -0.04)),
        lidar_tcp: Pose::new(Rotation::identity(), Vector3::new(0.0, 0.0, -0.2)),
    }
}

fn gripper_width(t: f64) -> f64 {
    0.045 + 0.035 * (0.9 * t).sin()
}

/// Synthesizes a full sensor log. Deterministic in `(cfg, seed)`.
pub fn simulate_sequence(cfg: &SimConfig, seed: u64) -> Result<SensorLog, SimError> {
    let traj = &cfg.trajectory;
    let imu = sample_imu(traj, &cfg.imu, seed)?;
    let clock = ClockConfig { lidar_offset: 0.0, ..cfg.clock };
    let (lidar_times, camera_stamps) = generate_timestamps(&clock, traj.duration)?;
    let mut scans = Vec::new();
    for (k, &t) in lidar_times.iter().enumerate() {
        if t + cfg.lidar.period > traj.duration + 1e-9 {
            break;
        }
        let pattern = ScanPattern::quasi_random(cfg.rays_per_scan, k as u64);
        let scan_seed = seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(k as u64);
        let mut scan = sample_lidar_scan(traj, &cfg.chain.imu_lidar, &cfg.scene, t, &pattern, &cfg.lidar, scan_seed)?;
        scan.frame_time += cfg.clock.lidar_offset;
        scans.push(scan);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(3);
    let images = camera_stamps.iter().map(|_| (0..cfg.image_bytes).map(|_| rng.random::<u8>()).collect()).collect();
    let n_grip = (traj.duration * cfg.gripper_hz - 1e-9).ceil() as usize;
    let gripper = (0..n_grip)
        .map(|k| {
            let t = k as f64 / cfg.gripper_hz;
            (t + cfg.gripper_offset, gripper_width(t))
        })
        .collect();
    let ground_truth =
        imu.iter().map(|s| StampedPose::new(s.t, traj.kinematics(s.t).pose.compose(&cfg.chain.imu_lidar))).collect();
    Ok(SensorLog { imu, scans, camera_stamps, images, gripper, ground_truth })
}
