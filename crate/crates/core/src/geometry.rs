//! Rotation and pose algebra, the navigation-state manifold and the rig frame chain.
//!
//! Rotations are plain orthonormal 3×3 matrices. Perturbations are applied on the
//! right (`R ⊞ δθ = R·Exp(δθ)`), so every rotational error lives in the body frame.

use std::fmt;
use std::io::{BufRead, Write};
use std::ops::Mul;

use nalgebra::{Matrix3, SMatrix, SVector, UnitQuaternion, Vector3};
use thiserror::Error;

/// Error-state dimension of [`NavState`].
pub const STATE_DIM: usize = 24;

pub type Vec24 = SVector<f64, STATE_DIM>;
pub type Mat24 = SMatrix<f64, STATE_DIM, STATE_DIM>;

/// Offsets of each block inside the 24-dimensional error state.
pub mod block {
    pub const ATT: usize = 0;
    pub const POS: usize = 3;
    pub const VEL: usize = 6;
    pub const BG: usize = 9;
    pub const BA: usize = 12;
    pub const GRAV: usize = 15;
    pub const EXT_ROT: usize = 18;
    pub const EXT_POS: usize = 21;
}

/// Rotations are re-projected onto SO(3) after this many compositions.
pub const RENORMALIZE_EVERY: u32 = 1000;

const SMALL_ANGLE: f64 = 1e-8;

#[derive(Debug, Error, PartialEq)]
pub enum GeometryError {
    #[error("non-finite rotation vector {0:?}")]
    NonFinite([f64; 3]),
    #[error("timestamps must be strictly increasing (index {index}: {prev} -> {next})")]
    NonMonotone { index: usize, prev: f64, next: f64 },
    #[error("trajectory csv line {line}: {msg}")]
    Csv { line: usize, msg: String },
    #[error("io error: {0}")]
    Io(String),
}

/// Skew-symmetric matrix `⌊v⌋∧` such that `⌊v⌋∧ w = v × w`.
pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// An element of SO(3).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Rotation(Matrix3<f64>);

impl Default for Rotation {
    fn default() -> Self {
        Self::identity()
    }
}

impl Rotation {
    pub fn identity() -> Self {
        Self(Matrix3::identity())
    }

    /// Wraps a matrix that is already orthonormal. No check is performed.
    pub fn from_matrix_unchecked(m: Matrix3<f64>) -> Self {
        Self(m)
    }

    /// Nearest rotation to an arbitrary 3×3 matrix (polar projection).
    pub fn from_matrix_projected(m: &Matrix3<f64>) -> Self {
        let svd = m.svd(true, true);
        let u = svd.u.expect("svd u");
        let v_t = svd.v_t.expect("svd v_t");
        let mut r = u * v_t;
        if r.determinant() < 0.0 {
            let mut u = u;
            u.column_mut(2).neg_mut();
            r = u * v_t;
        }
        Self(r)
    }

    pub fn from_quaternion(q: &UnitQuaternion<f64>) -> Self {
        Self(*q.to_rotation_matrix().matrix())
    }

    pub fn to_quaternion(&self) -> UnitQuaternion<f64> {
        UnitQuaternion::from_matrix(&self.0)
    }

    /// Exponential map; see [`so3_exp`].
    pub fn exp(omega: &Vector3<f64>) -> Self {
        so3_exp_unchecked(omega)
    }

    /// Logarithm map; see [`so3_log`].
    pub fn log(&self) -> Vector3<f64> {
        so3_log(self)
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.0
    }

    pub fn transpose(&self) -> Self {
        Self(self.0.transpose())
    }

    pub fn inverse(&self) -> Self {
        self.transpose()
    }

    pub fn rotate(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.0 * v
    }

    /// Rotation angle in radians, in `[0, π]`.
    pub fn angle(&self) -> f64 {
        self.log().norm()
    }

    pub fn orthonormality_error(&self) -> f64 {
        (self.0.transpose() * self.0 - Matrix3::identity()).amax()
    }

    pub fn renormalized(&self) -> Self {
        Self::from_matrix_projected(&self.0)
    }
}

impl Mul for Rotation {
    type Output = Rotation;
    fn mul(self, rhs: Rotation) -> Rotation {
        Rotation(self.0 * rhs.0)
    }
}

impl Mul<Vector3<f64>> for Rotation {
    type Output = Vector3<f64>;
    fn mul(self, rhs: Vector3<f64>) -> Vector3<f64> {
        self.0 * rhs
    }
}

/// Rodrigues' formula, with a second-order series near the identity.
pub fn so3_exp(omega: &Vector3<f64>) -> Result<Rotation, GeometryError> {
    if !omega.iter().all(|v| v.is_finite()) {
        return Err(GeometryError::NonFinite([omega.x, omega.y, omega.z]));
    }
    Ok(so3_exp_unchecked(omega))
}

fn so3_exp_unchecked(omega: &Vector3<f64>) -> Rotation {
    let theta = omega.norm();
    let k = skew(omega);
    if theta < SMALL_ANGLE {
        return Rotation(Matrix3::identity() + k + 0.5 * k * k);
    }
    let a = theta.sin() / theta;
    let b = (1.0 - theta.cos()) / (theta * theta);
    Rotation(Matrix3::identity() + a * k + b * k * k)
}

/// Principal logarithm, `|result| ≤ π`.
///
/// The angle comes from `atan2` of the skew and symmetric parts so it stays well
/// conditioned at both ends of the range; near π the axis is read from the
/// symmetric part instead of the vanishing skew part.
pub fn so3_log(r: &Rotation) -> Vector3<f64> {
    let m = &r.0;
    let skew_vec = 0.5 * Vector3::new(m[(2, 1)] - m[(1, 2)], m[(0, 2)] - m[(2, 0)], m[(1, 0)] - m[(0, 1)]);
    let sin_t = skew_vec.norm();
    let cos_t = (0.5 * (m.trace() - 1.0)).clamp(-1.0, 1.0);
    let theta = sin_t.atan2(cos_t);
    if theta < SMALL_ANGLE {
        // Second order: vee(R - Rᵀ)/2 = θ·a (1 - θ²/6)
        return skew_vec * (1.0 + theta * theta / 6.0);
    }
    if cos_t > -0.9 {
        return skew_vec * (theta / sin_t);
    }
    // (R + Rᵀ)/2 - cosθ·I = (1 - cosθ)·a·aᵀ
    let sym = 0.5 * (m + m.transpose()) - cos_t * Matrix3::identity();
    let mut best = 0;
    for i in 1..3 {
        if sym[(i, i)] > sym[(best, best)] {
            best = i;
        }
    }
    let mut axis: Vector3<f64> = sym.column(best).into_owned();
    axis /= axis.norm();
    if axis.dot(&skew_vec) < 0.0 {
        axis = -axis;
    }
    axis * theta
}

/// Right Jacobian of SO(3): `Exp(φ + δ) ≈ Exp(φ)·Exp(J_r(φ)·δ)`.
pub fn so3_right_jacobian(phi: &Vector3<f64>) -> Matrix3<f64> {
    let theta = phi.norm();
    let k = skew(phi);
    if theta < 1e-5 {
        return Matrix3::identity() - 0.5 * k + k * k / 6.0;
    }
    let t2 = theta * theta;
    Matrix3::identity() - (1.0 - theta.cos()) / t2 * k + (theta - theta.sin()) / (t2 * theta) * k * k
}

/// Inverse of [`so3_right_jacobian`].
pub fn so3_right_jacobian_inv(phi: &Vector3<f64>) -> Matrix3<f64> {
    let theta = phi.norm();
    let k = skew(phi);
    if theta < 1e-5 {
        return Matrix3::identity() + 0.5 * k + k * k / 12.0;
    }
    let t2 = theta * theta;
    let c = 1.0 / t2 - (1.0 + theta.cos()) / (2.0 * theta * theta.sin());
    Matrix3::identity() + 0.5 * k + c * k * k
}

/// Rigid transform `p ↦ R·p + t`.
#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct Pose {
    pub rotation: Rotation,
    pub translation: Vector3<f64>,
}

impl Pose {
    pub fn new(rotation: Rotation, translation: Vector3<f64>) -> Self {
        Self { rotation, translation }
    }

    pub fn identity() -> Self {
        Self::default()
    }

    pub fn from_translation(t: Vector3<f64>) -> Self {
        Self::new(Rotation::identity(), t)
    }

    pub fn inverse(&self) -> Self {
        let r_t = self.rotation.transpose();
        Self::new(r_t, -(r_t * self.translation))
    }

    pub fn compose(&self, other: &Pose) -> Pose {
        Pose::new(self.rotation * other.rotation, self.rotation * other.translation + self.translation)
    }

    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        transform_point(self, p)
    }

    /// `(rotation vector, translation)` of `self⁻¹·other`, used for pose distances.
    pub fn delta(&self, other: &Pose) -> (Vector3<f64>, Vector3<f64>) {
        let d = self.inverse().compose(other);
        (d.rotation.log(), d.translation)
    }
}

impl Mul for Pose {
    type Output = Pose;
    fn mul(self, rhs: Pose) -> Pose {
        self.compose(&rhs)
    }
}

/// `ᴳp = R·p + t`.
pub fn transform_point(pose: &Pose, p: &Vector3<f64>) -> Vector3<f64> {
    pose.rotation.rotate(p) + pose.translation
}

/// Full filter state: attitude, position, velocity, gyro/accel biases, gravity and
/// the IMU←LiDAR extrinsic.
#[derive(Clone, Copy, Debug)]
pub struct NavState {
    pub attitude: Rotation,
    pub position: Vector3<f64>,
    pub velocity: Vector3<f64>,
    pub gyro_bias: Vector3<f64>,
    pub accel_bias: Vector3<f64>,
    pub gravity: Vector3<f64>,
    pub ext_rotation: Rotation,
    pub ext_translation: Vector3<f64>,
    pub(crate) compositions: u32,
}

impl Default for NavState {
    fn default() -> Self {
        Self {
            attitude: Rotation::identity(),
            position: Vector3::zeros(),
            velocity: Vector3::zeros(),
            gyro_bias: Vector3::zeros(),
            accel_bias: Vector3::zeros(),
            gravity: Vector3::new(0.0, 0.0, -9.81),
            ext_rotation: Rotation::identity(),
            ext_translation: Vector3::zeros(),
            compositions: 0,
        }
    }
}

impl PartialEq for NavState {
    fn eq(&self, other: &Self) -> bool {
        self.attitude == other.attitude
            && self.position == other.position
            && self.velocity == other.velocity
            && self.gyro_bias == other.gyro_bias
            && self.accel_bias == other.accel_bias
            && self.gravity == other.gravity
            && self.ext_rotation == other.ext_rotation
            && self.ext_translation == other.ext_translation
    }
}

fn sub3(v: &Vec24, at: usize) -> Vector3<f64> {
    v.fixed_rows::<3>(at).into_owned()
}

impl NavState {
    /// Body (IMU) pose in the global frame.
    pub fn imu_pose(&self) -> Pose {
        Pose::new(self.attitude, self.position)
    }

    /// `ᴵT_L` as currently estimated.
    pub fn extrinsic(&self) -> Pose {
        Pose::new(self.ext_rotation, self.ext_translation)
    }

    /// LiDAR pose in the global frame, `ᴳT_I · ᴵT_L`.
    pub fn lidar_pose(&self) -> Pose {
        self.imu_pose().compose(&self.extrinsic())
    }

    pub fn with_extrinsic(mut self, i_t_l: &Pose) -> Self {
        self.ext_rotation = i_t_l.rotation;
        self.ext_translation = i_t_l.translation;
        self
    }

    pub fn is_finite(&self) -> bool {
        let vecs = [self.position, self.velocity, self.gyro_bias, self.accel_bias, self.gravity, self.ext_translation];
        vecs.iter().all(|v| v.iter().all(|x| x.is_finite()))
            && self.attitude.matrix().iter().all(|x| x.is_finite())
            && self.ext_rotation.matrix().iter().all(|x| x.is_finite())
    }

    /// `x ⊞ δ`: rotation blocks right-multiplied by `Exp`, vector blocks added.
    pub fn boxplus(&self, delta: &Vec24) -> NavState {
        boxplus(self, delta)
    }

    /// `self ⊟ other`.
    pub fn boxminus(&self, other: &NavState) -> Vec24 {
        boxminus(self, other)
    }
}

/// Manifold retraction. Rotations are re-projected every [`RENORMALIZE_EVERY`]
/// compositions to bound drift.
pub fn boxplus(x: &NavState, delta: &Vec24) -> NavState {
    use block::*;
    let compositions = x.compositions + 1;
    let mut attitude = x.attitude * Rotation::exp(&sub3(delta, ATT));
    let mut ext_rotation = x.ext_rotation * Rotation::exp(&sub3(delta, EXT_ROT));
    let compositions = if compositions >= RENORMALIZE_EVERY {
        attitude = attitude.renormalized();
        ext_rotation = ext_rotation.renormalized();
        0
    } else {
        compositions
    };
    NavState {
        attitude,
        position: x.position + sub3(delta, POS),
        velocity: x.velocity + sub3(delta, VEL),
        gyro_bias: x.gyro_bias + sub3(delta, BG),
        accel_bias: x.accel_bias + sub3(delta, BA),
        gravity: x.gravity + sub3(delta, GRAV),
        ext_rotation,
        ext_translation: x.ext_translation + sub3(delta, EXT_POS),
        compositions,
    }
}

/// Inverse of [`boxplus`]: the δ with `x2 ⊞ δ = x1`.
pub fn boxminus(x1: &NavState, x2: &NavState) -> Vec24 {
    use block::*;
    let mut d = Vec24::zeros();
    let mut put = |at: usize, v: Vector3<f64>| d.fixed_rows_mut::<3>(at).copy_from(&v);
    put(ATT, (x2.attitude.transpose() * x1.attitude).log());
    put(POS, x1.position - x2.position);
    put(VEL, x1.velocity - x2.velocity);
    put(BG, x1.gyro_bias - x2.gyro_bias);
    put(BA, x1.accel_bias - x2.accel_bias);
    put(GRAV, x1.gravity - x2.gravity);
    put(EXT_ROT, (x2.ext_rotation.transpose() * x1.ext_rotation).log());
    put(EXT_POS, x1.ext_translation - x2.ext_translation);
    d
}

/// Fixed transforms linking IMU, LiDAR, camera and tool center point.
///
/// Each pose maps coordinates of the second frame into the first, so
/// `ᴵT_C = ᴵT_L · ᴸT_C` and `ᴳT_C = ᴳT_L · ᴸT_C`.
#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct FrameChain {
    pub imu_lidar: Pose,
    pub lidar_camera: Pose,
    pub lidar_tcp: Pose,
}

impl FrameChain {
    pub fn imu_camera(&self) -> Pose {
        self.imu_lidar.compose(&self.lidar_camera)
    }

    pub fn camera_tcp(&self) -> Pose {
        self.lidar_camera.inverse().compose(&self.lidar_tcp)
    }

    pub fn camera_pose(&self, lidar_pose: &Pose) -> Pose {
        lidar_pose.compose(&self.lidar_camera)
    }

    pub fn tcp_pose(&self, lidar_pose: &Pose) -> Pose {
        lidar_pose.compose(&self.lidar_tcp)
    }

    /// TCP pose from a camera pose, `ᴳT_C · (ᴸT_C)⁻¹ · ᴸT_TCP`.
    pub fn tcp_from_camera(&self, camera_pose: &Pose) -> Pose {
        camera_pose.compose(&self.camera_tcp())
    }
}

/// A pose tagged with its timestamp in seconds.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StampedPose {
    pub t: f64,
    pub pose: Pose,
}

impl StampedPose {
    pub fn new(t: f64, pose: Pose) -> Self {
        Self { t, pose }
    }
}

fn check_monotone(poses: &[StampedPose]) -> Result<(), GeometryError> {
    for (i, w) in poses.windows(2).enumerate() {
        if !(w[1].t > w[0].t) {
            return Err(GeometryError::NonMonotone { index: i + 1, prev: w[0].t, next: w[1].t });
        }
    }
    Ok(())
}

/// Camera trajectory from a LiDAR trajectory: each pose becomes `ᴳT_L · ᴸT_C`.
pub fn lidar_to_camera_trajectory(lidar_poses: &[StampedPose], chain: &FrameChain) -> Result<Vec<StampedPose>, GeometryError> {
    check_monotone(lidar_poses)?;
    Ok(lidar_poses.iter().map(|sp| StampedPose::new(sp.t, chain.camera_pose(&sp.pose))).collect())
}

pub const TRAJECTORY_HEADER: &str = "timestamp_s,x,y,z,qx,qy,qz,qw";

/// Writes the `timestamp_s,x,y,z,qx,qy,qz,qw` trajectory format. Floats use the
/// shortest representation that round-trips, so output is lossless and stable.
pub fn write_trajectory_csv<W: Write>(mut w: W, poses: &[StampedPose]) -> std::io::Result<()> {
    writeln!(w, "{TRAJECTORY_HEADER}")?;
    for sp in poses {
        writeln!(w, "{}", pose_csv_fields(sp.t, &sp.pose))?;
    }
    Ok(())
}

/// One trajectory row without newline.
pub fn pose_csv_fields(t: f64, pose: &Pose) -> String {
    let q = pose.rotation.to_quaternion();
    let q = canonical_quaternion(&q);
    let p = pose.translation;
    format!("{t},{},{},{},{},{},{},{}", p.x, p.y, p.z, q.i, q.j, q.k, q.w)
}

fn canonical_quaternion(q: &UnitQuaternion<f64>) -> nalgebra::Quaternion<f64> {
    let q = *q.quaternion();
    if q.w < 0.0 {
        -q
    } else {
        q
    }
}

/// `[x, y, z, qx, qy, qz, qw]` with `qw ≥ 0`.
pub fn pose_to_fields(pose: &Pose) -> [f64; 7] {
    let q = canonical_quaternion(&pose.rotation.to_quaternion());
    let p = pose.translation;
    [p.x, p.y, p.z, q.i, q.j, q.k, q.w]
}

/// Parses seven numbers `x,y,z,qx,qy,qz,qw` into a pose.
pub fn pose_from_fields(vals: &[f64]) -> Option<Pose> {
    if vals.len() != 7 {
        return None;
    }
    let q = nalgebra::Quaternion::new(vals[6], vals[3], vals[4], vals[5]);
    if q.norm() < 1e-12 {
        return None;
    }
    let uq = UnitQuaternion::from_quaternion(q);
    Some(Pose::new(Rotation::from_quaternion(&uq), Vector3::new(vals[0], vals[1], vals[2])))
}

pub fn read_trajectory_csv<R: BufRead>(r: R) -> Result<Vec<StampedPose>, GeometryError> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line.map_err(|e| GeometryError::Io(e.to_string()))?;
        let lineno = i + 1;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if i == 0 {
            if line != TRAJECTORY_HEADER {
                return Err(GeometryError::Csv { line: lineno, msg: format!("expected header `{TRAJECTORY_HEADER}`") });
            }
            continue;
        }
        let vals: Vec<f64> = line
            .split(',')
            .map(|s| s.trim().parse::<f64>())
            .collect::<Result<_, _>>()
            .map_err(|e| GeometryError::Csv { line: lineno, msg: e.to_string() })?;
        if vals.len() != 8 {
            return Err(GeometryError::Csv { line: lineno, msg: format!("expected 8 fields, got {}", vals.len()) });
        }
        let pose = pose_from_fields(&vals[1..])
            .ok_or_else(|| GeometryError::Csv { line: lineno, msg: "degenerate quaternion".into() })?;
        out.push(StampedPose::new(vals[0], pose));
    }
    Ok(out)
}

impl fmt::Display for Pose {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let r = self.rotation.log();
        write!(
            f,
            "t=({:.4}, {:.4}, {:.4}) r=({:.4}, {:.4}, {:.4})",
            self.translation.x, self.translation.y, self.translation.z, r.x, r.y, r.z
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    fn random_vec(rng: &mut impl Rng, scale: f64) -> Vector3<f64> {
        Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)) * scale
    }

    fn random_rotation(rng: &mut impl Rng) -> Rotation {
        let axis = random_vec(rng, 1.0).normalize();
        Rotation::exp(&(axis * rng.random_range(0.0..PI - 1e-3)))
    }

    #[test]
    fn exp_of_zero_is_identity() {
        assert_eq!(so3_exp(&Vector3::zeros()).unwrap(), Rotation::identity());
    }

    #[test]
    fn exp_quarter_turn_maps_x_to_y() {
        let r = so3_exp(&Vector3::new(0.0, 0.0, PI / 2.0)).unwrap();
        let y = r * Vector3::x();
        assert!((y - Vector3::y()).norm() < 1e-15);
    }

    #[test]
    fn exp_rejects_nan() {
        assert!(so3_exp(&Vector3::new(f64::NAN, 0.0, 0.0)).is_err());
    }

    #[test]
    fn log_of_known_rotations() {
        assert_eq!(so3_log(&Rotation::identity()), Vector3::zeros());
        let r = Rotation::exp(&Vector3::new(0.0, 0.0, 0.3));
        assert!((so3_log(&r) - Vector3::new(0.0, 0.0, 0.3)).norm() < 1e-15);
    }

    #[test]
    fn log_near_pi_is_stable() {
        for axis in [Vector3::x(), Vector3::new(1.0, 2.0, -0.5).normalize(), -Vector3::z()] {
            for theta in [PI - 1e-3, PI - 1e-7, PI] {
                let r = Rotation::exp(&(axis * theta));
                let w = so3_log(&r);
                assert!(w.norm() <= PI + 1e-12);
                let back = Rotation::exp(&w);
                assert!((back.matrix() - r.matrix()).amax() < 1e-9, "theta={theta}");
            }
        }
    }

    #[test]
    fn exp_log_roundtrip_random() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..1000 {
            let r = random_rotation(&mut rng);
            let back = Rotation::exp(&so3_log(&r));
            assert!((back.matrix() - r.matrix()).amax() < 1e-9);
            let w = random_vec(&mut rng, 1.0);
            let w = w * (rng.random_range(0.0..PI - 1e-6) / w.norm());
            assert!((so3_log(&Rotation::exp(&w)) - w).norm() < 1e-9);
        }
    }

    #[test]
    fn small_angle_branch_matches_series() {
        let w = Vector3::new(3e-9, -2e-9, 1e-9);
        assert!((so3_log(&Rotation::exp(&w)) - w).norm() < 1e-20);
    }

    #[test]
    fn right_jacobian_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..50 {
            let phi = random_vec(&mut rng, 1.5);
            let jr = so3_right_jacobian(&phi);
            let base = Rotation::exp(&phi);
            let eps = 1e-6;
            for k in 0..3 {
                let mut e = Vector3::zeros();
                e[k] = eps;
                let plus = (base.transpose() * Rotation::exp(&(phi + e))).log();
                let minus = (base.transpose() * Rotation::exp(&(phi - e))).log();
                let col = (plus - minus) / (2.0 * eps);
                assert!((col - jr.column(k)).norm() < 1e-8);
            }
            assert!((jr * so3_right_jacobian_inv(&phi) - Matrix3::identity()).amax() < 1e-10);
        }
    }

    fn random_state(rng: &mut impl Rng) -> NavState {
        NavState {
            attitude: random_rotation(rng),
            position: random_vec(rng, 5.0),
            velocity: random_vec(rng, 1.0),
            gyro_bias: random_vec(rng, 0.01),
            accel_bias: random_vec(rng, 0.1),
            gravity: Vector3::new(0.0, 0.0, -9.81) + random_vec(rng, 0.1),
            ext_rotation: random_rotation(rng),
            ext_translation: random_vec(rng, 0.1),
            compositions: 0,
        }
    }

    #[test]
    fn boxplus_zero_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random_state(&mut rng);
        assert_eq!(boxplus(&x, &Vec24::zeros()), x);
        assert_eq!(boxminus(&x, &x), Vec24::zeros());
    }

    #[test]
    fn position_delta_shifts_only_position() {
        let x = NavState::default();
        let mut d = Vec24::zeros();
        d[block::POS] = 1.5;
        d[block::POS + 2] = -0.25;
        let y = boxplus(&x, &d);
        assert_eq!(y.position, Vector3::new(1.5, 0.0, -0.25));
        assert_eq!(y.attitude, x.attitude);
        assert_eq!(boxminus(&y, &x), d);
    }

    #[test]
    fn boxplus_boxminus_inverse_pairs() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..200 {
            let x = random_state(&mut rng);
            let y = random_state(&mut rng);
            let d = boxminus(&y, &x);
            let y2 = boxplus(&x, &d);
            assert!(boxminus(&y2, &y).amax() < 1e-9);
        }
    }

    #[test]
    fn rotations_stay_orthonormal_over_many_updates() {
        let mut x = NavState::default();
        let mut d = Vec24::zeros();
        d[0] = 0.013;
        d[1] = -0.007;
        d[2] = 0.021;
        d[block::EXT_ROT] = 0.002;
        for _ in 0..1_000_000 {
            x = boxplus(&x, &d);
        }
        assert!(x.attitude.orthonormality_error() < 1e-6);
        assert!((x.attitude.matrix().determinant() - 1.0).abs() < 1e-6);
        assert!(x.ext_rotation.orthonormality_error() < 1e-6);
    }

    #[test]
    fn pose_inverse_and_transform() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..100 {
            let a = Pose::new(random_rotation(&mut rng), random_vec(&mut rng, 3.0));
            let b = Pose::new(random_rotation(&mut rng), random_vec(&mut rng, 3.0));
            let p = random_vec(&mut rng, 2.0);
            let id = a.inverse() * a;
            assert!(id.rotation.angle() < 1e-9 && id.translation.norm() < 1e-9);
            let lhs = transform_point(&(a * b), &p);
            let rhs = transform_point(&a, &transform_point(&b, &p));
            assert!((lhs - rhs).norm() < 1e-12);
        }
        let p = Vector3::new(0.3, -0.1, 2.0);
        assert_eq!(transform_point(&Pose::identity(), &p), p);
        assert_eq!(transform_point(&Pose::from_translation(Vector3::x()), &Vector3::zeros()), Vector3::new(1.0, 0.0, 0.0));
    }

    #[test]
    fn camera_trajectory_from_lidar() {
        let poses = vec![
            StampedPose::new(0.0, Pose::identity()),
            StampedPose::new(0.1, Pose::from_translation(Vector3::new(1.0, 0.0, 0.0))),
        ];
        let chain = FrameChain::default();
        assert_eq!(lidar_to_camera_trajectory(&poses, &chain).unwrap(), poses);

        let chain = FrameChain { lidar_camera: Pose::from_translation(Vector3::new(0.0, 0.1, 0.0)), ..Default::default() };
        let cam = lidar_to_camera_trajectory(&poses[..1], &chain).unwrap();
        assert_eq!(cam[0].pose.translation, Vector3::new(0.0, 0.1, 0.0));

        let bad = vec![poses[1], poses[0]];
        assert!(matches!(lidar_to_camera_trajectory(&bad, &chain), Err(GeometryError::NonMonotone { .. })));
    }

    #[test]
    fn camera_trajectory_roundtrip_with_inverse_extrinsic() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let poses: Vec<_> = (0..50)
            .map(|i| StampedPose::new(i as f64 * 0.1, Pose::new(random_rotation(&mut rng), random_vec(&mut rng, 2.0))))
            .collect();
        let ext = Pose::new(random_rotation(&mut rng), random_vec(&mut rng, 0.2));
        let chain = FrameChain { lidar_camera: ext, ..Default::default() };
        let inv = FrameChain { lidar_camera: ext.inverse(), ..Default::default() };
        let cam = lidar_to_camera_trajectory(&poses, &chain).unwrap();
        let back = lidar_to_camera_trajectory(&cam, &inv).unwrap();
        for (a, b) in poses.iter().zip(&back) {
            assert_eq!(a.t, b.t);
            assert!((a.pose.rotation.matrix() - b.pose.rotation.matrix()).amax() < 1e-12);
            assert!((a.pose.translation - b.pose.translation).amax() < 1e-12);
        }
    }

    #[test]
    fn frame_chain_is_associative() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..100 {
            let g_i = Pose::new(random_rotation(&mut rng), random_vec(&mut rng, 3.0));
            let chain = FrameChain {
                imu_lidar: Pose::new(random_rotation(&mut rng), random_vec(&mut rng, 0.1)),
                lidar_camera: Pose::new(random_rotation(&mut rng), random_vec(&mut rng, 0.1)),
                lidar_tcp: Pose::identity(),
            };
            let a = (g_i * chain.imu_lidar) * chain.lidar_camera;
            let b = g_i * chain.imu_camera();
            assert!((a.rotation.matrix() - b.rotation.matrix()).amax() < 1e-12);
            assert!((a.translation - b.translation).amax() < 1e-12);
        }
    }

    #[test]
    fn trajectory_csv_roundtrip_is_lossless_in_position() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let poses: Vec<_> = (0..20)
            .map(|i| StampedPose::new(i as f64 / 10.0, Pose::new(random_rotation(&mut rng), random_vec(&mut rng, 2.0))))
            .collect();
        let mut buf = Vec::new();
        write_trajectory_csv(&mut buf, &poses).unwrap();
        let back = read_trajectory_csv(&buf[..]).unwrap();
        assert_eq!(back.len(), poses.len());
        for (a, b) in poses.iter().zip(&back) {
            assert_eq!(a.t, b.t);
            assert_eq!(a.pose.translation, b.pose.translation);
            assert!((a.pose.rotation.matrix() - b.pose.rotation.matrix()).amax() < 1e-12);
        }
    }

    #[test]
    fn trajectory_csv_reports_line_numbers() {
        let text = format!("{TRAJECTORY_HEADER}\n0,0,0,0,0,0,0,1\n0.1,0,0,zero,0,0,0,1\n");
        match read_trajectory_csv(text.as_bytes()) {
            Err(GeometryError::Csv { line, .. }) => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
    }
}
