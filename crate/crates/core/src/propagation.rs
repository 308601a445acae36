//! IMU-driven forward propagation of the navigation state and its error
//! covariance, plus static initialization of gravity and gyro bias.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{block, boxplus, skew, so3_right_jacobian, Mat24, NavState, Rotation, Vec24};
use crate::simulation::ImuSample;

/// Covariance over the 24-dimensional error state.
pub type Covariance24 = Mat24;

/// Longest accepted propagation step and IMU gap.
pub const MAX_DT: f64 = 0.1;

#[derive(Debug, Error, PartialEq)]
pub enum PropagationError {
    #[error("propagation step must be positive, got {0} s")]
    NonPositiveDt(f64),
    #[error("propagation step {0} s exceeds the {MAX_DT} s limit")]
    StepTooLarge(f64),
    #[error("IMU gap of {gap:.4} s between {from:.4} s and {to:.4} s")]
    ImuGap { from: f64, to: f64, gap: f64 },
    #[error("IMU data does not cover [{from:.4}, {to:.4}] s")]
    Coverage { from: f64, to: f64 },
    #[error("initialization buffer spans {0:.3} s, need at least {1:.3} s")]
    BufferTooShort(f64, f64),
    #[error("motion detected during initialization: {0}")]
    MotionDetected(String),
    #[error("gravity magnitude {0:.3} m/s² outside [9.0, 10.5]")]
    GravityMagnitude(f64),
}

/// White-noise densities of the IMU and the bias random walks.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseConfig {
    /// rad/s/√Hz
    pub gyro_noise: f64,
    /// m/s²/√Hz
    pub accel_noise: f64,
    /// rad/s²/√Hz
    pub gyro_bias_walk: f64,
    /// m/s³/√Hz
    pub accel_bias_walk: f64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self { gyro_noise: 1e-3, accel_noise: 1e-2, gyro_bias_walk: 1e-5, accel_bias_walk: 1e-4 }
    }
}

impl NoiseConfig {
    pub fn validate(&self) -> Result<(), String> {
        let vals = [self.gyro_noise, self.accel_noise, self.gyro_bias_walk, self.accel_bias_walk];
        if vals.iter().all(|v| v.is_finite() && *v >= 0.0) {
            Ok(())
        } else {
            Err(format!("noise densities must be finite and non-negative: {vals:?}"))
        }
    }
}

fn check_dt(dt: f64) -> Result<(), PropagationError> {
    if !(dt > 0.0) {
        return Err(PropagationError::NonPositiveDt(dt));
    }
    if dt >= MAX_DT {
        return Err(PropagationError::StepTooLarge(dt));
    }
    Ok(())
}

/// One Euler step `x ⊞ (Δt·f(x, u, 0))`.
///
/// Attitude integrates the bias-corrected rate, velocity the rotated
/// bias-corrected specific force plus gravity, position the current velocity.
pub fn propagate_state(x: &NavState, u: &ImuSample, dt: f64) -> Result<NavState, PropagationError> {
    check_dt(dt)?;
    Ok(propagate_unchecked(x, u, dt))
}

fn propagate_unchecked(x: &NavState, u: &ImuSample, dt: f64) -> NavState {
    use block::*;
    let omega = u.gyro - x.gyro_bias;
    let accel = x.attitude * (u.accel - x.accel_bias) + x.gravity;
    let mut d = Vec24::zeros();
    d.fixed_rows_mut::<3>(ATT).copy_from(&(omega * dt));
    d.fixed_rows_mut::<3>(POS).copy_from(&(x.velocity * dt));
    d.fixed_rows_mut::<3>(VEL).copy_from(&(accel * dt));
    boxplus(x, &d)
}

/// Error-state transition `F` and discrete process noise `Q_d` of one
/// [`propagate_state`] step, for the right-perturbation error convention.
pub fn process_jacobians(x: &NavState, u: &ImuSample, dt: f64, noise: &NoiseConfig) -> Result<(Mat24, Mat24), PropagationError> {
    use block::*;
    check_dt(dt)?;
    let omega_dt = (u.gyro - x.gyro_bias) * dt;
    let accel_body = u.accel - x.accel_bias;
    let r = *x.attitude.matrix();
    let jr = so3_right_jacobian(&omega_dt);
    let eye = Matrix3::identity();

    let mut f = Mat24::identity();
    let mut set = |row: usize, col: usize, m: Matrix3<f64>| f.fixed_view_mut::<3, 3>(row, col).copy_from(&m);
    set(ATT, ATT, *Rotation::exp(&-omega_dt).matrix());
    set(ATT, BG, -jr * dt);
    set(POS, VEL, eye * dt);
    set(VEL, ATT, -r * skew(&accel_body) * dt);
    set(VEL, BA, -r * dt);
    set(VEL, GRAV, eye * dt);

    let mut q = Mat24::zeros();
    let mut setq = |at: usize, m: Matrix3<f64>| q.fixed_view_mut::<3, 3>(at, at).copy_from(&m);
    setq(ATT, jr * jr.transpose() * (noise.gyro_noise.powi(2) * dt));
    setq(VEL, eye * (noise.accel_noise.powi(2) * dt));
    setq(BG, eye * (noise.gyro_bias_walk.powi(2) * dt));
    setq(BA, eye * (noise.accel_bias_walk.powi(2) * dt));
    Ok((f, q))
}

/// `F·P·Fᵀ + Q_d`, symmetrized.
pub fn propagate_covariance(p: &Covariance24, f: &Mat24, q: &Mat24) -> Covariance24 {
    symmetrize(&(f * p * f.transpose() + q))
}

pub fn symmetrize(p: &Mat24) -> Mat24 {
    (p + p.transpose()) * 0.5
}

/// Largest asymmetry and smallest eigenvalue of a covariance.
pub fn covariance_health(p: &Mat24) -> (f64, f64) {
    let asym = (p - p.transpose()).amax();
    let min_eig = symmetrize(p).symmetric_eigenvalues().min();
    (asym, min_eig)
}

/// Default initial covariance: attitude (1e-4 rad)², position and velocity
/// exact, biases (1e-3)², gravity (1e-2)², extrinsic (1e-6)².
pub fn initial_covariance() -> Covariance24 {
    use block::*;
    let mut p = Mat24::zeros();
    let mut diag = |at: usize, sigma: f64| {
        for i in 0..3 {
            p[(at + i, at + i)] = sigma * sigma;
        }
    };
    diag(ATT, 1e-4);
    diag(BG, 1e-3);
    diag(BA, 1e-3);
    diag(GRAV, 1e-2);
    diag(EXT_ROT, 1e-6);
    diag(EXT_POS, 1e-6);
    p
}

/// Thresholds for accepting an IMU buffer as stationary.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StaticInitConfig {
    pub min_duration: f64,
    /// Largest RMS deviation of the gyro samples from their mean (rad/s).
    pub max_gyro_spread: f64,
    /// Largest RMS deviation of the accel samples from their mean (m/s²).
    pub max_accel_spread: f64,
    /// Mean gyro above this cannot be a bias (rad/s).
    pub max_gyro_bias: f64,
}

impl Default for StaticInitConfig {
    fn default() -> Self {
        Self { min_duration: 1.0, max_gyro_spread: 0.05, max_accel_spread: 0.5, max_gyro_bias: 0.1 }
    }
}

/// Initializes from a stationary buffer. The first IMU frame becomes the
/// global frame, so attitude is identity and gravity is `−mean(accel)`.
pub fn static_initialize(imu: &[ImuSample], cfg: &StaticInitConfig) -> Result<(NavState, Covariance24), PropagationError> {
    let span = match (imu.first(), imu.last()) {
        (Some(a), Some(b)) => b.t - a.t,
        _ => 0.0,
    };
    if span + 1e-9 < cfg.min_duration {
        return Err(PropagationError::BufferTooShort(span, cfg.min_duration));
    }
    let n = imu.len() as f64;
    let mean_gyro = imu.iter().fold(Vector3::zeros(), |acc, s| acc + s.gyro) / n;
    let mean_accel = imu.iter().fold(Vector3::zeros(), |acc, s| acc + s.accel) / n;
    let gyro_dev = (imu.iter().map(|s| (s.gyro - mean_gyro).norm_squared()).sum::<f64>() / n).sqrt();
    let accel_dev = (imu.iter().map(|s| (s.accel - mean_accel).norm_squared()).sum::<f64>() / n).sqrt();
    if gyro_dev > cfg.max_gyro_spread {
        return Err(PropagationError::MotionDetected(format!("gyro spread {gyro_dev:.4} rad/s")));
    }
    if accel_dev > cfg.max_accel_spread {
        return Err(PropagationError::MotionDetected(format!("accel spread {accel_dev:.4} m/s²")));
    }
    if mean_gyro.norm() > cfg.max_gyro_bias {
        return Err(PropagationError::MotionDetected(format!("mean rate {:.4} rad/s", mean_gyro.norm())));
    }
    let g = mean_accel.norm();
    if !(9.0..=10.5).contains(&g) {
        return Err(PropagationError::GravityMagnitude(g));
    }
    let state = NavState { gyro_bias: mean_gyro, gravity: -mean_accel, ..NavState::default() };
    Ok((state, initial_covariance()))
}

/// State after one sub-step of [`integrate`].
#[derive(Clone, Copy, Debug)]
pub struct Knot {
    pub t: f64,
    pub state: NavState,
}

/// Propagates state and covariance from `t_from` to `t_to` through the IMU
/// stream, one [`propagate_state`] step per interval with [`interval_input`].
/// The endpoint samples are interpolated at `t_from` and `t_to`.
///
/// Returns the final state, covariance and every intermediate knot including
/// both endpoints.
pub fn integrate(
    x: &NavState,
    p: &Covariance24,
    imu: &[ImuSample],
    t_from: f64,
    t_to: f64,
    noise: &NoiseConfig,
    max_gap: f64,
) -> Result<(NavState, Covariance24, Vec<Knot>), PropagationError> {
    let knots_in = imu_knots(imu, t_from, t_to, max_gap)?;
    let mut state = *x;
    let mut cov = *p;
    let mut knots = vec![Knot { t: t_from, state }];
    for w in knots_in.windows(2) {
        let dt = w[1].t - w[0].t;
        if dt <= 0.0 {
            continue;
        }
        let u = interval_input(&w[0], &w[1], &state.gyro_bias);
        let (f, q) = process_jacobians(&state, &u, dt, noise)?;
        cov = propagate_covariance(&cov, &f, &q);
        state = propagate_unchecked(&state, &u, dt);
        knots.push(Knot { t: w[1].t, state });
    }
    Ok((state, cov, knots))
}

/// Effective input over one interval: mean rate, and mean specific force
/// expressed in the body frame at the start of the interval.
pub fn interval_input(a: &ImuSample, b: &ImuSample, gyro_bias: &Vector3<f64>) -> ImuSample {
    let dt = b.t - a.t;
    let gyro = (a.gyro + b.gyro) * 0.5;
    let accel = Rotation::exp(&((gyro - gyro_bias) * (0.5 * dt))) * ((a.accel + b.accel) * 0.5);
    ImuSample::new(a.t, gyro, accel)
}

/// Samples bracketing `[t_from, t_to]` with both ends interpolated.
pub fn imu_knots(imu: &[ImuSample], t_from: f64, t_to: f64, max_gap: f64) -> Result<Vec<ImuSample>, PropagationError> {
    const EPS: f64 = 1e-9;
    if imu.is_empty() || imu[0].t > t_from + EPS || imu[imu.len() - 1].t < t_to - EPS {
        return Err(PropagationError::Coverage { from: t_from, to: t_to });
    }
    let first = imu.partition_point(|s| s.t <= t_from).saturating_sub(1);
    let last = imu.partition_point(|s| s.t < t_to).min(imu.len() - 1);
    for w in imu[first..=last].windows(2) {
        if w[1].t - w[0].t > max_gap {
            return Err(PropagationError::ImuGap { from: w[0].t, to: w[1].t, gap: w[1].t - w[0].t });
        }
    }
    let at = |t: f64| -> ImuSample {
        let i = imu.partition_point(|s| s.t <= t);
        if i == 0 {
            ImuSample { t, ..imu[0] }
        } else if i >= imu.len() {
            ImuSample { t, ..imu[imu.len() - 1] }
        } else {
            ImuSample::lerp(&imu[i - 1], &imu[i], t)
        }
    };
    let mut out = vec![at(t_from)];
    out.extend(imu[first..=last].iter().filter(|s| s.t > t_from + EPS && s.t < t_to - EPS).copied());
    if t_to > t_from {
        out.push(at(t_to));
    }
    Ok(out)
}
