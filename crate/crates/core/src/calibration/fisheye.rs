//! Equidistant fisheye model and checkerboard intrinsic calibration.

use nalgebra::{DMatrix, DVector, Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::CalibrationError;
use crate::geometry::{Pose, Rotation};
use crate::lm::{levenberg_marquardt, LeastSquares, LmConfig, Termination};

/// Largest incidence angle the model supports (92.5°, a 185° field of view).
pub const THETA_MAX: f64 = 92.5 * std::f64::consts::PI / 180.0;

/// Newton iteration cap for θ_d → θ.
pub const MAX_NEWTON_ITERS: usize = 10;

pub const MIN_VIEWS: usize = 5;
pub const MIN_CORNERS_PER_VIEW: usize = 20;

/// `r = f·θ_d`, `θ_d = θ(1 + k1θ² + k2θ⁴ + k3θ⁶ + k4θ⁸)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FisheyeIntrinsics {
    pub f: f64,
    pub cx: f64,
    pub cy: f64,
    pub k: [f64; 4],
}

impl FisheyeIntrinsics {
    pub fn new(f: f64, cx: f64, cy: f64, k: [f64; 4]) -> Result<Self, CalibrationError> {
        let intr = Self { f, cx, cy, k };
        intr.validate()?;
        Ok(intr)
    }

    pub fn validate(&self) -> Result<(), CalibrationError> {
        if !(self.f.is_finite() && self.f > 0.0) {
            return Err(CalibrationError::InvalidIntrinsics(format!("focal length must be positive, got {}", self.f)));
        }
        if !(self.cx.is_finite() && self.cy.is_finite() && self.k.iter().all(|k| k.is_finite())) {
            return Err(CalibrationError::InvalidIntrinsics("non-finite parameter".into()));
        }
        const STEPS: usize = 2000;
        for i in 0..=STEPS {
            let theta = THETA_MAX * i as f64 / STEPS as f64;
            if self.distortion_slope(theta) <= 0.0 {
                return Err(CalibrationError::InvalidIntrinsics(format!(
                    "distortion polynomial not monotone at θ = {:.4} rad",
                    theta
                )));
            }
        }
        Ok(())
    }

    pub fn distort(&self, theta: f64) -> f64 {
        let t2 = theta * theta;
        let [k1, k2, k3, k4] = self.k;
        theta * (1.0 + t2 * (k1 + t2 * (k2 + t2 * (k3 + t2 * k4))))
    }

    /// dθ_d/dθ.
    pub fn distortion_slope(&self, theta: f64) -> f64 {
        let t2 = theta * theta;
        let [k1, k2, k3, k4] = self.k;
        1.0 + t2 * (3.0 * k1 + t2 * (5.0 * k2 + t2 * (7.0 * k3 + t2 * 9.0 * k4)))
    }

    /// Inverts θ_d(θ) by Newton iteration; returns θ and the iteration count.
    pub fn undistort(&self, theta_d: f64) -> Result<(f64, usize), CalibrationError> {
        let limit = self.distort(THETA_MAX);
        if !(theta_d >= 0.0 && theta_d <= limit * (1.0 + 1e-12)) {
            return Err(CalibrationError::OutsideDomain(format!("distorted angle {theta_d} exceeds {limit} (θ_max)")));
        }
        let mut theta = theta_d;
        for it in 1..=MAX_NEWTON_ITERS {
            let step = (self.distort(theta) - theta_d) / self.distortion_slope(theta);
            theta = (theta - step).clamp(0.0, THETA_MAX * 1.05);
            if step.abs() <= 1e-15 * theta.max(1.0) {
                return Ok((theta, it));
            }
        }
        let residual = (self.distort(theta) - theta_d).abs();
        if residual <= 1e-13 {
            Ok((theta, MAX_NEWTON_ITERS))
        } else {
            Err(CalibrationError::OutsideDomain(format!(
                "Newton inversion did not converge for θ_d = {theta_d} (residual {residual:e})"
            )))
        }
    }

    pub fn project(&self, x: &Vector3<f64>) -> Result<Vector2<f64>, CalibrationError> {
        if *x == Vector3::zeros() {
            return Err(CalibrationError::OpticalCenter);
        }
        let rho = x.xy().norm();
        let theta = rho.atan2(x.z);
        let r = self.f * self.distort(theta);
        if rho == 0.0 {
            return Ok(Vector2::new(self.cx, self.cy));
        }
        Ok(Vector2::new(self.cx + r * x.x / rho, self.cy + r * x.y / rho))
    }

    pub fn unproject(&self, pixel: &Vector2<f64>) -> Result<Vector3<f64>, CalibrationError> {
        self.unproject_with_iterations(pixel).map(|(ray, _)| ray)
    }

    pub fn unproject_with_iterations(&self, pixel: &Vector2<f64>) -> Result<(Vector3<f64>, usize), CalibrationError> {
        let d = pixel - Vector2::new(self.cx, self.cy);
        let r = d.norm();
        if r == 0.0 {
            return Ok((Vector3::z(), 0));
        }
        let (theta, iters) = self.undistort(r / self.f)?;
        let (s, c) = theta.sin_cos();
        Ok((Vector3::new(s * d.x / r, s * d.y / r, c), iters))
    }

    fn to_params(self) -> [f64; 7] {
        [self.f, self.cx, self.cy, self.k[0], self.k[1], self.k[2], self.k[3]]
    }

    fn from_params(p: &[f64]) -> Self {
        Self { f: p[0], cx: p[1], cy: p[2], k: [p[3], p[4], p[5], p[6]] }
    }
}

pub fn project_equidistant(x: &Vector3<f64>, intr: &FisheyeIntrinsics) -> Result<Vector2<f64>, CalibrationError> {
    intr.project(x)
}

pub fn unproject_equidistant(pixel: &Vector2<f64>, intr: &FisheyeIntrinsics) -> Result<Vector3<f64>, CalibrationError> {
    intr.unproject(pixel)
}

/// Planar checkerboard with inner corners on a `cols × rows` grid centred on
/// the board origin, lying in the board's z = 0 plane.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkerboard {
    pub cols: usize,
    pub rows: usize,
    pub square: f64,
}

impl Default for Checkerboard {
    fn default() -> Self {
        Self { cols: 10, rows: 7, square: 0.05 }
    }
}

impl Checkerboard {
    pub fn corners(&self) -> Vec<Vector3<f64>> {
        let ox = (self.cols as f64 - 1.0) * self.square / 2.0;
        let oy = (self.rows as f64 - 1.0) * self.square / 2.0;
        let mut out = Vec::with_capacity(self.cols * self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.push(Vector3::new(c as f64 * self.square - ox, r as f64 * self.square - oy, 0.0));
            }
        }
        out
    }
}

/// Detected corners of one image: board-frame points and their pixels.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct CalibrationView {
    pub board_points: Vec<Vector3<f64>>,
    pub pixels: Vec<Vector2<f64>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageSize {
    pub width: usize,
    pub height: usize,
}

impl ImageSize {
    pub fn contains(&self, px: &Vector2<f64>) -> bool {
        px.x >= 0.0 && px.y >= 0.0 && px.x <= (self.width - 1) as f64 && px.y <= (self.height - 1) as f64
    }
}

/// Board poses (camera ← board) spread over the field of view with varied tilt.
pub fn diverse_board_poses(n: usize, seed: u64) -> Vec<Pose> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let az = 2.0 * std::f64::consts::PI * (i as f64 + rng.random_range(0.0..0.5)) / n as f64;
            let off_axis: f64 = if i == 0 { 0.0 } else { rng.random_range(0.3..1.3) };
            let dir = Vector3::new(off_axis.sin() * az.cos(), off_axis.sin() * az.sin(), off_axis.cos());
            let dist = rng.random_range(0.25..0.45);
            // Face the camera, then tilt.
            let z = -dir;
            let x = Vector3::y().cross(&z).normalize();
            let y = z.cross(&x);
            let facing = Rotation::from_matrix_projected(&nalgebra::Matrix3::from_columns(&[x, y, z]));
            let tilt = Rotation::exp(&Vector3::new(
                rng.random_range(-0.9..0.9),
                rng.random_range(-0.9..0.9),
                rng.random_range(-0.5..0.5),
            ));
            Pose::new(facing * tilt, dir * dist)
        })
        .collect()
}

/// Renders corner detections for each board pose; corners outside the image
/// or the model's field of view are dropped. `noise_px` is the per-axis σ.
pub fn synthetic_views(
    intr: &FisheyeIntrinsics,
    board: &Checkerboard,
    camera_from_board: &[Pose],
    size: ImageSize,
    noise_px: f64,
    seed: u64,
) -> Vec<CalibrationView> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, noise_px.max(0.0)).expect("finite sigma");
    camera_from_board
        .iter()
        .map(|pose| {
            let mut view = CalibrationView::default();
            for b in board.corners() {
                let pc = pose.transform_point(&b);
                let theta = pc.xy().norm().atan2(pc.z);
                if theta > THETA_MAX {
                    continue;
                }
                let Ok(px) = intr.project(&pc) else { continue };
                if !size.contains(&px) {
                    continue;
                }
                let noisy = px + Vector2::new(normal.sample(&mut rng), normal.sample(&mut rng));
                view.board_points.push(b);
                view.pixels.push(noisy);
            }
            view
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct IntrinsicsResult {
    pub intrinsics: FisheyeIntrinsics,
    /// Camera ← board pose per view.
    pub poses: Vec<Pose>,
    /// Root mean square of the per-axis pixel residuals.
    pub rms: f64,
    pub iterations: usize,
    pub termination: Termination,
    /// Objective value after each accepted solver step.
    pub cost_history: Vec<f64>,
}

struct Reprojection<'a> {
    views: &'a [CalibrationView],
}

fn view_pose(x: &DVector<f64>, v: usize) -> Pose {
    let o = 7 + 6 * v;
    Pose::new(Rotation::exp(&Vector3::new(x[o], x[o + 1], x[o + 2])), Vector3::new(x[o + 3], x[o + 4], x[o + 5]))
}

impl LeastSquares for Reprojection<'_> {
    fn residuals(&self, x: &DVector<f64>) -> DVector<f64> {
        let intr = FisheyeIntrinsics::from_params(&x.as_slice()[..7]);
        let n: usize = self.views.iter().map(|v| v.pixels.len()).sum();
        let mut r = DVector::zeros(2 * n);
        let mut i = 0;
        for (vi, view) in self.views.iter().enumerate() {
            let pose = view_pose(x, vi);
            for (b, px) in view.board_points.iter().zip(&view.pixels) {
                let e = match intr.project(&pose.transform_point(b)) {
                    Ok(p) => p - px,
                    Err(_) => Vector2::repeat(f64::INFINITY),
                };
                r[i] = e.x;
                r[i + 1] = e.y;
                i += 2;
            }
        }
        r
    }

    fn jacobian(&self, x: &DVector<f64>) -> DMatrix<f64> {
        // Each view's pose only touches its own rows.
        let n: usize = self.views.iter().map(|v| v.pixels.len()).sum();
        let mut j = DMatrix::zeros(2 * n, x.len());
        let eval = |xs: &DVector<f64>| self.residuals(xs);
        for c in 0..7 {
            let h = 1e-6 * x[c].abs().max(1.0);
            let mut xp = x.clone();
            xp[c] += h;
            let mut xm = x.clone();
            xm[c] -= h;
            j.set_column(c, &((eval(&xp) - eval(&xm)) / (2.0 * h)));
        }
        let intr = FisheyeIntrinsics::from_params(&x.as_slice()[..7]);
        let mut row = 0;
        for (vi, view) in self.views.iter().enumerate() {
            let o = 7 + 6 * vi;
            for (b, _) in view.board_points.iter().zip(&view.pixels) {
                for p in 0..6 {
                    let h = 1e-7;
                    let mut xp = x.clone();
                    xp[o + p] += h;
                    let mut xm = x.clone();
                    xm[o + p] -= h;
                    let pp = intr.project(&view_pose(&xp, vi).transform_point(b));
                    let pm = intr.project(&view_pose(&xm, vi).transform_point(b));
                    if let (Ok(pp), Ok(pm)) = (pp, pm) {
                        let d = (pp - pm) / (2.0 * h);
                        j[(row, o + p)] = d.x;
                        j[(row + 1, o + p)] = d.y;
                    }
                }
                row += 2;
            }
        }
        j
    }
}

/// Linear estimate of camera ← board from unit rays and planar board points.
fn pose_from_rays(board: &[Vector3<f64>], rays: &[Vector3<f64>]) -> Option<Pose> {
    let n = board.len();
    let mut a = DMatrix::zeros(3 * n, 9);
    for (i, (b, d)) in board.iter().zip(rays).enumerate() {
        let m = [b.x, b.y, 1.0];
        // d × (H m) = 0
        for k in 0..3 {
            a[(3 * i, 3 + k)] = -d.z * m[k];
            a[(3 * i, 6 + k)] = d.y * m[k];
            a[(3 * i + 1, k)] = d.z * m[k];
            a[(3 * i + 1, 6 + k)] = -d.x * m[k];
            a[(3 * i + 2, k)] = -d.y * m[k];
            a[(3 * i + 2, 3 + k)] = d.x * m[k];
        }
    }
    let ata = a.transpose() * &a;
    let eig = ata.symmetric_eigen();
    let imin = eig.eigenvalues.imin();
    let h = eig.eigenvectors.column(imin);
    let mut hm = nalgebra::Matrix3::from_row_slice(h.as_slice());
    let positive = board.iter().zip(rays).filter(|(b, d)| d.dot(&(hm * Vector3::new(b.x, b.y, 1.0))) > 0.0).count();
    if positive * 2 < n {
        hm = -hm;
    }
    let s = 2.0 / (hm.column(0).norm() + hm.column(1).norm());
    if !s.is_finite() {
        return None;
    }
    let r1 = hm.column(0) * s;
    let r2 = hm.column(1) * s;
    let t = hm.column(2) * s;
    let r = nalgebra::Matrix3::from_columns(&[r1.into(), r2.into(), r1.cross(&r2)]);
    Some(Pose::new(Rotation::from_matrix_projected(&r), t.into()))
}

fn initial_guess(views: &[CalibrationView], size: ImageSize) -> Option<(FisheyeIntrinsics, Vec<Pose>)> {
    let scale = size.width.max(size.height) as f64;
    let mut best: Option<(f64, FisheyeIntrinsics, Vec<Pose>)> = None;
    for i in 0..60 {
        let f = scale * 0.08 * (1.0f64 / 0.08).powf(i as f64 / 59.0);
        let intr =
            FisheyeIntrinsics { f, cx: (size.width as f64 - 1.0) / 2.0, cy: (size.height as f64 - 1.0) / 2.0, k: [0.0; 4] };
        let mut poses = Vec::with_capacity(views.len());
        let mut cost = 0.0;
        for view in views {
            let rays: Option<Vec<_>> = view.pixels.iter().map(|p| intr.unproject(p).ok()).collect();
            let Some(rays) = rays else {
                cost = f64::INFINITY;
                break;
            };
            let Some(pose) = pose_from_rays(&view.board_points, &rays) else {
                cost = f64::INFINITY;
                break;
            };
            for (b, px) in view.board_points.iter().zip(&view.pixels) {
                cost += intr.project(&pose.transform_point(b)).map(|p| (p - px).norm_squared()).unwrap_or(1e12);
            }
            poses.push(pose);
        }
        if cost.is_finite() && best.as_ref().is_none_or(|b| cost < b.0) {
            best = Some((cost, intr, poses));
        }
    }
    best.map(|(_, i, p)| (i, p))
}

/// Joint least squares over intrinsics and per-view board poses.
pub fn calibrate_intrinsics(
    views: &[CalibrationView],
    size: ImageSize,
    lm: &LmConfig,
) -> Result<IntrinsicsResult, CalibrationError> {
    if views.len() < MIN_VIEWS {
        return Err(CalibrationError::TooFewViews { got: views.len(), required: MIN_VIEWS });
    }
    for (i, v) in views.iter().enumerate() {
        if v.pixels.len() != v.board_points.len() {
            return Err(CalibrationError::InvalidInput(format!("view {i}: pixel and board point counts differ")));
        }
        if v.pixels.len() < MIN_CORNERS_PER_VIEW {
            return Err(CalibrationError::TooFewCorners { view: i, got: v.pixels.len(), required: MIN_CORNERS_PER_VIEW });
        }
    }
    let (intr0, poses0) = initial_guess(views, size)
        .ok_or_else(|| CalibrationError::RankDeficient("no initial pose estimate for the views".into()))?;
    let mut x0 = DVector::zeros(7 + 6 * views.len());
    x0.as_mut_slice()[..7].copy_from_slice(&intr0.to_params());
    for (v, p) in poses0.iter().enumerate() {
        let o = 7 + 6 * v;
        x0.fixed_rows_mut::<3>(o).copy_from(&p.rotation.log());
        x0.fixed_rows_mut::<3>(o + 3).copy_from(&p.translation);
    }
    let problem = Reprojection { views };
    let report = levenberg_marquardt(&problem, x0, lm);
    let intr = FisheyeIntrinsics::from_params(&report.x.as_slice()[..7]);
    intr.validate()?;

    // Column-scaled information matrix must be well conditioned.
    let j = problem.jacobian(&report.x);
    let mut js = j.clone();
    for c in 0..js.ncols() {
        let n = js.column(c).norm();
        if n == 0.0 {
            return Err(CalibrationError::RankDeficient(format!("parameter {c} unobserved")));
        }
        js.column_mut(c).unscale_mut(n);
    }
    let ev = (js.transpose() * &js).symmetric_eigen().eigenvalues;
    let rcond = ev.min() / ev.max();
    if !(rcond > 1e-12) {
        return Err(CalibrationError::RankDeficient(format!(
            "view geometry does not constrain all parameters (reciprocal condition {rcond:e})"
        )));
    }

    let r = problem.residuals(&report.x);
    let rms = (r.norm_squared() / r.len() as f64).sqrt();
    Ok(IntrinsicsResult {
        intrinsics: intr,
        poses: (0..views.len()).map(|v| view_pose(&report.x, v)).collect(),
        rms,
        iterations: report.iterations,
        termination: report.termination,
        cost_history: report.history,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn test_intrinsics() -> FisheyeIntrinsics {
        FisheyeIntrinsics::new(330.0, 639.5, 511.5, [0.02, -0.006, 0.001, -0.0001]).unwrap()
    }

    const SIZE: ImageSize = ImageSize { width: 1280, height: 1024 };

    #[test]
    fn optical_axis_maps_to_principal_point() {
        let intr = test_intrinsics();
        let p = intr.project(&Vector3::new(0.0, 0.0, 2.0)).unwrap();
        assert_eq!(p, Vector2::new(intr.cx, intr.cy));
        assert_eq!(intr.unproject(&p).unwrap(), Vector3::z());
    }

    #[test]
    fn undistorted_45_degrees() {
        let intr = FisheyeIntrinsics::new(300.0, 320.0, 240.0, [0.0; 4]).unwrap();
        let p = intr.project(&Vector3::new(1.0, 0.0, 1.0)).unwrap();
        assert!((p - Vector2::new(320.0 + 300.0 * std::f64::consts::FRAC_PI_4, 240.0)).norm() < 1e-12);
    }

    #[test]
    fn rejects_optical_center_and_non_monotone() {
        assert!(matches!(test_intrinsics().project(&Vector3::zeros()), Err(CalibrationError::OpticalCenter)));
        assert!(FisheyeIntrinsics::new(300.0, 0.0, 0.0, [-0.5, 0.0, 0.0, 0.0]).is_err());
        assert!(FisheyeIntrinsics::new(-1.0, 0.0, 0.0, [0.0; 4]).is_err());
    }

    #[test]
    fn round_trip_random_rays() {
        let intr = test_intrinsics();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..1000 {
            let theta = rng.random_range(0.0..THETA_MAX);
            let phi = rng.random_range(-std::f64::consts::PI..std::f64::consts::PI);
            let ray = Vector3::new(theta.sin() * phi.cos(), theta.sin() * phi.sin(), theta.cos());
            let back = intr.unproject(&intr.project(&(ray * 3.7)).unwrap()).unwrap();
            assert!((back - ray).norm() < 1e-9, "θ={theta}");
        }
    }

    #[test]
    fn newton_converges_within_cap_across_image() {
        let intr = test_intrinsics();
        let limit = intr.f * intr.distort(THETA_MAX);
        let mut worst = 0;
        for i in 0..=4000 {
            let r = limit * i as f64 / 4000.0;
            let (_, iters) = intr.unproject_with_iterations(&Vector2::new(intr.cx + r, intr.cy)).unwrap();
            worst = worst.max(iters);
        }
        assert!(worst <= MAX_NEWTON_ITERS, "{worst}");
    }

    #[test]
    fn noiseless_recovery() {
        let truth = test_intrinsics();
        let views = synthetic_views(&truth, &Checkerboard::default(), &diverse_board_poses(10, 1), SIZE, 0.0, 0);
        let res = calibrate_intrinsics(&views, SIZE, &LmConfig::default()).unwrap();
        assert!((res.intrinsics.f / truth.f - 1.0).abs() < 1e-6, "{:?}", res.intrinsics);
        assert!(res.rms < 1e-6);
    }

    #[test]
    fn noisy_recovery_and_monotone_cost() {
        let truth = test_intrinsics();
        let views = synthetic_views(&truth, &Checkerboard::default(), &diverse_board_poses(10, 2), SIZE, 0.2, 7);
        let res = calibrate_intrinsics(&views, SIZE, &LmConfig::default()).unwrap();
        assert!((res.intrinsics.f / truth.f - 1.0).abs() < 1e-3, "{:?}", res.intrinsics);
        assert!((0.15..=0.3).contains(&res.rms), "{}", res.rms);
        assert!(res.cost_history.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn too_few_views() {
        let truth = test_intrinsics();
        let views = synthetic_views(&truth, &Checkerboard::default(), &diverse_board_poses(2, 1), SIZE, 0.0, 0);
        assert!(matches!(
            calibrate_intrinsics(&views, SIZE, &LmConfig::default()),
            Err(CalibrationError::TooFewViews { got: 2, .. })
        ));
    }
}
