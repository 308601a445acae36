//! Point-to-plane measurement model and the iterated error-state update.

use nalgebra::{Matrix3, Matrix6, RowSVector, SMatrix, Vector3, Vector6};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{block, boxminus, boxplus, skew, so3_right_jacobian, Mat24, NavState, Vec24};
use crate::propagation::{symmetrize, Covariance24};
use crate::voxel_map::{Plane, VoxelMap};

pub type Row24 = RowSVector<f64, 24>;

#[derive(Debug, Error, PartialEq)]
pub enum MeasurementError {
    #[error("residual variance must be positive, got {0}")]
    NonPositiveVariance(f64),
    #[error("{0} covariance is not positive semi-definite (min eigenvalue {1:e})")]
    NotPsd(&'static str, f64),
    #[error("degenerate update: {inliers} inliers, need {required}")]
    Degenerate { inliers: usize, required: usize },
    #[error("empty scan")]
    EmptyScan,
    #[error("update produced a non-finite state")]
    NonFinite,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct UpdateConfig {
    /// Mahalanobis gate on r²/Σ.
    pub tau: f64,
    pub max_iters: usize,
    /// Convergence threshold on ‖δx‖∞.
    pub eps: f64,
    pub min_inliers: usize,
    /// Range-independent point standard deviation (m).
    pub range_sigma: f64,
    /// Additional standard deviation per metre of range.
    pub range_coeff: f64,
}

impl Default for UpdateConfig {
    fn default() -> Self {
        Self { tau: 3.84, max_iters: 5, eps: 1e-4, min_inliers: 20, range_sigma: 0.002, range_coeff: 1e-3 }
    }
}

impl UpdateConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.tau > 0.0) {
            return Err(format!("tau must be positive, got {}", self.tau));
        }
        if self.max_iters == 0 {
            return Err("max_iters must be at least 1".into());
        }
        if !(self.eps > 0.0) {
            return Err(format!("eps must be positive, got {}", self.eps));
        }
        if !(self.range_sigma >= 0.0 && self.range_coeff >= 0.0) {
            return Err("point noise parameters must be non-negative".into());
        }
        Ok(())
    }

    /// Isotropic LiDAR-frame covariance `(σ_r + k·range)²·I`.
    pub fn point_covariance(&self, p_l: &Vector3<f64>) -> Matrix3<f64> {
        let s = self.range_sigma + self.range_coeff * p_l.norm();
        Matrix3::identity() * (s * s)
    }
}

/// One linearized point-to-plane constraint.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ResidualTerm {
    pub r: f64,
    pub variance: f64,
    pub h: Row24,
    pub index: usize,
}

fn body_point(x: &NavState, p_l: &Vector3<f64>) -> Vector3<f64> {
    x.ext_rotation * *p_l + x.ext_translation
}

/// `ᴳp = ᴳR_I(ᴵR_L p_L + ᴵp_L) + ᴳp_I`.
pub fn global_point(x: &NavState, p_l: &Vector3<f64>) -> Vector3<f64> {
    x.attitude * body_point(x, p_l) + x.position
}

/// Signed distance `nᵀ(ᴳp − q)`.
pub fn residual(x: &NavState, p_l: &Vector3<f64>, plane: &Plane) -> f64 {
    plane.normal.dot(&(global_point(x, p_l) - plane.point))
}

fn min_eig3(m: &Matrix3<f64>) -> f64 {
    m.symmetric_eigenvalues().min()
}

/// `Σ_r = nᵀ Σ_ᴳp n + J_Π Σ_Π J_Πᵀ`, `J_Π = [(ᴳp − q)ᵀ, −nᵀ]`.
pub fn residual_covariance(
    x: &NavState,
    p_l: &Vector3<f64>,
    point_cov: &Matrix3<f64>,
    plane: &Plane,
) -> Result<f64, MeasurementError> {
    const TOL: f64 = -1e-12;
    let e = min_eig3(&symmetrize3(point_cov));
    if !(e >= TOL) {
        return Err(MeasurementError::NotPsd("point", e));
    }
    let e = plane.covariance.symmetric_eigenvalues().min();
    if !(e >= TOL) {
        return Err(MeasurementError::NotPsd("plane", e));
    }
    Ok(residual_covariance_unchecked(x, p_l, point_cov, plane))
}

fn symmetrize3(m: &Matrix3<f64>) -> Matrix3<f64> {
    (m + m.transpose()) * 0.5
}

fn residual_covariance_unchecked(x: &NavState, p_l: &Vector3<f64>, point_cov: &Matrix3<f64>, plane: &Plane) -> f64 {
    let r = *x.attitude.matrix() * x.ext_rotation.matrix();
    let n = plane.normal;
    let rn = r.transpose() * n;
    let point_term = rn.dot(&(point_cov * rn));
    let d = global_point(x, p_l) - plane.point;
    let j = Vector6::new(d.x, d.y, d.z, -n.x, -n.y, -n.z);
    point_term + j.dot(&(plane.covariance * j))
}

/// Passes iff `r²/Σ_r < τ`.
pub fn gate(r: f64, variance: f64, tau: f64) -> Result<bool, MeasurementError> {
    if !(variance > 0.0) {
        return Err(MeasurementError::NonPositiveVariance(variance));
    }
    Ok(r * r / variance < tau)
}

/// `∂r/∂δx` under right perturbation. Velocity, bias and gravity blocks are zero.
pub fn measurement_jacobian(x: &NavState, p_l: &Vector3<f64>, plane: &Plane) -> Row24 {
    use block::*;
    let n = plane.normal.transpose();
    let r = *x.attitude.matrix();
    let b = body_point(x, p_l);
    let mut h = Row24::zeros();
    h.fixed_view_mut::<1, 3>(0, ATT).copy_from(&(-n * r * skew(&b)));
    h.fixed_view_mut::<1, 3>(0, POS).copy_from(&n);
    h.fixed_view_mut::<1, 3>(0, EXT_ROT).copy_from(&(-n * r * x.ext_rotation.matrix() * skew(p_l)));
    h.fixed_view_mut::<1, 3>(0, EXT_POS).copy_from(&(n * r));
    h
}

/// Per-point association outcome of the final iteration.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PointStatus {
    Unassociated,
    Rejected,
    Inlier,
}

#[derive(Clone, Debug, PartialEq)]
pub struct UpdateOutcome {
    pub state: NavState,
    pub covariance: Covariance24,
    pub iterations: usize,
    pub converged: bool,
    pub inliers: usize,
    pub associated: usize,
    /// RMS of inlier residuals at the returned state.
    pub residual_rms: f64,
    /// Median of inlier `√Σ_r`.
    pub median_sigma: f64,
    /// Translation or rotation information is rank-deficient (eigenvalue
    /// ratio below 1e-3).
    pub weakly_constrained: bool,
    pub status: Vec<PointStatus>,
}

struct Association {
    terms: Vec<ResidualTerm>,
    status: Vec<PointStatus>,
    associated: usize,
}

/// Associates every point, builds its term and gates it against
/// `Σ_r + H·P_gate·Hᵀ`.
fn associate(x: &NavState, points: &[Vector3<f64>], map: &VoxelMap, cfg: &UpdateConfig, p_gate: &Mat24) -> Association {
    let results: Vec<(PointStatus, Option<ResidualTerm>)> = points
        .par_iter()
        .enumerate()
        .map(|(index, p_l)| {
            let Some(plane) = map.query_plane(&global_point(x, p_l)) else {
                return (PointStatus::Unassociated, None);
            };
            let r = residual(x, p_l, plane);
            let variance = residual_covariance_unchecked(x, p_l, &cfg.point_covariance(p_l), plane);
            let h = measurement_jacobian(x, p_l, plane);
            let innovation = variance + (h * p_gate * h.transpose())[0];
            match gate(r, innovation, cfg.tau) {
                Ok(true) if variance > 0.0 => (PointStatus::Inlier, Some(ResidualTerm { r, variance, h, index })),
                _ => (PointStatus::Rejected, None),
            }
        })
        .collect();
    let associated = results.iter().filter(|(s, _)| *s != PointStatus::Unassociated).count();
    let (status, terms): (Vec<_>, Vec<_>) = results.into_iter().unzip();
    Association { terms: terms.into_iter().flatten().collect(), status, associated }
}

/// Iterated ESIKF update against the voxel map.
///
/// With `m = J(x_k ⊟ x̂)`, `P_k = J P Jᵀ` (J the right Jacobian on rotation
/// blocks), `S = Σ hᵀh/Σ_r`, `g = Σ hᵀr/Σ_r`:
/// `δ = −m − P_k(I + S P_k)⁻¹(g − S m)`, `P⁺ = P_k(I + S P_k)⁻¹`.
pub fn iterated_update(
    prior: &NavState,
    prior_cov: &Covariance24,
    points: &[Vector3<f64>],
    map: &VoxelMap,
    cfg: &UpdateConfig,
) -> Result<UpdateOutcome, MeasurementError> {
    if points.is_empty() {
        return Err(MeasurementError::EmptyScan);
    }
    let mut x = *prior;
    let mut p_gate = *prior_cov;
    let mut last = None;
    let mut converged = false;
    let mut iterations = 0;
    for _ in 0..cfg.max_iters {
        iterations += 1;
        let assoc = associate(&x, points, map, cfg, &p_gate);
        if assoc.terms.len() < cfg.min_inliers {
            return Err(MeasurementError::Degenerate { inliers: assoc.terms.len(), required: cfg.min_inliers });
        }
        let (s, g) = information(&assoc.terms);

        let e = boxminus(&x, prior);
        let j = error_jacobian(&e);
        let p_k = symmetrize(&(j * prior_cov * j.transpose()));
        let m = j * e;
        let a = posterior_covariance(&p_k, &s).ok_or(MeasurementError::NonFinite)?;
        let delta = -m - a * (g - s * m);
        x = boxplus(&x, &delta);
        if !x.is_finite() {
            return Err(MeasurementError::NonFinite);
        }
        p_gate = a;
        let done = delta.amax() < cfg.eps;
        last = Some((assoc, a, s));
        if done {
            converged = true;
            break;
        }
    }
    let (assoc, cov, s) = last.expect("at least one iteration");

    let mut sq = 0.0;
    let mut sigmas = Vec::with_capacity(assoc.terms.len());
    for t in &assoc.terms {
        let p_l = &points[t.index];
        let plane = map.query_plane(&global_point(&x, p_l));
        let r = plane.map_or(t.r, |pl| residual(&x, p_l, pl));
        sq += r * r;
        sigmas.push(t.variance.sqrt());
    }
    sigmas.sort_by(f64::total_cmp);
    let inliers = assoc.terms.len();
    Ok(UpdateOutcome {
        state: x,
        covariance: symmetrize(&cov),
        iterations,
        converged,
        inliers,
        associated: assoc.associated,
        residual_rms: (sq / inliers as f64).sqrt(),
        median_sigma: sigmas[sigmas.len() / 2],
        weakly_constrained: is_weakly_constrained(&s),
        status: assoc.status,
    })
}

fn information(terms: &[ResidualTerm]) -> (Mat24, Vec24) {
    let mut s = Mat24::zeros();
    let mut g = Vec24::zeros();
    for t in terms {
        let w = 1.0 / t.variance;
        let ht = t.h.transpose();
        s += ht * t.h * w;
        g += ht * (t.r * w);
    }
    (s, g)
}

/// `∂(x_k ⊞ δ ⊟ x̂)/∂δ` inverted: right Jacobians on the rotation blocks.
fn error_jacobian(e: &Vec24) -> Mat24 {
    let mut j = Mat24::identity();
    for at in [block::ATT, block::EXT_ROT] {
        let theta = e.fixed_rows::<3>(at).into_owned();
        j.fixed_view_mut::<3, 3>(at, at).copy_from(&so3_right_jacobian(&theta));
    }
    j
}

/// `P (I + S P)⁻¹` via the transposed system `(I + P S) Xᵀ = P`.
fn posterior_covariance(p: &Mat24, s: &Mat24) -> Option<Mat24> {
    let lhs = Mat24::identity() + p * s;
    let x = lhs.lu().solve(p)?;
    Some(x.transpose())
}

fn is_weakly_constrained(s: &Mat24) -> bool {
    const RATIO: f64 = 1e-3;
    [block::POS, block::ATT].iter().any(|&at| {
        let sub: SMatrix<f64, 3, 3> = s.fixed_view::<3, 3>(at, at).into_owned();
        let eig = sub.symmetric_eigenvalues();
        let max = eig.max();
        !(max > 0.0) || eig.min() / max < RATIO
    })
}

/// Plane with zero covariance.
pub fn exact_plane(normal: Vector3<f64>, point: Vector3<f64>) -> Plane {
    Plane { normal: normal.normalize(), point, covariance: Matrix6::zeros(), eigenvalues: Vector3::zeros() }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{transform_point, Rotation};
    use crate::simulation::{ScanPattern, SceneModel};
    use crate::voxel_map::VoxelMapConfig;
    use rand::seq::SliceRandom;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal, StandardNormal};

    fn rv(rng: &mut impl Rng, s: f64) -> Vector3<f64> {
        Vector3::new(rng.random_range(-s..s), rng.random_range(-s..s), rng.random_range(-s..s))
    }

    fn random_state(rng: &mut impl Rng) -> NavState {
        let mut x = NavState::default();
        x.attitude = Rotation::exp(&rv(rng, 2.0));
        x.position = rv(rng, 3.0);
        x.velocity = rv(rng, 1.0);
        x.ext_rotation = Rotation::exp(&rv(rng, 0.5));
        x.ext_translation = rv(rng, 0.1);
        x
    }

    fn random_plane(rng: &mut impl Rng) -> Plane {
        let a = Matrix6::from_fn(|_, _| rng.random_range(-0.01..0.01));
        Plane { covariance: a * a.transpose(), ..exact_plane(rv(rng, 1.0), rv(rng, 3.0)) }
    }

    #[test]
    fn residual_examples() {
        let x = NavState::default();
        let pl = exact_plane(Vector3::z(), Vector3::new(0.0, 0.0, 1.0));
        assert_eq!(residual(&x, &Vector3::new(0.0, 0.0, 1.25), &pl), 0.25);
        assert_eq!(residual(&x, &Vector3::new(3.0, -2.0, 1.0), &pl), 0.0);
    }

    #[test]
    fn residual_matches_composed_transform() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..200 {
            let x = random_state(&mut rng);
            let pl = random_plane(&mut rng);
            let p = rv(&mut rng, 5.0);
            let g = transform_point(&x.lidar_pose(), &p);
            let oracle = pl.normal.dot(&g) - pl.normal.dot(&pl.point);
            assert!((residual(&x, &p, &pl) - oracle).abs() < 1e-12);
        }
    }

    #[test]
    fn covariance_special_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random_state(&mut rng);
        let pl = exact_plane(rv(&mut rng, 1.0), rv(&mut rng, 1.0));
        let p = rv(&mut rng, 3.0);
        assert_eq!(residual_covariance(&x, &p, &Matrix3::zeros(), &pl).unwrap(), 0.0);
        let v = residual_covariance(&x, &p, &(Matrix3::identity() * 4e-6), &pl).unwrap();
        assert!((v - 4e-6).abs() < 1e-18);
        let bad = Matrix3::from_diagonal(&Vector3::new(1.0, -1.0, 1.0));
        assert!(matches!(residual_covariance(&x, &p, &bad, &pl), Err(MeasurementError::NotPsd("point", _))));
    }

    #[test]
    fn covariance_matches_monte_carlo() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random_state(&mut rng);
        let pl = random_plane(&mut rng);
        let p = rv(&mut rng, 3.0);
        let a = Matrix3::from_fn(|_, _| rng.random_range(-0.01..0.01));
        let point_cov = a * a.transpose() + Matrix3::identity() * 1e-5;
        let predicted = residual_covariance(&x, &p, &point_cov, &pl).unwrap();
        let lp = point_cov.cholesky().unwrap().l();
        let lpl = (pl.covariance + Matrix6::identity() * 1e-14).cholesky().unwrap().l();
        let r0 = residual(&x, &p, &pl);
        let n = 20_000;
        let mut acc = 0.0;
        let mut acc2 = 0.0;
        for _ in 0..n {
            let dp = lp * Vector3::from_fn(|_, _| rng.sample(StandardNormal));
            let dpl = lpl * Vector6::from_fn(|_, _| rng.sample(StandardNormal));
            // Perturb the LiDAR-frame point so that ᴳp moves by R·dp.
            let pert = Plane { normal: pl.normal + dpl.fixed_rows::<3>(0), point: pl.point + dpl.fixed_rows::<3>(3), ..pl };
            let gp = global_point(&x, &p) + *x.attitude.matrix() * x.ext_rotation.matrix() * dp;
            let r = pert.normal.dot(&(gp - pert.point)) - r0;
            acc += r;
            acc2 += r * r;
        }
        let var = acc2 / n as f64 - (acc / n as f64).powi(2);
        assert!((var - predicted).abs() / predicted < 0.15, "{var} vs {predicted}");
    }

    #[test]
    fn gate_semantics() {
        assert!(gate(0.0, 1e-6, 1e-9).unwrap());
        assert!(!gate(2.0, 1.0, 4.0).unwrap());
        assert!(gate(1.99, 1.0, 4.0).unwrap());
        assert_eq!(gate(1.0, 0.0, 3.84), Err(MeasurementError::NonPositiveVariance(0.0)));
    }

    #[test]
    fn gate_pass_rate_is_chi_square() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let n = 10_000;
        let mut pass = 0;
        for _ in 0..n {
            let var: f64 = rng.random_range(1e-6..1e-4);
            let r = Normal::new(0.0, var.sqrt()).unwrap().sample(&mut rng);
            pass += gate(r, var, 3.84).unwrap() as usize;
        }
        let rate = pass as f64 / n as f64;
        assert!((rate - 0.95).abs() <= 0.02, "{rate}");
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let eps = 1e-6;
        for _ in 0..100 {
            let x = random_state(&mut rng);
            let pl = random_plane(&mut rng);
            let p = rv(&mut rng, 5.0);
            let h = measurement_jacobian(&x, &p, &pl);
            assert_eq!(h.fixed_view::<1, 3>(0, block::POS).transpose(), pl.normal);
            for j in 0..24 {
                let mut d = Vec24::zeros();
                d[j] = eps;
                let fd = (residual(&boxplus(&x, &d), &p, &pl) - residual(&boxplus(&x, &-d), &p, &pl)) / (2.0 * eps);
                let err = (fd - h[j]).abs() / h.norm();
                assert!(err < 1e-5, "column {j}: {fd} vs {}", h[j]);
            }
            for at in [block::VEL, block::BG, block::BA, block::GRAV] {
                assert_eq!(h.fixed_view::<1, 3>(0, at).norm(), 0.0);
            }
        }
    }

    #[test]
    fn attitude_block_spot_check() {
        let x = NavState::default();
        let pl = exact_plane(Vector3::x(), Vector3::new(2.0, 0.0, 0.0));
        let p = Vector3::new(2.0, 0.5, -0.3);
        let h = measurement_jacobian(&x, &p, &pl);
        let expected = -Vector3::<f64>::x().transpose() * skew(&p);
        assert!((h.fixed_view::<1, 3>(0, block::ATT) - expected).norm() < 1e-15);
    }

    struct Fixture {
        truth: NavState,
        map: VoxelMap,
        scan: Vec<Vector3<f64>>,
    }

    /// Dense exact map of `scene` seen from the truth pose plus a sparser scan
    /// in the LiDAR frame with optional range noise.
    fn fixture(scene: &SceneModel, rays: usize, sigma: f64, seed: u64) -> Fixture {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut truth = NavState::default();
        truth.attitude = Rotation::exp(&Vector3::new(0.05, -0.03, 0.4));
        truth.position = Vector3::new(0.1, -0.2, 1.2);
        truth.ext_rotation = Rotation::exp(&Vector3::new(0.01, -0.02, 0.03));
        truth.ext_translation = Vector3::new(0.04, 0.01, -0.03);
        let pose = truth.lidar_pose();
        let cast = |dirs: &ScanPattern| -> Vec<Vector3<f64>> {
            dirs.directions
                .iter()
                .filter_map(|d| {
                    let dw = pose.rotation * *d;
                    scene.intersect(&pose.translation, &dw, 40.0).map(|(s, _)| pose.translation + dw * s)
                })
                .collect()
        };
        let mut map = VoxelMap::new(VoxelMapConfig::default());
        let dense: Vec<_> =
            cast(&ScanPattern::quasi_random(60_000, 99)).into_iter().map(|p| (p, Matrix3::identity() * 4e-6)).collect();
        map.insert_points(&dense, &pose.translation);
        map.refit_all();
        let noise = Normal::new(0.0, sigma.max(1e-300)).unwrap();
        let inv = pose.inverse();
        let scan = cast(&ScanPattern::quasi_random(rays, seed))
            .into_iter()
            .map(|g| {
                let p = transform_point(&inv, &g);
                if sigma > 0.0 {
                    p * (1.0 + noise.sample(&mut rng) / p.norm())
                } else {
                    p
                }
            })
            .collect();
        Fixture { truth, map, scan }
    }

    fn perturbed(truth: &NavState, dp: f64, dtheta: f64) -> NavState {
        let mut x = *truth;
        x.position += Vector3::new(1.0, -1.0, 1.0).normalize() * dp;
        x.attitude = x.attitude * Rotation::exp(&(Vector3::new(-1.0, 2.0, 1.0).normalize() * dtheta));
        x
    }

    fn prior_cov(pos: f64, att: f64) -> Mat24 {
        let mut p = crate::propagation::initial_covariance();
        for i in 0..3 {
            p[(block::POS + i, block::POS + i)] = pos * pos;
            p[(block::ATT + i, block::ATT + i)] = att * att;
            p[(block::VEL + i, block::VEL + i)] = 0.01;
        }
        p
    }

    fn pose_error(a: &NavState, b: &NavState) -> (f64, f64) {
        ((a.position - b.position).norm(), (a.attitude.transpose() * b.attitude).angle())
    }

    #[test]
    fn fixed_point_converges_immediately() {
        let f = fixture(&SceneModel::corner_room(), 2000, 0.0, 6);
        let out = iterated_update(&f.truth, &prior_cov(0.01, 0.01), &f.scan, &f.map, &UpdateConfig::default()).unwrap();
        assert_eq!(out.iterations, 1);
        assert!(out.converged);
        assert!(boxminus(&out.state, &f.truth).amax() < 1e-9);
        assert!(!out.weakly_constrained);
    }

    #[test]
    fn corner_scene_recovers_perturbed_pose() {
        let f = fixture(&SceneModel::corner_room(), 2000, 0.0, 7);
        let prior = perturbed(&f.truth, 0.05, 2f64.to_radians());
        let cfg = UpdateConfig { max_iters: 10, ..UpdateConfig::default() };
        let out = iterated_update(&prior, &prior_cov(0.05, 0.05), &f.scan, &f.map, &cfg).unwrap();
        let (dp, dr) = pose_error(&out.state, &f.truth);
        assert!(dp < 1e-4 && dr < 1e-4, "{dp} m, {dr} rad after {} iterations", out.iterations);
    }

    #[test]
    fn single_plane_leaves_in_plane_translation_unobserved() {
        let scene = SceneModel::single_plane(Vector3::z(), Vector3::new(0.0, 0.0, 0.25), 6.0);
        let f = fixture(&scene, 2000, 0.0, 8);
        let p = prior_cov(0.05, 0.01);
        let out = iterated_update(&f.truth, &p, &f.scan, &f.map, &UpdateConfig::default()).unwrap();
        assert!(out.weakly_constrained);
        for i in 0..2 {
            let at = block::POS + i;
            assert!(out.covariance[(at, at)] >= p[(at, at)] * (1.0 - 1e-6), "axis {i}");
        }
        let z = block::POS + 2;
        assert!(out.covariance[(z, z)] < 1e-2 * p[(z, z)]);
    }

    #[test]
    fn posterior_never_exceeds_prior() {
        let f = fixture(&SceneModel::corner_room(), 1000, 0.002, 9);
        let p = prior_cov(0.02, 0.02);
        let out = iterated_update(&f.truth, &p, &f.scan, &f.map, &UpdateConfig::default()).unwrap();
        let diff = p - out.covariance;
        assert!(diff.symmetric_eigenvalues().min() >= -1e-9);
    }

    #[test]
    fn point_order_does_not_matter() {
        let f = fixture(&SceneModel::corner_room(), 1500, 0.002, 10);
        let prior = perturbed(&f.truth, 0.01, 0.005);
        let p = prior_cov(0.02, 0.02);
        let cfg = UpdateConfig::default();
        let a = iterated_update(&prior, &p, &f.scan, &f.map, &cfg).unwrap();
        let mut shuffled = f.scan.clone();
        shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(1));
        let b = iterated_update(&prior, &p, &shuffled, &f.map, &cfg).unwrap();
        assert!(boxminus(&a.state, &b.state).amax() < 1e-9);
        assert!((a.covariance - b.covariance).amax() < 1e-9);
        assert_eq!(a.inliers, b.inliers);
    }

    #[test]
    fn outliers_are_gated() {
        let f = fixture(&SceneModel::corner_room(), 2000, 0.002, 11);
        let prior = perturbed(&f.truth, 0.005, 0.002);
        let p = prior_cov(0.01, 0.01);
        let cfg = UpdateConfig::default();
        let clean = iterated_update(&prior, &p, &f.scan, &f.map, &cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mut dirty = f.scan.clone();
        let n = dirty.len();
        for i in (0..n).step_by(10) {
            let d = Vector3::from_fn(|_, _| rng.sample::<f64, _>(StandardNormal)).normalize();
            dirty[i] += d * 0.5;
        }
        let noisy = iterated_update(&prior, &p, &dirty, &f.map, &cfg).unwrap();
        let (e_clean, r_clean) = pose_error(&clean.state, &f.truth);
        let (e_dirty, r_dirty) = pose_error(&noisy.state, &f.truth);
        assert!(e_dirty < 2.0 * e_clean.max(1e-4), "{e_dirty} vs {e_clean}");
        assert!(r_dirty < 2.0 * r_clean.max(1e-4), "{r_dirty} vs {r_clean}");
        assert!(clean.residual_rms <= 3.0 * clean.median_sigma);
    }

    #[test]
    fn too_few_inliers_is_degenerate() {
        let f = fixture(&SceneModel::corner_room(), 2000, 0.0, 13);
        let few: Vec<_> = f.scan.iter().take(10).copied().collect();
        let err = iterated_update(&f.truth, &prior_cov(0.01, 0.01), &few, &f.map, &UpdateConfig::default()).unwrap_err();
        assert_eq!(err, MeasurementError::Degenerate { inliers: 10, required: 20 });
        assert_eq!(
            iterated_update(&f.truth, &prior_cov(0.01, 0.01), &[], &f.map, &UpdateConfig::default()).unwrap_err(),
            MeasurementError::EmptyScan
        );
    }
}
