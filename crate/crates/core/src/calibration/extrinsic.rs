//! Rigid alignment of hole-centre correspondences and multi-frame refinement.

use nalgebra::{DVector, Matrix3, Vector3};
use rayon::prelude::*;
use statrs::distribution::{ChiSquared, ContinuousCDF};

use super::target::{extract_hole_centers_lidar, hole_centers_camera, CalibrationTarget, HoleExtractionConfig, TargetFrame};
use super::CalibrationError;
use crate::geometry::{Pose, Rotation};
use crate::lm::{levenberg_marquardt, LeastSquares, LmConfig, Termination};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Correspondence {
    pub p_l: Vector3<f64>,
    pub p_c: Vector3<f64>,
    pub frame: usize,
}

/// Least-squares rigid transform with `dst ≈ T·src`.
pub fn solve_rigid(src: &[Vector3<f64>], dst: &[Vector3<f64>]) -> Result<Pose, CalibrationError> {
    if src.len() != dst.len() {
        return Err(CalibrationError::InvalidInput("point sets differ in length".into()));
    }
    if src.len() < 3 {
        return Err(CalibrationError::DegenerateGeometry(format!("{} correspondences; need at least 3", src.len())));
    }
    if src.iter().chain(dst).any(|p| !p.iter().all(|v| v.is_finite())) {
        return Err(CalibrationError::InvalidInput("non-finite point".into()));
    }
    let n = src.len() as f64;
    let cs = src.iter().sum::<Vector3<f64>>() / n;
    let cd = dst.iter().sum::<Vector3<f64>>() / n;
    let mut h = Matrix3::zeros();
    let mut spread = Matrix3::zeros();
    for (s, d) in src.iter().zip(dst) {
        h += (s - cs) * (d - cd).transpose();
        spread += (s - cs) * (s - cs).transpose();
    }
    let sv = spread.symmetric_eigen().eigenvalues;
    let mut sv: Vec<f64> = sv.iter().copied().collect();
    sv.sort_by(|a, b| b.total_cmp(a));
    if !(sv[1] > 1e-12 * sv[0].max(1e-300)) {
        return Err(CalibrationError::DegenerateGeometry("points are collinear or coincident".into()));
    }
    let svd = h.svd(true, true);
    let (u, v_t) = (svd.u.expect("u"), svd.v_t.expect("v_t"));
    let v = v_t.transpose();
    let mut d = Matrix3::identity();
    if (v * u.transpose()).determinant() < 0.0 {
        d[(2, 2)] = -1.0;
    }
    let r = v * d * u.transpose();
    let rot = Rotation::from_matrix_projected(&r);
    Ok(Pose::new(rot, cd - rot * cs))
}

/// `T` with `p_C ≈ T·p_L`, i.e. camera ← LiDAR; the frame-chain extrinsic ᴸT_C is its inverse.
pub fn solve_extrinsic_svd(corr: &[Correspondence]) -> Result<Pose, CalibrationError> {
    let src: Vec<_> = corr.iter().map(|c| c.p_l).collect();
    let dst: Vec<_> = corr.iter().map(|c| c.p_c).collect();
    solve_rigid(&src, &dst)
}

#[derive(Clone, Debug, PartialEq)]
pub struct RefineConfig {
    pub lm: LmConfig,
    /// Bartlett-test level below which per-frame weights are used.
    pub significance: f64,
}

impl Default for RefineConfig {
    fn default() -> Self {
        Self { lm: LmConfig::default(), significance: 0.01 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Refinement {
    pub pose: Pose,
    pub initial_cost: f64,
    pub cost: f64,
    /// Weight per frame id (all ones when unweighted).
    pub weights: Vec<f64>,
    pub weighted: bool,
    /// Bartlett p-value for equal per-frame residual variance (1 with fewer than two frames).
    pub homoscedasticity_p: f64,
    pub iterations: usize,
    pub termination: Termination,
}

/// Bartlett's test for equal variances; `groups` holds (sum of squares, degrees of freedom).
pub fn bartlett_p_value(groups: &[(f64, f64)]) -> f64 {
    let groups: Vec<_> = groups.iter().filter(|g| g.1 > 0.0).collect();
    let k = groups.len();
    if k < 2 {
        return 1.0;
    }
    let n: f64 = groups.iter().map(|g| g.1).sum();
    let pooled = groups.iter().map(|g| g.0).sum::<f64>() / n;
    if pooled <= 0.0 {
        return 1.0;
    }
    let num = n * pooled.ln() - groups.iter().map(|g| g.1 * (g.0 / g.1).max(f64::MIN_POSITIVE).ln()).sum::<f64>();
    let corr = 1.0 + (groups.iter().map(|g| 1.0 / g.1).sum::<f64>() - 1.0 / n) / (3.0 * (k as f64 - 1.0));
    let stat = num / corr;
    ChiSquared::new(k as f64 - 1.0).map(|c| c.sf(stat)).unwrap_or(1.0)
}

struct Alignment<'a> {
    corr: &'a [Correspondence],
    sqrt_w: Vec<f64>,
    base: Pose,
}

impl Alignment<'_> {
    fn pose(&self, x: &DVector<f64>) -> Pose {
        Pose::new(
            self.base.rotation * Rotation::exp(&Vector3::new(x[0], x[1], x[2])),
            self.base.translation + Vector3::new(x[3], x[4], x[5]),
        )
    }
}

impl LeastSquares for Alignment<'_> {
    fn residuals(&self, x: &DVector<f64>) -> DVector<f64> {
        let t = self.pose(x);
        let mut r = DVector::zeros(3 * self.corr.len());
        for (i, c) in self.corr.iter().enumerate() {
            let e = (t.transform_point(&c.p_l) - c.p_c) * self.sqrt_w[i];
            r.fixed_rows_mut::<3>(3 * i).copy_from(&e);
        }
        r
    }
}

fn frame_sums(corr: &[Correspondence], t: &Pose, frames: usize) -> Vec<(f64, f64)> {
    let mut g = vec![(0.0, 0.0); frames];
    for c in corr {
        g[c.frame].0 += (t.transform_point(&c.p_l) - c.p_c).norm_squared();
        g[c.frame].1 += 3.0;
    }
    g
}

/// Joint refinement over all frames, starting at `initial`. Frames are
/// weighted by inverse residual variance only when a Bartlett test rejects
/// equal variances; otherwise the unweighted optimum (the SVD solution) stands.
pub fn refine_extrinsic(corr: &[Correspondence], initial: &Pose, cfg: &RefineConfig) -> Result<Refinement, CalibrationError> {
    if corr.len() < 3 {
        return Err(CalibrationError::DegenerateGeometry(format!("{} correspondences; need at least 3", corr.len())));
    }
    let frames = corr.iter().map(|c| c.frame).max().unwrap_or(0) + 1;
    let sums = frame_sums(corr, initial, frames);
    // Apportion the six pose degrees of freedom across frames.
    let total: f64 = sums.iter().map(|g| g.1).sum();
    let dof: Vec<(f64, f64)> = sums.iter().map(|g| (g.0, g.1 * (1.0 - 6.0 / total).max(0.0))).collect();
    let p = bartlett_p_value(&dof);
    let weighted = p < cfg.significance;
    let weights: Vec<f64> = if weighted {
        let var: Vec<f64> = dof.iter().map(|g| if g.1 > 0.0 { g.0 / g.1 } else { 0.0 }).collect();
        let floor = var.iter().copied().filter(|v| *v > 0.0).fold(f64::MAX, f64::min);
        let inv: Vec<f64> = var.iter().map(|v| 1.0 / v.max(floor)).collect();
        let mean = inv.iter().sum::<f64>() / inv.len() as f64;
        inv.iter().map(|w| w / mean).collect()
    } else {
        vec![1.0; frames]
    };
    let problem = Alignment { corr, sqrt_w: corr.iter().map(|c| weights[c.frame].sqrt()).collect(), base: *initial };
    let rep = levenberg_marquardt(&problem, DVector::zeros(6), &cfg.lm);
    if !rep.cost.is_finite() {
        return Err(CalibrationError::Diverged("non-finite alignment cost".into()));
    }
    Ok(Refinement {
        pose: problem.pose(&rep.x),
        initial_cost: rep.initial_cost,
        cost: rep.cost,
        weights,
        weighted,
        homoscedasticity_p: p,
        iterations: rep.iterations,
        termination: rep.termination,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExtrinsicResult {
    pub correspondences: Vec<Correspondence>,
    /// Camera ← LiDAR from the closed-form solve.
    pub svd: Pose,
    pub refined: Refinement,
}

impl ExtrinsicResult {
    /// ᴸT_C in frame-chain convention.
    pub fn lidar_camera(&self) -> Pose {
        self.refined.pose.inverse()
    }
}

/// Hole extraction on every frame (in parallel), then SVD and refinement.
pub fn calibrate_extrinsic(
    frames: &[TargetFrame],
    target: &CalibrationTarget,
    extraction: &HoleExtractionConfig,
    refine: &RefineConfig,
) -> Result<ExtrinsicResult, CalibrationError> {
    if frames.is_empty() {
        return Err(CalibrationError::InvalidInput("no target frames".into()));
    }
    let detections: Vec<_> = frames
        .par_iter()
        .enumerate()
        .map(|(i, f)| {
            extract_hole_centers_lidar(&f.points, target, extraction)
                .map_err(|e| CalibrationError::Frame { frame: i, source: Box::new(e) })
        })
        .collect::<Result<_, _>>()?;
    let correspondences: Vec<Correspondence> = frames
        .iter()
        .zip(&detections)
        .enumerate()
        .flat_map(|(i, (f, d))| {
            hole_centers_camera(&f.camera_from_board, target).into_iter().zip(d.centers).map(move |(p_c, p_l)| Correspondence {
                p_l,
                p_c,
                frame: i,
            })
        })
        .collect();
    let svd = solve_extrinsic_svd(&correspondences)?;
    let refined = refine_extrinsic(&correspondences, &svd, refine)?;
    Ok(ExtrinsicResult { correspondences, svd, refined })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn truth() -> Pose {
        Pose::new(Rotation::exp(&Vector3::new(0.1, -1.2, 0.4)), Vector3::new(0.05, -0.12, 0.03))
    }

    fn random_points(rng: &mut ChaCha8Rng, n: usize) -> Vec<Vector3<f64>> {
        (0..n).map(|_| Vector3::from_fn(|_, _| rng.random_range(-1.0..1.0)) + Vector3::new(2.0, 0.0, 0.0)).collect()
    }

    fn frames(seed: u64, sigmas: &[f64]) -> Vec<Correspondence> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let t = truth();
        let mut out = Vec::new();
        for (f, &s) in sigmas.iter().enumerate() {
            let n = Normal::new(0.0, s).unwrap();
            for p in random_points(&mut rng, 4) {
                let p_c = t.transform_point(&p) + Vector3::from_fn(|_, _| n.sample(&mut rng));
                out.push(Correspondence { p_l: p, p_c, frame: f });
            }
        }
        out
    }

    fn errors(a: &Pose, b: &Pose) -> (f64, f64) {
        let (r, t) = a.delta(b);
        (t.norm(), r.norm())
    }

    #[test]
    fn exact_recovery_and_identity() {
        let c = frames(1, &[0.0, 0.0]);
        let t = solve_extrinsic_svd(&c).unwrap();
        let (et, er) = errors(&t, &truth());
        assert!(et < 1e-12 && er < 1e-12, "{et} {er}");
        let same: Vec<_> = c.iter().map(|c| Correspondence { p_c: c.p_l, ..*c }).collect();
        let id = solve_extrinsic_svd(&same).unwrap();
        assert!(id.rotation.angle() < 1e-12 && id.translation.norm() < 1e-12);
    }

    #[test]
    fn rejects_collinear() {
        let c: Vec<_> = (0..5)
            .map(|i| Correspondence { p_l: Vector3::new(i as f64, 0.0, 0.0), p_c: Vector3::new(0.0, i as f64, 0.0), frame: 0 })
            .collect();
        assert!(matches!(solve_extrinsic_svd(&c), Err(CalibrationError::DegenerateGeometry(_))));
        assert!(solve_extrinsic_svd(&c[..2]).is_err());
    }

    #[test]
    fn equivariant_under_camera_transform() {
        let c = frames(2, &[0.002; 5]);
        let t = solve_extrinsic_svd(&c).unwrap();
        let g = Pose::new(Rotation::exp(&Vector3::new(0.3, 0.2, -0.5)), Vector3::new(1.0, -2.0, 0.5));
        let moved: Vec<_> = c.iter().map(|c| Correspondence { p_c: g.transform_point(&c.p_c), ..*c }).collect();
        let tg = solve_extrinsic_svd(&moved).unwrap();
        let (et, er) = errors(&tg, &g.compose(&t));
        assert!(et < 1e-12 && er < 1e-12);
    }

    #[test]
    fn noisy_five_frames_within_tolerance() {
        let c = frames(3, &[0.002; 5]);
        let (et, er) = errors(&solve_extrinsic_svd(&c).unwrap(), &truth());
        assert!(et < 0.005 && er < 0.5f64.to_radians(), "{et} {er}");
    }

    #[test]
    fn refinement_keeps_noiseless_and_single_frame_solutions() {
        for c in [frames(4, &[0.0; 5]), frames(5, &[0.002])] {
            let svd = solve_extrinsic_svd(&c).unwrap();
            let r = refine_extrinsic(&c, &svd, &RefineConfig::default()).unwrap();
            let (et, er) = errors(&r.pose, &svd);
            assert!(et < 1e-10 && er < 1e-10, "{et} {er}");
            assert!(r.cost <= r.initial_cost);
        }
    }

    #[test]
    fn heteroscedastic_refinement_no_worse_on_median() {
        let mut svd_err = Vec::new();
        let mut ref_err = Vec::new();
        for seed in 0..20 {
            let c = frames(100 + seed, &[0.0005, 0.001, 0.002, 0.008, 0.02]);
            let svd = solve_extrinsic_svd(&c).unwrap();
            let r = refine_extrinsic(&c, &svd, &RefineConfig::default()).unwrap();
            assert!(r.cost <= r.initial_cost);
            svd_err.push(errors(&svd, &truth()).0);
            ref_err.push(errors(&r.pose, &truth()).0);
        }
        let median = |v: &mut Vec<f64>| {
            v.sort_by(f64::total_cmp);
            v[v.len() / 2]
        };
        let (s, r) = (median(&mut svd_err), median(&mut ref_err));
        assert!(r <= s, "refined {r} vs svd {s}");
    }

    #[test]
    fn bartlett_detects_unequal_variance() {
        assert!(bartlett_p_value(&[(1.0, 10.0), (1.1, 10.0), (0.9, 10.0)]) > 0.5);
        assert!(bartlett_p_value(&[(0.01, 10.0), (10.0, 10.0)]) < 1e-3);
        assert_eq!(bartlett_p_value(&[(1.0, 10.0)]), 1.0);
    }
}
