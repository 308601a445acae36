//! Four-hole calibration target: layout, synthetic scans and LiDAR hole-centre extraction.

use std::collections::HashMap;
use std::path::Path;

use nalgebra::{Matrix2, Matrix3, Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::CalibrationError;
use crate::geometry::{Pose, Rotation};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Fiducial {
    pub id: u32,
    /// Marker centre in board coordinates (m).
    pub center: [f64; 2],
    /// Marker side length (m).
    pub size: f64,
}

/// Rectangular board centred on its frame origin, lying in z = 0 with +z
/// facing the sensors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationTarget {
    pub width: f64,
    pub height: f64,
    pub hole_radius: f64,
    pub holes: [[f64; 2]; 4],
    #[serde(default)]
    pub fiducials: Vec<Fiducial>,
}

impl Default for CalibrationTarget {
    fn default() -> Self {
        Self {
            width: 0.9,
            height: 0.7,
            hole_radius: 0.08,
            holes: [[-0.24, 0.16], [0.20, 0.18], [0.25, -0.15], [-0.17, -0.18]],
            fiducials: vec![
                Fiducial { id: 0, center: [0.0, 0.25], size: 0.08 },
                Fiducial { id: 1, center: [0.36, 0.02], size: 0.08 },
                Fiducial { id: 2, center: [0.04, -0.26], size: 0.08 },
                Fiducial { id: 3, center: [-0.36, -0.02], size: 0.08 },
            ],
        }
    }
}

const PERMUTATIONS: [[usize; 4]; 24] = {
    let mut out = [[0; 4]; 24];
    let mut n = 0;
    let mut a = 0;
    while a < 4 {
        let mut b = 0;
        while b < 4 {
            let mut c = 0;
            while c < 4 {
                if a != b && a != c && b != c {
                    out[n] = [a, b, c, 6 - a - b - c];
                    n += 1;
                }
                c += 1;
            }
            b += 1;
        }
        a += 1;
    }
    out
};

/// Proper 2D rigid fit `dst ≈ R·src + t`; returns the RMS residual.
fn rigid_2d_rms(src: &[Vector2<f64>], dst: &[Vector2<f64>]) -> f64 {
    let n = src.len() as f64;
    let cs = src.iter().sum::<Vector2<f64>>() / n;
    let cd = dst.iter().sum::<Vector2<f64>>() / n;
    let mut h = Matrix2::zeros();
    for (s, d) in src.iter().zip(dst) {
        h += (s - cs) * (d - cd).transpose();
    }
    let angle = (h[(0, 1)] - h[(1, 0)]).atan2(h[(0, 0)] + h[(1, 1)]);
    let r = Matrix2::new(angle.cos(), -angle.sin(), angle.sin(), angle.cos());
    let ss: f64 = src.iter().zip(dst).map(|(s, d)| (r * (s - cs) - (d - cd)).norm_squared()).sum();
    (ss / n).sqrt()
}

impl CalibrationTarget {
    pub fn hole_centers(&self) -> [Vector3<f64>; 4] {
        self.holes.map(|h| Vector3::new(h[0], h[1], 0.0))
    }

    fn holes_2d(&self) -> Vec<Vector2<f64>> {
        self.holes.iter().map(|h| Vector2::new(h[0], h[1])).collect()
    }

    pub fn validate(&self) -> Result<(), CalibrationError> {
        let bad = |m: String| Err(CalibrationError::InvalidTarget(m));
        if !(self.width > 0.0 && self.height > 0.0 && self.hole_radius > 0.0) {
            return bad("width, height and hole_radius must be positive".into());
        }
        for (i, h) in self.holes.iter().enumerate() {
            if h[0].abs() + 2.0 * self.hole_radius > self.width / 2.0 || h[1].abs() + 2.0 * self.hole_radius > self.height / 2.0 {
                return bad(format!("hole {i} closer than one radius to the board edge"));
            }
        }
        let c = self.holes_2d();
        for i in 0..4 {
            for j in i + 1..4 {
                if (c[i] - c[j]).norm() < 3.0 * self.hole_radius {
                    return bad(format!("holes {i} and {j} closer than 1.5 diameters"));
                }
            }
        }
        let mean = c.iter().sum::<Vector2<f64>>() / 4.0;
        let cov = c.iter().fold(Matrix2::zeros(), |acc, p| acc + (p - mean) * (p - mean).transpose());
        let ev = cov.symmetric_eigen().eigenvalues;
        if ev.min() < 1e-6 * ev.max() {
            return bad("hole centres are collinear".into());
        }
        for perm in PERMUTATIONS.iter().skip(1) {
            let permuted: Vec<_> = perm.iter().map(|&k| c[k]).collect();
            if rigid_2d_rms(&permuted, &c) < 0.01 {
                return bad("hole layout is symmetric; correspondences would be ambiguous".into());
            }
        }
        Ok(())
    }

    pub fn from_toml_str(s: &str) -> Result<Self, CalibrationError> {
        let t: Self = toml::from_str(s).map_err(|e| CalibrationError::InvalidTarget(e.to_string()))?;
        t.validate()?;
        Ok(t)
    }

    pub fn load(path: &Path) -> Result<Self, CalibrationError> {
        let s = std::fs::read_to_string(path).map_err(|e| CalibrationError::io(path, e))?;
        Self::from_toml_str(&s)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("target serializes")
    }
}

/// Hole centres in the camera frame from a fiducial-derived board pose.
pub fn hole_centers_camera(camera_from_board: &Pose, target: &CalibrationTarget) -> [Vector3<f64>; 4] {
    target.hole_centers().map(|c| camera_from_board.transform_point(&c))
}

#[derive(Clone, Debug, PartialEq)]
pub struct TargetScanConfig {
    pub rays: usize,
    /// Range noise σ along each ray (m).
    pub range_sigma: f64,
    /// Beam-footprint widening of every hole (m).
    pub dilation: f64,
    /// Returns placed exactly on each hole rim (edge hits), evenly spaced.
    pub rim_samples: usize,
    pub pattern_seed: u64,
    pub noise_seed: u64,
    /// Holes that are covered and return like the board.
    pub filled_holes: Vec<usize>,
}

impl Default for TargetScanConfig {
    fn default() -> Self {
        Self {
            rays: 200_000,
            range_sigma: 0.0,
            dilation: 0.0,
            rim_samples: 0,
            pattern_seed: 0,
            noise_seed: 0,
            filled_holes: vec![],
        }
    }
}

/// Ray-casts a cone of directions from the LiDAR origin onto the target and
/// keeps only board returns.
pub fn simulate_target_scan(target: &CalibrationTarget, lidar_from_board: &Pose, cfg: &TargetScanConfig) -> Vec<Vector3<f64>> {
    let mut pattern = ChaCha8Rng::seed_from_u64(cfg.pattern_seed);
    let mut noise_rng = ChaCha8Rng::seed_from_u64(cfg.noise_seed ^ 0x9e37_79b9_7f4a_7c15);
    let noise = Normal::new(0.0, cfg.range_sigma.max(0.0)).expect("finite sigma");
    let center = lidar_from_board.translation;
    let dist = center.norm();
    let half_diag = 0.5 * (target.width.powi(2) + target.height.powi(2)).sqrt();
    let half_angle = (half_diag / (dist - half_diag).max(1e-3)).atan().min(1.5);
    let axis = center / dist;
    let u = axis.cross(&if axis.x.abs() < 0.9 { Vector3::x() } else { Vector3::y() }).normalize();
    let v = axis.cross(&u);
    let normal = lidar_from_board.rotation * Vector3::z();
    let hole_r = target.hole_radius + cfg.dilation;
    let open: Vec<Vector2<f64>> = target
        .holes
        .iter()
        .enumerate()
        .filter(|(i, _)| !cfg.filled_holes.contains(i))
        .map(|(_, h)| Vector2::new(h[0], h[1]))
        .collect();
    let inv = lidar_from_board.inverse();
    let mut out = Vec::with_capacity(cfg.rays);
    let mut emit = |p: Vector3<f64>, rng: &mut ChaCha8Rng| {
        let r = p.norm();
        out.push(p * ((r + noise.sample(rng)) / r));
    };
    let cos_min = half_angle.cos();
    for _ in 0..cfg.rays {
        let ct: f64 = pattern.random_range(cos_min..1.0);
        let st = (1.0 - ct * ct).sqrt();
        let phi: f64 = pattern.random_range(0.0..std::f64::consts::TAU);
        let d = axis * ct + (u * phi.cos() + v * phi.sin()) * st;
        let denom = normal.dot(&d);
        if denom.abs() < 1e-9 {
            continue;
        }
        let s = normal.dot(&center) / denom;
        if s <= 0.0 {
            continue;
        }
        let p = d * s;
        let b = inv.transform_point(&p);
        if b.x.abs() > target.width / 2.0 || b.y.abs() > target.height / 2.0 {
            continue;
        }
        if open.iter().any(|h| (b.xy() - h).norm() < hole_r) {
            continue;
        }
        emit(p, &mut noise_rng);
    }
    for h in &open {
        let phase: f64 = pattern.random_range(0.0..std::f64::consts::TAU);
        for k in 0..cfg.rim_samples {
            let a = phase + std::f64::consts::TAU * k as f64 / cfg.rim_samples as f64;
            let b = Vector3::new(h.x + hole_r * a.cos(), h.y + hole_r * a.sin(), 0.0);
            emit(lidar_from_board.transform_point(&b), &mut noise_rng);
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct HoleExtractionConfig {
    /// Neighbourhood radius as a multiple of the median nearest-neighbour spacing.
    pub neighbor_scale: f64,
    /// A point is on an edge when its neighbours leave an angular gap wider than this (rad).
    pub edge_gap: f64,
    pub angular_bins: usize,
    /// Accepted relative deviation of a cluster's circle radius from the hole radius.
    pub radius_tolerance: f64,
    /// Apply the pooled radius-bias correction; otherwise return ellipse centres.
    pub bias_correction: bool,
}

impl Default for HoleExtractionConfig {
    fn default() -> Self {
        Self {
            neighbor_scale: 8.0,
            edge_gap: std::f64::consts::FRAC_PI_2,
            angular_bins: 24,
            radius_tolerance: 0.4,
            bias_correction: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HoleDetection {
    /// Hole centres in the LiDAR frame, ordered as the target's holes.
    pub centers: [Vector3<f64>; 4],
    /// Plane normal, oriented toward the sensor.
    pub normal: Vector3<f64>,
    /// Pooled rim offset from the nominal radius (m).
    pub radius_bias: f64,
    pub edge_points: usize,
    /// RMS of the in-plane layout fit against the target (m).
    pub layout_rms: f64,
}

struct Grid {
    cell: f64,
    cells: HashMap<(i64, i64), Vec<usize>>,
}

impl Grid {
    fn new(pts: &[Vector2<f64>], cell: f64) -> Self {
        let mut cells: HashMap<(i64, i64), Vec<usize>> = HashMap::new();
        for (i, p) in pts.iter().enumerate() {
            cells.entry(Self::key(p, cell)).or_default().push(i);
        }
        Self { cell, cells }
    }

    fn key(p: &Vector2<f64>, cell: f64) -> (i64, i64) {
        ((p.x / cell).floor() as i64, (p.y / cell).floor() as i64)
    }

    /// Indices within `radius` (≤ cell) of `p`.
    fn within<'a>(&'a self, pts: &'a [Vector2<f64>], p: &'a Vector2<f64>, radius: f64) -> impl Iterator<Item = usize> + 'a {
        let (kx, ky) = Self::key(p, self.cell);
        (-1..=1)
            .flat_map(move |dx| (-1..=1).map(move |dy| (kx + dx, ky + dy)))
            .filter_map(|k| self.cells.get(&k))
            .flatten()
            .copied()
            .filter(move |&j| (pts[j] - p).norm() <= radius)
    }
}

fn find(parent: &mut [usize], mut i: usize) -> usize {
    while parent[i] != i {
        parent[i] = parent[parent[i]];
        i = parent[i];
    }
    i
}

/// Algebraic circle fit; returns (centre, radius).
fn fit_circle(pts: &[Vector2<f64>]) -> Option<(Vector2<f64>, f64)> {
    let mean = pts.iter().sum::<Vector2<f64>>() / pts.len() as f64;
    let mut ata = Matrix3::zeros();
    let mut atb = Vector3::zeros();
    for p in pts {
        let q = p - mean;
        let row = Vector3::new(q.x, q.y, 1.0);
        ata += row * row.transpose();
        atb += row * -(q.norm_squared());
    }
    let s = ata.lu().solve(&atb)?;
    let c = Vector2::new(-s.x / 2.0, -s.y / 2.0);
    let r2 = c.norm_squared() - s.z;
    (r2 > 0.0).then(|| (c + mean, r2.sqrt()))
}

/// General conic fit; returns the ellipse centre.
fn fit_ellipse_center(pts: &[Vector2<f64>]) -> Option<Vector2<f64>> {
    if pts.len() < 6 {
        return None;
    }
    let mean = pts.iter().sum::<Vector2<f64>>() / pts.len() as f64;
    let scale = (pts.iter().map(|p| (p - mean).norm_squared()).sum::<f64>() / pts.len() as f64).sqrt();
    let mut m = nalgebra::Matrix6::zeros();
    for p in pts {
        let q = (p - mean) / scale;
        let row = nalgebra::Vector6::new(q.x * q.x, q.x * q.y, q.y * q.y, q.x, q.y, 1.0);
        m += row * row.transpose();
    }
    let eig = m.symmetric_eigen();
    let c = eig.eigenvectors.column(eig.eigenvalues.imin());
    let (a, b, cc, d, e) = (c[0], c[1], c[2], c[3], c[4]);
    if b * b - 4.0 * a * cc >= 0.0 {
        return None;
    }
    let center = Matrix2::new(2.0 * a, b, b, 2.0 * cc).lu().solve(&Vector2::new(-d, -e))?;
    Some(center * scale + mean)
}

/// Centre with the radius held fixed, by Gauss–Newton from `start`.
fn fit_fixed_radius(pts: &[Vector2<f64>], radius: f64, start: Vector2<f64>) -> Vector2<f64> {
    let mut c = start;
    for _ in 0..50 {
        let mut jtj = Matrix2::zeros();
        let mut jtr = Vector2::zeros();
        for p in pts {
            let d = p - c;
            let n = d.norm();
            if n == 0.0 {
                continue;
            }
            let j = -d / n;
            jtj += j * j.transpose();
            jtr += j * (n - radius);
        }
        let Some(step) = jtj.lu().solve(&-jtr) else { break };
        c += step;
        if step.norm() < 1e-13 {
            break;
        }
    }
    c
}

/// Hole centres from a cropped target scan (LiDAR frame).
pub fn extract_hole_centers_lidar(
    points: &[Vector3<f64>],
    target: &CalibrationTarget,
    cfg: &HoleExtractionConfig,
) -> Result<HoleDetection, CalibrationError> {
    if points.len() < 100 {
        return Err(CalibrationError::InvalidInput(format!("{} target points; need at least 100", points.len())));
    }
    let n = points.len() as f64;
    let centroid = points.iter().sum::<Vector3<f64>>() / n;
    let cov = points.iter().fold(Matrix3::zeros(), |acc, p| acc + (p - centroid) * (p - centroid).transpose()) / n;
    let eig = cov.symmetric_eigen();
    let mut order = [0, 1, 2];
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let mut normal: Vector3<f64> = eig.eigenvectors.column(order[0]).into();
    if normal.dot(&-centroid) < 0.0 {
        normal = -normal;
    }
    let e1: Vector3<f64> = eig.eigenvectors.column(order[2]).into();
    let e1 = (e1 - normal * normal.dot(&e1)).normalize();
    let e2 = normal.cross(&e1);
    let pts: Vec<Vector2<f64>> = points.iter().map(|p| Vector2::new((p - centroid).dot(&e1), (p - centroid).dot(&e2))).collect();

    // Median nearest-neighbour spacing.
    let (lo, hi) = pts.iter().fold((Vector2::repeat(f64::MAX), Vector2::repeat(f64::MIN)), |(lo, hi), p| (lo.inf(p), hi.sup(p)));
    let area = ((hi - lo).x * (hi - lo).y).max(1e-12);
    let guess = (area / n).sqrt();
    let coarse = Grid::new(&pts, 2.0 * guess);
    let mut nn: Vec<f64> = pts
        .iter()
        .enumerate()
        .map(|(i, p)| {
            coarse.within(&pts, p, 2.0 * guess).filter(|&j| j != i).map(|j| (pts[j] - p).norm()).fold(2.0 * guess, f64::min)
        })
        .collect();
    let mid = nn.len() / 2;
    let spacing = *nn.select_nth_unstable_by(mid, f64::total_cmp).1;
    let radius = cfg.neighbor_scale * spacing;
    let grid = Grid::new(&pts, radius);

    let edges: Vec<usize> = (0..pts.len())
        .filter(|&i| {
            let p = &pts[i];
            let mut angles: Vec<f64> =
                grid.within(&pts, p, radius).filter(|&j| j != i).map(|j| (pts[j].y - p.y).atan2(pts[j].x - p.x)).collect();
            if angles.len() < 3 {
                return false;
            }
            angles.sort_by(f64::total_cmp);
            let wrap = angles[0] + std::f64::consts::TAU - angles[angles.len() - 1];
            let gap = angles.windows(2).map(|w| w[1] - w[0]).fold(wrap, f64::max);
            gap > cfg.edge_gap
        })
        .collect();

    // Single-linkage clustering of edge points.
    let edge_pts: Vec<Vector2<f64>> = edges.iter().map(|&i| pts[i]).collect();
    let link = radius;
    let egrid = Grid::new(&edge_pts, link);
    let mut parent: Vec<usize> = (0..edge_pts.len()).collect();
    for i in 0..edge_pts.len() {
        for j in egrid.within(&edge_pts, &edge_pts[i], link).collect::<Vec<_>>() {
            let (a, b) = (find(&mut parent, i), find(&mut parent, j));
            if a != b {
                parent[a.max(b)] = a.min(b);
            }
        }
    }
    let mut clusters: HashMap<usize, Vec<Vector2<f64>>> = HashMap::new();
    for i in 0..edge_pts.len() {
        let r = find(&mut parent, i);
        clusters.entry(r).or_default().push(edge_pts[i]);
    }
    let mut holes: Vec<(f64, Vec<Vector2<f64>>, Vector2<f64>)> = clusters
        .into_values()
        .filter(|c| c.len() >= 8)
        .filter_map(|c| {
            let (center, r) = fit_circle(&c)?;
            let dev = (r - target.hole_radius).abs() / target.hole_radius;
            (dev < cfg.radius_tolerance).then_some((dev, c, center))
        })
        .collect();
    if holes.len() < 4 {
        return Err(CalibrationError::HolesFound { found: holes.len(), expected: 4 });
    }
    holes.sort_by(|a, b| a.0.total_cmp(&b.0));
    holes.truncate(4);

    // Innermost edge point per angular bin, then an ellipse per hole.
    let mut rims = Vec::with_capacity(4);
    let mut ellipse_centers = Vec::with_capacity(4);
    for (_, cluster, c0) in &holes {
        let mut center = *c0;
        let mut rim = Vec::new();
        // Re-bin once around the refined centre.
        for _ in 0..2 {
            let mut best: Vec<Option<(f64, Vector2<f64>)>> = vec![None; cfg.angular_bins];
            for p in cluster {
                let d = p - center;
                let a = d.y.atan2(d.x) + std::f64::consts::PI;
                let bin = ((a / std::f64::consts::TAU * cfg.angular_bins as f64) as usize).min(cfg.angular_bins - 1);
                let r = d.norm();
                if best[bin].is_none_or(|(br, _)| r < br) {
                    best[bin] = Some((r, *p));
                }
            }
            rim = best.into_iter().flatten().map(|(_, p)| p).collect();
            center = fit_ellipse_center(&rim).unwrap_or(center);
        }
        ellipse_centers.push(center);
        rims.push(rim);
    }
    let radius_bias = rims
        .iter()
        .zip(&ellipse_centers)
        .map(|(rim, c)| rim.iter().map(|p| (p - c).norm()).sum::<f64>() / rim.len() as f64 - target.hole_radius)
        .sum::<f64>()
        / 4.0;
    let centers_2d: Vec<Vector2<f64>> = if cfg.bias_correction {
        rims.iter().zip(&ellipse_centers).map(|(rim, c)| fit_fixed_radius(rim, target.hole_radius + radius_bias, *c)).collect()
    } else {
        ellipse_centers
    };

    // Order detections to match the target layout.
    let layout = target.holes_2d();
    let (perm, layout_rms) = PERMUTATIONS
        .iter()
        .map(|perm| {
            let src: Vec<_> = perm.iter().map(|&k| centers_2d[k]).collect();
            (perm, rigid_2d_rms(&layout, &src))
        })
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .expect("non-empty");
    let lift = |c: &Vector2<f64>| centroid + e1 * c.x + e2 * c.y;
    Ok(HoleDetection { centers: perm.map(|k| lift(&centers_2d[k])), normal, radius_bias, edge_points: edges.len(), layout_rms })
}

/// One extrinsic-calibration capture: the cropped target cloud in the LiDAR
/// frame and the fiducial-derived camera ← board pose.
#[derive(Clone, Debug, PartialEq)]
pub struct TargetFrame {
    pub points: Vec<Vector3<f64>>,
    pub camera_from_board: Pose,
}

/// Board placements in front of the camera with the corresponding LiDAR
/// scans. `lidar_camera` is ᴸT_C; the fiducial pose is perturbed by
/// `pose_noise = (rotation σ rad, translation σ m)`.
pub fn synthetic_target_frames(
    target: &CalibrationTarget,
    lidar_camera: &Pose,
    frames: usize,
    scan: &TargetScanConfig,
    pose_noise: (f64, f64),
    seed: u64,
) -> Vec<TargetFrame> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rn = Normal::new(0.0, pose_noise.0.max(0.0)).expect("finite sigma");
    let tn = Normal::new(0.0, pose_noise.1.max(0.0)).expect("finite sigma");
    (0..frames)
        .map(|f| {
            let center = Vector3::new(rng.random_range(-0.3..0.3), rng.random_range(-0.25..0.25), rng.random_range(1.3..2.0));
            let z = -center.normalize();
            let x = Vector3::y().cross(&z).normalize();
            let y = z.cross(&x);
            let facing = Rotation::from_matrix_projected(&Matrix3::from_columns(&[x, y, z]));
            let tilt = Rotation::exp(&Vector3::new(
                rng.random_range(-0.35..0.35),
                rng.random_range(-0.35..0.35),
                rng.random_range(-0.6..0.6),
            ));
            let camera_from_board = Pose::new(facing * tilt, center);
            let lidar_from_board = lidar_camera.compose(&camera_from_board);
            let cfg = TargetScanConfig {
                pattern_seed: scan.pattern_seed.wrapping_add(f as u64 * 7919),
                noise_seed: scan.noise_seed.wrapping_add(f as u64 * 104_729),
                ..scan.clone()
            };
            let points = simulate_target_scan(target, &lidar_from_board, &cfg);
            let noise = Pose::new(
                Rotation::exp(&Vector3::from_fn(|_, _| rn.sample(&mut rng))),
                Vector3::from_fn(|_, _| tn.sample(&mut rng)),
            );
            TargetFrame { points, camera_from_board: camera_from_board.compose(&noise) }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn board_pose() -> Pose {
        let facing = Rotation::from_matrix_projected(&Matrix3::from_columns(&[-Vector3::y(), Vector3::z(), -Vector3::x()]));
        Pose::new(facing * Rotation::exp(&Vector3::new(0.2, -0.15, 0.3)), Vector3::new(1.6, 0.1, -0.05))
    }

    fn max_error(det: &HoleDetection, target: &CalibrationTarget, pose: &Pose) -> f64 {
        det.centers.iter().zip(target.hole_centers()).map(|(c, t)| (c - pose.transform_point(&t)).norm()).fold(0.0, f64::max)
    }

    #[test]
    fn default_target_is_valid_and_symmetric_layouts_are_rejected() {
        CalibrationTarget::default().validate().unwrap();
        let sym = CalibrationTarget { holes: [[-0.2, 0.15], [0.2, 0.15], [0.2, -0.15], [-0.2, -0.15]], ..Default::default() };
        assert!(sym.validate().is_err());
        let t = CalibrationTarget::default();
        assert_eq!(CalibrationTarget::from_toml_str(&t.to_toml_string()).unwrap(), t);
    }

    #[test]
    fn camera_centers_follow_pose() {
        let t = CalibrationTarget::default();
        assert_eq!(hole_centers_camera(&Pose::identity(), &t), t.hole_centers());
        let shift = Vector3::new(0.1, -0.2, 1.5);
        let c = hole_centers_camera(&Pose::from_translation(shift), &t);
        for (a, b) in c.iter().zip(t.hole_centers()) {
            assert!((a - (b + shift)).norm() < 1e-15);
        }
        let p = board_pose();
        for (a, b) in hole_centers_camera(&p, &t).iter().zip(t.hole_centers()) {
            assert_eq!(*a, p.transform_point(&b));
        }
    }

    #[test]
    fn noiseless_scan_with_rim_returns_is_exact() {
        let t = CalibrationTarget::default();
        let pose = board_pose();
        let scan = simulate_target_scan(&t, &pose, &TargetScanConfig { rim_samples: 90, ..Default::default() });
        let det = extract_hole_centers_lidar(&scan, &t, &HoleExtractionConfig::default()).unwrap();
        assert!(max_error(&det, &t, &pose) < 1e-6, "{}", max_error(&det, &t, &pose));
    }

    #[test]
    fn noisy_scan_within_3mm() {
        let t = CalibrationTarget::default();
        let pose = board_pose();
        for seed in 0..3 {
            let cfg = TargetScanConfig { range_sigma: 0.002, pattern_seed: seed, noise_seed: seed + 100, ..Default::default() };
            let det =
                extract_hole_centers_lidar(&simulate_target_scan(&t, &pose, &cfg), &t, &HoleExtractionConfig::default()).unwrap();
            let e = max_error(&det, &t, &pose);
            assert!(e < 0.003, "seed {seed}: {e}");
        }
    }

    #[test]
    fn missing_hole_is_reported() {
        let t = CalibrationTarget::default();
        let cfg = TargetScanConfig { filled_holes: vec![2], ..Default::default() };
        let err =
            extract_hole_centers_lidar(&simulate_target_scan(&t, &board_pose(), &cfg), &t, &HoleExtractionConfig::default())
                .unwrap_err();
        assert_eq!(err.to_string(), "3 of 4 holes found");
    }

    #[test]
    fn invariant_to_point_order_and_pattern() {
        let t = CalibrationTarget::default();
        let pose = board_pose();
        let base = TargetScanConfig { range_sigma: 0.002, ..Default::default() };
        let a = simulate_target_scan(&t, &pose, &base);
        let da = extract_hole_centers_lidar(&a, &t, &HoleExtractionConfig::default()).unwrap();
        let mut rev = a.clone();
        rev.reverse();
        let dr = extract_hole_centers_lidar(&rev, &t, &HoleExtractionConfig::default()).unwrap();
        for (x, y) in da.centers.iter().zip(&dr.centers) {
            assert!((x - y).norm() < 1e-9);
        }
        for seed in 1..5 {
            let b = simulate_target_scan(&t, &pose, &TargetScanConfig { pattern_seed: seed, ..base.clone() });
            let db = extract_hole_centers_lidar(&b, &t, &HoleExtractionConfig::default()).unwrap();
            for (x, y) in da.centers.iter().zip(&db.centers) {
                assert!((x - y).norm() < 1e-3, "seed {seed}: {}", (x - y).norm());
            }
        }
    }

    #[test]
    fn bias_correction_beats_plain_ellipse_under_dilation() {
        let t = CalibrationTarget::default();
        let pose = board_pose();
        let mut corrected = Vec::new();
        let mut plain = Vec::new();
        for seed in 0..20 {
            let cfg = TargetScanConfig {
                range_sigma: 0.002,
                dilation: 0.006,
                pattern_seed: seed,
                noise_seed: 1000 + seed,
                ..Default::default()
            };
            let scan = simulate_target_scan(&t, &pose, &cfg);
            let on = extract_hole_centers_lidar(&scan, &t, &HoleExtractionConfig::default()).unwrap();
            let off =
                extract_hole_centers_lidar(&scan, &t, &HoleExtractionConfig { bias_correction: false, ..Default::default() })
                    .unwrap();
            corrected.push(max_error(&on, &t, &pose));
            plain.push(max_error(&off, &t, &pose));
        }
        let median = |v: &mut Vec<f64>| {
            v.sort_by(f64::total_cmp);
            v[v.len() / 2]
        };
        let (c, p) = (median(&mut corrected), median(&mut plain));
        assert!(c < p, "corrected {c} vs plain {p}");
    }
}
