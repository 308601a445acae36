//! Hash-indexed voxel grid of probabilistic plane features.
//!
//! Each voxel keeps commutative sufficient statistics of the points that fell
//! into it, stored relative to the voxel center, and a lazily refitted plane
//! `(n, q)` with its 6×6 covariance.

use std::collections::HashMap;
use std::io::{self, Write};

use nalgebra::{Matrix3, Matrix6, SymmetricEigen, Vector3};
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VoxelMapConfig {
    /// Edge length (m).
    pub voxel_size: f64,
    pub min_fit_count: usize,
    /// Accept a plane iff λ_min / λ_mid is below this.
    pub planarity_ratio: f64,
    /// Refit once the count has grown by this fraction since the last fit.
    pub refresh_fraction: f64,
}

impl Default for VoxelMapConfig {
    fn default() -> Self {
        Self { voxel_size: 0.5, min_fit_count: 10, planarity_ratio: 0.1, refresh_fraction: 0.25 }
    }
}

impl VoxelMapConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.voxel_size > 0.0 && self.voxel_size.is_finite()) {
            return Err(format!("voxel_size must be positive, got {}", self.voxel_size));
        }
        if self.min_fit_count < 3 {
            return Err(format!("min_fit_count must be at least 3, got {}", self.min_fit_count));
        }
        if !(self.planarity_ratio > 0.0 && self.planarity_ratio < 1.0) {
            return Err(format!("planarity_ratio must lie in (0, 1), got {}", self.planarity_ratio));
        }
        if !(self.refresh_fraction >= 0.0) {
            return Err(format!("refresh_fraction must be non-negative, got {}", self.refresh_fraction));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct VoxelKey(pub i64, pub i64, pub i64);

impl VoxelKey {
    pub fn from_point(p: &Vector3<f64>, voxel_size: f64) -> Self {
        let f = |c: f64| (c / voxel_size).floor() as i64;
        Self(f(p.x), f(p.y), f(p.z))
    }

    pub fn center(&self, voxel_size: f64) -> Vector3<f64> {
        Vector3::new(self.0 as f64 + 0.5, self.1 as f64 + 0.5, self.2 as f64 + 0.5) * voxel_size
    }

    pub fn neighbors(&self) -> impl Iterator<Item = VoxelKey> + '_ {
        (-1..=1).flat_map(move |dx| {
            (-1..=1).flat_map(move |dy| {
                (-1..=1)
                    .filter_map(move |dz| (dx, dy, dz).ne(&(0, 0, 0)).then_some(VoxelKey(self.0 + dx, self.1 + dy, self.2 + dz)))
            })
        })
    }
}

/// Fitted plane: unit normal, centroid and covariance over `(n, q)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Plane {
    pub normal: Vector3<f64>,
    pub point: Vector3<f64>,
    pub covariance: Matrix6<f64>,
    /// Eigenvalues of the scatter matrix, ascending.
    pub eigenvalues: Vector3<f64>,
}

impl Plane {
    pub fn signed_distance(&self, p: &Vector3<f64>) -> f64 {
        self.normal.dot(&(p - self.point))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PlaneVoxel {
    pub key: VoxelKey,
    pub center: Vector3<f64>,
    pub count: usize,
    /// Σ(p − c), c the voxel center.
    pub sum: Vector3<f64>,
    /// Σ(p − c)(p − c)ᵀ
    pub outer: Matrix3<f64>,
    /// Σw with w the isotropic point variance.
    pub weight_sum: f64,
    pub weighted_sum: Vector3<f64>,
    pub weighted_outer: Matrix3<f64>,
    /// Sensor origin of the first insertion; fixes the normal sign.
    pub viewpoint: Vector3<f64>,
    pub plane: Option<Plane>,
    pub fitted_count: usize,
}

impl PlaneVoxel {
    fn new(key: VoxelKey, voxel_size: f64, viewpoint: Vector3<f64>) -> Self {
        Self {
            key,
            center: key.center(voxel_size),
            count: 0,
            sum: Vector3::zeros(),
            outer: Matrix3::zeros(),
            weight_sum: 0.0,
            weighted_sum: Vector3::zeros(),
            weighted_outer: Matrix3::zeros(),
            viewpoint,
            plane: None,
            fitted_count: 0,
        }
    }

    fn accumulate(&mut self, p: &Vector3<f64>, variance: f64) {
        let d = p - self.center;
        let dd = d * d.transpose();
        self.count += 1;
        self.sum += d;
        self.outer += dd;
        self.weight_sum += variance;
        self.weighted_sum += d * variance;
        self.weighted_outer += dd * variance;
    }

    pub fn centroid(&self) -> Vector3<f64> {
        self.center + self.sum / self.count as f64
    }
}

/// Result of [`fit_plane`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum PlaneFit {
    Planar(Plane),
    NotPlanar { eigenvalues: Vector3<f64> },
    TooFewPoints(usize),
}

/// Eigen-fit of the voxel statistics with first-order covariance of `(n, q)`.
///
/// For points with isotropic variance w_i and scatter eigenpairs (λ_k, u_k),
/// `∂n/∂p_i = Σ_{m≠0} u_m (a_i0 u_mᵀ + a_im u_0ᵀ) / (N(λ_0 − λ_m))` with
/// `a_ik = u_k·(p_i − q)` and `∂q/∂p_i = I/N`; the sums over i collapse to the
/// weighted moments kept in the voxel.
pub fn fit_plane(voxel: &PlaneVoxel, cfg: &VoxelMapConfig) -> PlaneFit {
    let n = voxel.count;
    if n < cfg.min_fit_count.max(3) {
        return PlaneFit::TooFewPoints(n);
    }
    let nf = n as f64;
    let mean = voxel.sum / nf;
    let scatter = voxel.outer / nf - mean * mean.transpose();
    let scatter = (scatter + scatter.transpose()) * 0.5;
    let eig = SymmetricEigen::new(scatter);
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let lambda = Vector3::from_fn(|i, _| eig.eigenvalues[order[i]].max(0.0));
    let u: [Vector3<f64>; 3] = std::array::from_fn(|i| eig.eigenvectors.column(order[i]).into_owned());
    if !(lambda[0] < cfg.planarity_ratio * lambda[1]) {
        return PlaneFit::NotPlanar { eigenvalues: lambda };
    }

    let q = voxel.center + mean;
    let mut normal = u[0];
    if normal.dot(&(voxel.viewpoint - q)) < 0.0 {
        normal = -normal;
    }

    // Weighted moments about the centroid.
    let s = voxel.weighted_sum - mean * voxel.weight_sum;
    let m = voxel.weighted_outer - voxel.weighted_sum * mean.transpose() - mean * voxel.weighted_sum.transpose()
        + mean * mean.transpose() * voxel.weight_sum;

    let c = [0.0, 1.0 / (nf * (lambda[0] - lambda[1])), 1.0 / (nf * (lambda[0] - lambda[2]))];
    let m00 = normal.dot(&(m * normal));
    let mut cov_nn = Matrix3::zeros();
    for a in 1..3 {
        for b in 1..3 {
            let mut k = u[a].dot(&(m * u[b]));
            if a == b {
                k += m00;
            }
            cov_nn += u[a] * u[b].transpose() * (c[a] * c[b] * k);
        }
    }
    let mut cov_nq = Matrix3::zeros();
    let s0 = normal.dot(&s);
    for a in 1..3 {
        cov_nq += u[a] * (normal * u[a].dot(&s) + u[a] * s0).transpose() * (c[a] / nf);
    }
    let cov_qq = Matrix3::identity() * (voxel.weight_sum / (nf * nf));

    let mut cov = Matrix6::zeros();
    cov.fixed_view_mut::<3, 3>(0, 0).copy_from(&cov_nn);
    cov.fixed_view_mut::<3, 3>(0, 3).copy_from(&cov_nq);
    cov.fixed_view_mut::<3, 3>(3, 0).copy_from(&cov_nq.transpose());
    cov.fixed_view_mut::<3, 3>(3, 3).copy_from(&cov_qq);
    let cov = (cov + cov.transpose()) * 0.5;
    PlaneFit::Planar(Plane { normal, point: q, covariance: cov, eigenvalues: lambda })
}

#[derive(Clone, Debug, Default)]
pub struct VoxelMap {
    pub config: VoxelMapConfig,
    voxels: HashMap<VoxelKey, PlaneVoxel>,
}

impl VoxelMap {
    pub fn new(config: VoxelMapConfig) -> Self {
        Self { config, voxels: HashMap::new() }
    }

    pub fn len(&self) -> usize {
        self.voxels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.voxels.is_empty()
    }

    pub fn voxel(&self, key: &VoxelKey) -> Option<&PlaneVoxel> {
        self.voxels.get(key)
    }

    pub fn voxels(&self) -> impl Iterator<Item = &PlaneVoxel> {
        self.voxels.values()
    }

    pub fn key_of(&self, p: &Vector3<f64>) -> VoxelKey {
        VoxelKey::from_point(p, self.config.voxel_size)
    }

    /// Adds global points with their 3×3 covariances (reduced to an isotropic
    /// variance, trace/3) observed from `viewpoint`. Non-finite points are
    /// skipped. Touched voxels are refitted when they first reach the minimum
    /// count and then whenever they grow by the refresh fraction.
    pub fn insert_points(&mut self, points: &[(Vector3<f64>, Matrix3<f64>)], viewpoint: &Vector3<f64>) -> usize {
        let size = self.config.voxel_size;
        let mut touched = Vec::new();
        let mut inserted = 0;
        for (p, cov) in points {
            if !p.iter().all(|c| c.is_finite()) {
                continue;
            }
            let key = VoxelKey::from_point(p, size);
            let voxel = self.voxels.entry(key).or_insert_with(|| PlaneVoxel::new(key, size, *viewpoint));
            touched.push(key);
            voxel.accumulate(p, (cov.trace() / 3.0).max(0.0));
            inserted += 1;
        }
        touched.sort_unstable();
        touched.dedup();
        for key in touched {
            let voxel = self.voxels.get_mut(&key).expect("touched voxel exists");
            let due = if voxel.fitted_count == 0 {
                voxel.count >= self.config.min_fit_count
            } else {
                voxel.count as f64 >= voxel.fitted_count as f64 * (1.0 + self.config.refresh_fraction)
            };
            if due {
                Self::refit(voxel, &self.config);
            }
        }
        inserted
    }

    fn refit(voxel: &mut PlaneVoxel, cfg: &VoxelMapConfig) {
        voxel.plane = match fit_plane(voxel, cfg) {
            PlaneFit::Planar(plane) => Some(plane),
            _ => None,
        };
        voxel.fitted_count = voxel.count;
    }

    /// Refits every voxel with enough points, ignoring the refresh schedule.
    pub fn refit_all(&mut self) {
        for voxel in self.voxels.values_mut() {
            if voxel.count >= self.config.min_fit_count {
                Self::refit(voxel, &self.config);
            }
        }
    }

    /// Plane of the containing voxel, else of the neighbor whose plane passes
    /// closest to `p` (ties broken by key).
    pub fn query_plane(&self, p: &Vector3<f64>) -> Option<&Plane> {
        let key = self.key_of(p);
        if let Some(plane) = self.voxels.get(&key).and_then(|v| v.plane.as_ref()) {
            return Some(plane);
        }
        key.neighbors()
            .filter_map(|k| self.voxels.get(&k).and_then(|v| v.plane.as_ref()).map(|pl| (k, pl)))
            .min_by(|a, b| a.1.signed_distance(p).abs().total_cmp(&b.1.signed_distance(p).abs()).then(a.0.cmp(&b.0)))
            .map(|(_, pl)| pl)
    }

    /// Drops voxels whose center lies farther than `radius` from `center`.
    pub fn evict(&mut self, center: &Vector3<f64>, radius: f64) -> usize {
        let before = self.voxels.len();
        self.voxels.retain(|_, v| (v.center - center).norm() <= radius);
        before - self.voxels.len()
    }

    /// ASCII PLY of plane centroids with normals, ordered by voxel key.
    pub fn write_ply<W: Write>(&self, mut w: W) -> io::Result<()> {
        let mut planes: Vec<_> = self.voxels.values().filter_map(|v| v.plane.map(|p| (v.key, p))).collect();
        planes.sort_by(|a, b| a.0.cmp(&b.0));
        writeln!(w, "ply\nformat ascii 1.0\nelement vertex {}", planes.len())?;
        for prop in ["x", "y", "z", "nx", "ny", "nz"] {
            writeln!(w, "property double {prop}")?;
        }
        writeln!(w, "end_header")?;
        for (_, p) in planes {
            writeln!(w, "{} {} {} {} {} {}", p.point.x, p.point.y, p.point.z, p.normal.x, p.normal.y, p.normal.z)?;
        }
        Ok(())
    }
}
