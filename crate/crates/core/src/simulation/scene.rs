use nalgebra::Vector3;

/// A bounded plane: unit normal, a point on the plane and a convex boundary polygon
/// (vertices in order, all on the plane).
#[derive(Clone, Debug, PartialEq)]
pub struct ScenePlane {
    pub normal: Vector3<f64>,
    pub point: Vector3<f64>,
    pub polygon: Vec<Vector3<f64>>,
}

impl ScenePlane {
    /// Rectangle centered at `center`, spanned by `u_axis` and `normal × u_axis`.
    pub fn rectangle(center: Vector3<f64>, normal: Vector3<f64>, u_axis: Vector3<f64>, half_u: f64, half_v: f64) -> Self {
        let n = normal.normalize();
        let u = (u_axis - n * n.dot(&u_axis)).normalize();
        let v = n.cross(&u);
        let polygon = vec![
            center - u * half_u - v * half_v,
            center + u * half_u - v * half_v,
            center + u * half_u + v * half_v,
            center - u * half_u + v * half_v,
        ];
        Self { normal: n, point: center, polygon }
    }

    pub fn signed_distance(&self, p: &Vector3<f64>) -> f64 {
        self.normal.dot(&(p - self.point))
    }

    /// Whether the in-plane projection of `p` lies inside the polygon.
    pub fn contains(&self, p: &Vector3<f64>) -> bool {
        let n = self.polygon.len();
        if n < 3 {
            return true;
        }
        let mut sign = 0.0;
        for i in 0..n {
            let a = self.polygon[i];
            let b = self.polygon[(i + 1) % n];
            let s = self.normal.dot(&(b - a).cross(&(p - a)));
            if s.abs() < 1e-15 {
                continue;
            }
            if sign == 0.0 {
                sign = s.signum();
            } else if s.signum() != sign {
                return false;
            }
        }
        true
    }

    /// Ray parameter of the hit, if any, in `(0, max_range]`.
    pub fn intersect(&self, origin: &Vector3<f64>, dir: &Vector3<f64>, max_range: f64) -> Option<f64> {
        let denom = self.normal.dot(dir);
        if denom.abs() < 1e-12 {
            return None;
        }
        let s = self.normal.dot(&(self.point - origin)) / denom;
        if s <= 0.0 || s > max_range {
            return None;
        }
        let hit = origin + dir * s;
        self.contains(&hit).then_some(s)
    }
}

/// Plane-world scene used as ground truth for ray casting.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneModel {
    pub planes: Vec<ScenePlane>,
}

impl SceneModel {
    /// Floor plus two walls meeting in a corner. Plane offsets sit mid-voxel for
    /// the default 0.5 m map resolution.
    pub fn corner_room() -> Self {
        let floor = ScenePlane::rectangle(Vector3::new(-0.5, -0.5, 0.25), Vector3::z(), Vector3::x(), 3.75, 3.75);
        let wall_x = ScenePlane::rectangle(Vector3::new(3.25, -0.5, 1.75), -Vector3::x(), Vector3::y(), 3.75, 1.5);
        let wall_y = ScenePlane::rectangle(Vector3::new(-0.5, 3.25, 1.75), -Vector3::y(), Vector3::x(), 3.75, 1.5);
        Self { planes: vec![floor, wall_x, wall_y] }
    }

    /// One square plane through `point` with the given normal.
    pub fn single_plane(normal: Vector3<f64>, point: Vector3<f64>, half_size: f64) -> Self {
        let n = normal.normalize();
        let helper = if n.x.abs() < 0.9 { Vector3::x() } else { Vector3::y() };
        Self { planes: vec![ScenePlane::rectangle(point, n, helper, half_size, half_size)] }
    }

    /// Nearest hit along a unit ray: `(range, plane index)`.
    pub fn intersect(&self, origin: &Vector3<f64>, dir: &Vector3<f64>, max_range: f64) -> Option<(f64, usize)> {
        self.planes
            .iter()
            .enumerate()
            .filter_map(|(i, pl)| pl.intersect(origin, dir, max_range).map(|s| (s, i)))
            .min_by(|a, b| a.0.total_cmp(&b.0))
    }

    /// Distance to the closest plane (unbounded planes).
    pub fn distance_to_nearest_plane(&self, p: &Vector3<f64>) -> f64 {
        self.planes.iter().map(|pl| pl.signed_distance(p).abs()).fold(f64::INFINITY, f64::min)
    }
}
