//! Point-cloud colourisation from a calibrated fisheye image.

use nalgebra::Vector3;

use super::fisheye::{FisheyeIntrinsics, ImageSize, THETA_MAX};
use crate::geometry::Pose;

pub type Rgb = [u8; 3];

pub trait ImageSampler {
    fn size(&self) -> ImageSize;
    /// Colour at a sub-pixel location, `None` outside the image.
    fn sample(&self, u: f64, v: f64) -> Option<Rgb>;
}

/// Row-major RGB raster sampled at the nearest pixel centre.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<Rgb>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize, fill: Rgb) -> Self {
        Self { width, height, pixels: vec![fill; width * height] }
    }

    pub fn get(&self, x: usize, y: usize) -> Rgb {
        self.pixels[y * self.width + x]
    }
}

impl ImageSampler for RgbImage {
    fn size(&self) -> ImageSize {
        ImageSize { width: self.width, height: self.height }
    }

    fn sample(&self, u: f64, v: f64) -> Option<Rgb> {
        let (x, y) = (u.round(), v.round());
        if x < 0.0 || y < 0.0 || x >= self.width as f64 || y >= self.height as f64 {
            return None;
        }
        Some(self.get(x as usize, y as usize))
    }
}

/// Colour per LiDAR point; `lidar_camera` is ᴸT_C. Points beyond the model's
/// field of view or projecting outside the image stay uncoloured.
pub fn colorize_cloud<S: ImageSampler + ?Sized>(
    points_l: &[Vector3<f64>],
    image: &S,
    lidar_camera: &Pose,
    intr: &FisheyeIntrinsics,
) -> Vec<Option<Rgb>> {
    let camera_from_lidar = lidar_camera.inverse();
    points_l
        .iter()
        .map(|p| {
            let pc = camera_from_lidar.transform_point(p);
            if pc.xy().norm().atan2(pc.z) > THETA_MAX {
                return None;
            }
            let px = intr.project(&pc).ok()?;
            image.sample(px.x, px.y)
        })
        .collect()
}

/// Checkerboard colour at board coordinates (cells of side `cell`).
pub fn checker_color(x: f64, y: f64, cell: f64, colors: [Rgb; 2]) -> Rgb {
    let parity = ((x / cell).floor() as i64 + (y / cell).floor() as i64).rem_euclid(2);
    colors[parity as usize]
}

/// Renders an infinite checkerboard plane (z = 0 of `camera_from_plane`) by
/// casting every pixel's ray; pixels missing the plane get `background`.
pub fn render_checker_plane(
    intr: &FisheyeIntrinsics,
    size: ImageSize,
    camera_from_plane: &Pose,
    cell: f64,
    colors: [Rgb; 2],
    background: Rgb,
) -> RgbImage {
    let mut img = RgbImage::new(size.width, size.height, background);
    let plane_from_camera = camera_from_plane.inverse();
    let origin = plane_from_camera.translation;
    for y in 0..size.height {
        for x in 0..size.width {
            let Ok(ray) = intr.unproject(&nalgebra::Vector2::new(x as f64, y as f64)) else { continue };
            let d = plane_from_camera.rotation * ray;
            if d.z.abs() < 1e-12 {
                continue;
            }
            let s = -origin.z / d.z;
            if s <= 0.0 {
                continue;
            }
            let hit = origin + d * s;
            img.pixels[y * size.width + x] = checker_color(hit.x, hit.y, cell, colors);
        }
    }
    img
}
