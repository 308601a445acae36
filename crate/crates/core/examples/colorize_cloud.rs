//! Colours a LiDAR scan of a checkerboard wall from a rendered fisheye image
//! and reports how many points took the colour the wall actually has there.
//!
//! cargo run --release --example colorize_cloud

use nalgebra::Vector3;

use umi3d::calibration::{checker_color, colorize_cloud, render_checker_plane, FisheyeIntrinsics, ImageSize};
use umi3d::geometry::{Pose, Rotation};
use umi3d::simulation::default_chain;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let intr = FisheyeIntrinsics::new(330.0, 639.5, 511.5, [0.02, -0.006, 0.001, -0.0001])?;
    let size = ImageSize { width: 640, height: 512 };
    let intr = FisheyeIntrinsics::new(intr.f / 2.0, 319.5, 255.5, intr.k)?;
    let lidar_camera = default_chain().lidar_camera;
    let colors = [[230, 230, 230], [30, 30, 30]];
    let cell = 0.1;
    // Wall two metres in front of the camera, facing it.
    let camera_from_wall = Pose::new(Rotation::exp(&Vector3::new(std::f64::consts::PI, 0.0, 0.0)), Vector3::new(-1.0, -1.0, 2.0));
    let image = render_checker_plane(&intr, size, &camera_from_wall, cell, colors, [0, 0, 0]);
    let lidar_from_wall = lidar_camera.compose(&camera_from_wall);
    let mut points = Vec::new();
    let mut expected = Vec::new();
    // Nearest-pixel sampling is ambiguous within about a pixel footprint of a cell edge.
    let interior = |v: f64| (v / cell - (v / cell).round()).abs() * cell > 0.02;
    for i in 0..200 {
        for j in 0..200 {
            let (x, y) = (0.2 + i as f64 * 0.008 + 0.004, 0.2 + j as f64 * 0.008 + 0.004);
            points.push(lidar_from_wall.transform_point(&Vector3::new(x, y, 0.0)));
            expected.push((interior(x) && interior(y)).then(|| checker_color(x, y, cell, colors)));
        }
    }
    let colored = colorize_cloud(&points, &image, &lidar_camera, &intr);
    let hit = colored.iter().filter(|c| c.is_some()).count();
    let checked: Vec<_> = colored.iter().zip(&expected).filter_map(|(c, e)| Some((c.as_ref()?, e.as_ref()?))).collect();
    let correct = checked.iter().filter(|(c, e)| c == e).count();
    println!("{} points, {hit} coloured", points.len());
    println!("{correct} of {} away from cell edges match the wall pattern", checked.len());
    Ok(())
}
