//! Recovers equidistant fisheye intrinsics from synthetic checkerboard views.
//!
//! cargo run --release --example fisheye_calibration [-- VIEWS SEED]

use umi3d::calibration::{
    calibrate_intrinsics, diverse_board_poses, synthetic_views, Checkerboard, FisheyeIntrinsics, ImageSize,
};
use umi3d::lm::LmConfig;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let n: usize = args.first().map_or(Ok(12), |s| s.parse())?;
    let seed: u64 = args.get(1).map_or(Ok(0), |s| s.parse())?;
    let truth = FisheyeIntrinsics::new(330.0, 639.5, 511.5, [0.02, -0.006, 0.001, -0.0001])?;
    let size = ImageSize { width: 1280, height: 1024 };
    let views = synthetic_views(&truth, &Checkerboard::default(), &diverse_board_poses(n, seed), size, 0.2, seed);
    let corners: usize = views.iter().map(|v| v.pixels.len()).sum();
    let res = calibrate_intrinsics(&views, size, &LmConfig::default())?;
    let e = &res.intrinsics;
    println!("{} views, {corners} corners", views.len());
    println!("f   {:.3} (true {:.3}, {:+.4}%)", e.f, truth.f, 100.0 * (e.f - truth.f) / truth.f);
    println!("c   ({:.2}, {:.2})", e.cx, e.cy);
    println!("k   {:?}", e.k);
    println!("rms {:.4} px", res.rms);
    Ok(())
}
