//! LiDAR-camera extrinsic calibration against the four-hole target: hole
//! extraction per frame, closed-form alignment, then refinement.
//!
//! cargo run --release --example extrinsic_calibration [-- FRAMES SEED]

use umi3d::calibration::{
    calibrate_extrinsic, synthetic_target_frames, CalibrationTarget, HoleExtractionConfig, RefineConfig, TargetScanConfig,
};
use umi3d::simulation::default_chain;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let n: usize = args.first().map_or(Ok(5), |s| s.parse())?;
    let seed: u64 = args.get(1).map_or(Ok(0), |s| s.parse())?;
    let truth = default_chain().lidar_camera;
    let target = CalibrationTarget::default();
    let scan = TargetScanConfig { range_sigma: 0.002, noise_seed: seed, pattern_seed: seed, ..TargetScanConfig::default() };
    let frames = synthetic_target_frames(&target, &truth, n, &scan, (0.0, 0.0), seed);
    let res = calibrate_extrinsic(&frames, &target, &HoleExtractionConfig::default(), &RefineConfig::default())?;
    for (name, est) in [("svd", res.svd.inverse()), ("refined", res.lidar_camera())] {
        let (r, t) = est.delta(&truth);
        println!("{name:<8} {:.3} mm  {:.4} deg", t.norm() * 1e3, r.norm().to_degrees());
    }
    let r = &res.refined;
    println!("weighted {} (Bartlett p = {:.3}), cost {:.3e} -> {:.3e}", r.weighted, r.homoscedasticity_p, r.initial_cost, r.cost);
    Ok(())
}
