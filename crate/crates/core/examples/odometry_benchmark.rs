//! Runs LiDAR-inertial odometry on the simulated corner-room benchmark and
//! reports trajectory error against ground truth.
//!
//! cargo run --release --example odometry_benchmark [-- --noisy SEED]

use std::time::Instant;

use umi3d::eval::{evaluate_trajectory, EvalConfig};
use umi3d::odometry::{run_log, PipelineConfig};
use umi3d::simulation::{simulate_sequence, SimConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let args: Vec<String> = std::env::args().collect();
    let (sim, seed) = match args.iter().position(|a| a == "--noisy") {
        Some(i) => (SimConfig::benchmark(), args.get(i + 1).map_or(Ok(0), |s| s.parse())?),
        None => (SimConfig::benchmark_noiseless(), 0),
    };
    let start = Instant::now();
    let log = simulate_sequence(&sim, seed)?;
    let out = run_log(&log, &PipelineConfig::default())?;
    let report = evaluate_trajectory(&out.lidar_trajectory(), &log.ground_truth, &EvalConfig::default())?;
    let max_rot = report.errors.iter().map(|e| e.rotation).fold(0.0, f64::max);
    print!("{}", report.to_text());
    println!("max rotation error (rad) {max_rot:.6}");
    println!("scans {} degenerate {}", out.records.len(), out.records.iter().filter(|r| r.degenerate).count());
    println!("elapsed {:.2} s", start.elapsed().as_secs_f64());
    Ok(())
}
