//! Evaluates an odometry run against ground truth and writes an SVG plot.
//!
//! cargo run --release --example trajectory_eval [-- PLOT.svg]

use umi3d::eval::{evaluate_trajectory, plot_svg, EvalConfig};
use umi3d::odometry::{run_log, PipelineConfig};
use umi3d::simulation::{simulate_sequence, SimConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let plot = std::env::args().nth(1).unwrap_or_else(|| "trajectory.svg".into());
    let log = simulate_sequence(&SimConfig::benchmark(), 2)?;
    let est = run_log(&log, &PipelineConfig::default())?.lidar_trajectory();
    let report = evaluate_trajectory(&est, &log.ground_truth, &EvalConfig::default())?;
    print!("{}", report.to_text());
    std::fs::write(&plot, plot_svg(&est, &log.ground_truth, &report))?;
    println!("plot written to {plot}");
    Ok(())
}
