//! Simulates a handheld capture of the corner room and writes the sensor log.
//!
//! cargo run --example simulate_log -- OUT_DIR [SEED]

use umi3d::simulation::{read_log, simulate_sequence, write_log, SimConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let out = args.next().ok_or("usage: simulate_log OUT_DIR [SEED]")?;
    let seed: u64 = args.next().map_or(Ok(0), |s| s.parse())?;
    let log = simulate_sequence(&SimConfig::benchmark(), seed)?;
    write_log(out.as_ref(), &log)?;
    let back = read_log(out.as_ref())?;
    println!("imu samples   {}", back.imu.len());
    println!("lidar scans   {}", back.scans.len());
    println!("points/scan   {}", back.scans.first().map_or(0, |s| s.points.len()));
    println!("camera frames {}", back.camera_stamps.len());
    println!("gripper       {}", back.gripper.len());
    println!("ground truth  {}", back.ground_truth.len());
    Ok(())
}
