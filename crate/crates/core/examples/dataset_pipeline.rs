//! Full data path: simulate, run odometry, align camera frames with poses and
//! gripper widths, package episodes into a replay store, then verify it.
//!
//! cargo run --release --example dataset_pipeline [-- OUT_DIR]

use std::collections::BTreeMap;

use umi3d::dataset::{align_streams, package_aligned, AlignConfig, AlignedData, PackageConfig, ReplayStore, Streams};
use umi3d::odometry::{run_log, PipelineConfig};
use umi3d::simulation::{simulate_sequence, SimConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let tmp = tempfile::tempdir()?;
    let out = std::env::args().nth(1).map_or_else(|| tmp.path().join("store"), Into::into);
    let sim = SimConfig::benchmark();
    let log = simulate_sequence(&sim, 1)?;
    let odo = run_log(&log, &PipelineConfig::default())?;
    let lidar_ts: Vec<f64> = log.scans.iter().map(|s| s.frame_time).collect();
    let streams = Streams {
        camera: log.camera_stamps.clone(),
        poses: odo.dense_camera_trajectory(&sim.chain),
        gripper: log.gripper.clone(),
    };
    let (alignment, report) = align_streams(&lidar_ts, &streams, &AlignConfig::default())?;
    let images: BTreeMap<usize, Vec<u8>> =
        alignment.frames.iter().map(|f| (f.camera_index, log.images[f.camera_index].clone())).collect();
    let data = AlignedData { frames: alignment.frames, images, chain: sim.chain, report };
    let (store, report) = package_aligned(&data, &out, &PackageConfig::default())?;
    println!("{report:?}");
    let reopened = ReplayStore::open(&out)?;
    let verified = reopened.verify()?;
    let first = reopened.read_frame(0)?;
    println!("{} frames, {} episodes, {} chunks at {}", verified.frames, verified.episodes, verified.chunks, store.dir.display());
    println!(
        "frame 0: t {:.3}, gripper {:.4}, {} action values, {} image bytes",
        first.t,
        first.gripper_width,
        first.action.len(),
        first.image.len()
    );
    Ok(())
}
