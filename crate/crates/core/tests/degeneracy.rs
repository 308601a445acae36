use nalgebra::Vector3;

use umi3d::odometry::{run_log, PipelineConfig};
use umi3d::simulation::{simulate_sequence, SceneModel, SimConfig};

#[test]
fn single_plane_scene_is_flagged_not_fatal() {
    let mut cfg = SimConfig::benchmark_noiseless();
    cfg.scene = SceneModel::single_plane(Vector3::z(), Vector3::new(0.0, 0.0, -0.5), 20.0);
    let log = simulate_sequence(&cfg, 0).unwrap();
    let out = run_log(&log, &PipelineConfig::default()).unwrap();
    assert!(!out.records.is_empty());
    let flagged = out.records.iter().filter(|r| r.degenerate).count();
    assert!(flagged * 2 > out.records.len(), "{flagged} of {} scans flagged", out.records.len());
    assert!(out.records.iter().all(|r| r.lidar_pose.translation.iter().all(|v| v.is_finite())));
}

#[test]
fn corner_room_is_well_constrained() {
    let log = simulate_sequence(&SimConfig::benchmark_noiseless(), 0).unwrap();
    let out = run_log(&log, &PipelineConfig::default()).unwrap();
    let flagged = out.records.iter().filter(|r| r.degenerate).count();
    assert!(flagged * 10 < out.records.len(), "{flagged} of {} scans flagged", out.records.len());
}
