//! Fisheye intrinsics, LiDAR–camera extrinsics from a four-hole target, and
//! point-cloud colourisation.

mod colorize;
mod extrinsic;
mod fisheye;
mod target;

pub use colorize::{checker_color, colorize_cloud, render_checker_plane, ImageSampler, Rgb, RgbImage};
pub use extrinsic::{
    bartlett_p_value, calibrate_extrinsic, refine_extrinsic, solve_extrinsic_svd, solve_rigid, Correspondence, ExtrinsicResult,
    RefineConfig, Refinement,
};
pub use fisheye::{
    calibrate_intrinsics, diverse_board_poses, project_equidistant, synthetic_views, unproject_equidistant, CalibrationView,
    Checkerboard, FisheyeIntrinsics, ImageSize, IntrinsicsResult, MAX_NEWTON_ITERS, MIN_CORNERS_PER_VIEW, MIN_VIEWS, THETA_MAX,
};
pub use target::{
    extract_hole_centers_lidar, hole_centers_camera, simulate_target_scan, synthetic_target_frames, CalibrationTarget, Fiducial,
    HoleDetection, HoleExtractionConfig, TargetFrame, TargetScanConfig,
};

use std::fs;
use std::path::Path;

use nalgebra::{Vector2, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{pose_from_fields, pose_to_fields, Pose};
use crate::textio::read_numeric_csv;

#[derive(Debug, Error)]
pub enum CalibrationError {
    #[error("invalid intrinsics: {0}")]
    InvalidIntrinsics(String),
    #[error("cannot project the optical centre")]
    OpticalCenter,
    #[error("outside the model domain: {0}")]
    OutsideDomain(String),
    #[error("{got} views; intrinsic calibration needs at least {required}")]
    TooFewViews { got: usize, required: usize },
    #[error("view {view} has {got} corners; need at least {required}")]
    TooFewCorners { view: usize, got: usize, required: usize },
    #[error("rank-deficient view geometry: {0}")]
    RankDeficient(String),
    #[error("{found} of {expected} holes found")]
    HolesFound { found: usize, expected: usize },
    #[error("invalid target: {0}")]
    InvalidTarget(String),
    #[error("degenerate geometry: {0}")]
    DegenerateGeometry(String),
    #[error("refinement diverged: {0}")]
    Diverged(String),
    #[error("frame {frame}: {source}")]
    Frame { frame: usize, source: Box<CalibrationError> },
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("{path}: {msg}")]
    Io { path: String, msg: String },
}

impl CalibrationError {
    pub(crate) fn io(path: &Path, e: impl ToString) -> Self {
        Self::Io { path: path.display().to_string(), msg: e.to_string() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IntrinsicsEntry {
    #[serde(flatten)]
    pub intrinsics: FisheyeIntrinsics,
    pub width: usize,
    pub height: usize,
    pub rms_px: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExtrinsicEntry {
    /// ᴸT_C as x,y,z,qx,qy,qz,qw.
    pub lidar_camera: [f64; 7],
    /// Inverse of `lidar_camera`: maps LiDAR points into the camera frame.
    pub camera_from_lidar: [f64; 7],
    pub frames: usize,
    pub rms_m: f64,
    pub weighted: bool,
}

impl ExtrinsicEntry {
    pub fn new(lidar_camera: &Pose, frames: usize, rms_m: f64, weighted: bool) -> Self {
        Self {
            lidar_camera: pose_to_fields(lidar_camera),
            camera_from_lidar: pose_to_fields(&lidar_camera.inverse()),
            frames,
            rms_m,
            weighted,
        }
    }

    pub fn lidar_camera_pose(&self) -> Result<Pose, CalibrationError> {
        pose_from_fields(&self.lidar_camera).ok_or_else(|| CalibrationError::InvalidInput("bad lidar_camera pose".into()))
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CalibrationFile {
    pub intrinsics: Option<IntrinsicsEntry>,
    pub extrinsic: Option<ExtrinsicEntry>,
}

pub const CALIBRATION_HEADER: &str = "\
# Rig calibration. Poses are x,y,z,qx,qy,qz,qw as in the trajectory CSVs.
# lidar_camera is L_T_C: it maps camera coordinates into the LiDAR frame, p_L = L_T_C * p_C.
# camera_from_lidar is its inverse, the rigid alignment of hole centres p_C = T * p_L.
";

impl CalibrationFile {
    pub fn to_toml_string(&self) -> String {
        format!("{CALIBRATION_HEADER}{}", toml::to_string(self).expect("calibration serializes"))
    }

    pub fn write(&self, path: &Path) -> Result<(), CalibrationError> {
        fs::write(path, self.to_toml_string()).map_err(|e| CalibrationError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self, CalibrationError> {
        let s = fs::read_to_string(path).map_err(|e| CalibrationError::io(path, e))?;
        toml::from_str(&s).map_err(|e| CalibrationError::io(path, e))
    }
}

const VIEW_HEADER: &str = "bx,by,bz,u,v";
const POINT_HEADER: &str = "x,y,z";
const BOARD_POSE_HEADER: &str = "frame,x,y,z,qx,qy,qz,qw";

/// Writes `camera.toml` (image size) and one `view_NNN.csv` per view.
pub fn write_views_dir(dir: &Path, views: &[CalibrationView], size: ImageSize) -> Result<(), CalibrationError> {
    fs::create_dir_all(dir).map_err(|e| CalibrationError::io(dir, e))?;
    let cam = dir.join("camera.toml");
    fs::write(&cam, toml::to_string(&size).expect("size serializes")).map_err(|e| CalibrationError::io(&cam, e))?;
    for (i, v) in views.iter().enumerate() {
        let mut s = format!("{VIEW_HEADER}\n");
        for (b, p) in v.board_points.iter().zip(&v.pixels) {
            s.push_str(&format!("{},{},{},{},{}\n", b.x, b.y, b.z, p.x, p.y));
        }
        let path = dir.join(format!("view_{i:03}.csv"));
        fs::write(&path, s).map_err(|e| CalibrationError::io(&path, e))?;
    }
    Ok(())
}

fn sorted_files(dir: &Path, prefix: &str) -> Result<Vec<std::path::PathBuf>, CalibrationError> {
    let mut files: Vec<_> = fs::read_dir(dir)
        .map_err(|e| CalibrationError::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.file_name().and_then(|n| n.to_str()).is_some_and(|n| n.starts_with(prefix) && n.ends_with(".csv")))
        .collect();
    files.sort();
    Ok(files)
}

pub fn read_views_dir(dir: &Path) -> Result<(Vec<CalibrationView>, ImageSize), CalibrationError> {
    let cam = dir.join("camera.toml");
    let size: ImageSize = toml::from_str(&fs::read_to_string(&cam).map_err(|e| CalibrationError::io(&cam, e))?)
        .map_err(|e| CalibrationError::io(&cam, e))?;
    let views = sorted_files(dir, "view_")?
        .iter()
        .map(|path| {
            let rows = read_numeric_csv(path, VIEW_HEADER).map_err(|e| CalibrationError::io(path, e))?;
            Ok(CalibrationView {
                board_points: rows.iter().map(|r| Vector3::new(r[0], r[1], r[2])).collect(),
                pixels: rows.iter().map(|r| Vector2::new(r[3], r[4])).collect(),
            })
        })
        .collect::<Result<_, CalibrationError>>()?;
    Ok((views, size))
}

/// Writes `frame_NNN.csv` target clouds and `board_poses.csv` (camera ← board).
pub fn write_frames_dir(dir: &Path, frames: &[TargetFrame]) -> Result<(), CalibrationError> {
    fs::create_dir_all(dir).map_err(|e| CalibrationError::io(dir, e))?;
    let mut poses = format!("{BOARD_POSE_HEADER}\n");
    for (i, f) in frames.iter().enumerate() {
        let mut s = format!("{POINT_HEADER}\n");
        for p in &f.points {
            s.push_str(&format!("{},{},{}\n", p.x, p.y, p.z));
        }
        let path = dir.join(format!("frame_{i:03}.csv"));
        fs::write(&path, s).map_err(|e| CalibrationError::io(&path, e))?;
        let v = pose_to_fields(&f.camera_from_board);
        poses.push_str(&format!("{i},{}\n", v.map(|x| x.to_string()).join(",")));
    }
    let path = dir.join("board_poses.csv");
    fs::write(&path, poses).map_err(|e| CalibrationError::io(&path, e))
}

pub fn read_frames_dir(dir: &Path) -> Result<Vec<TargetFrame>, CalibrationError> {
    let pose_path = dir.join("board_poses.csv");
    let rows = read_numeric_csv(&pose_path, BOARD_POSE_HEADER).map_err(|e| CalibrationError::io(&pose_path, e))?;
    let files = sorted_files(dir, "frame_")?;
    if files.len() != rows.len() {
        return Err(CalibrationError::InvalidInput(format!("{} frame clouds but {} board poses", files.len(), rows.len())));
    }
    files
        .iter()
        .zip(&rows)
        .map(|(path, row)| {
            let pts = read_numeric_csv(path, POINT_HEADER).map_err(|e| CalibrationError::io(path, e))?;
            let camera_from_board = pose_from_fields(&row[1..])
                .ok_or_else(|| CalibrationError::io(&pose_path, format!("bad pose for frame {}", row[0])))?;
            Ok(TargetFrame { points: pts.iter().map(|r| Vector3::new(r[0], r[1], r[2])).collect(), camera_from_board })
        })
        .collect()
}
