pub mod calibration;
pub mod cli;
pub mod dataset;
pub mod eval;
pub mod geometry;
pub mod lm;
pub mod measurement;
pub mod odometry;
pub mod propagation;
pub mod simulation;
mod textio;
pub mod voxel_map;
