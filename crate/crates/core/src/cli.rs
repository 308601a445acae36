//! The `umi3d` command line.

use std::error::Error;
use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;

use crate::calibration::{
    calibrate_extrinsic, calibrate_intrinsics, diverse_board_poses, read_frames_dir, read_views_dir, synthetic_target_frames,
    synthetic_views, write_frames_dir, write_views_dir, CalibrationFile, CalibrationTarget, Checkerboard, ExtrinsicEntry,
    FisheyeIntrinsics, HoleExtractionConfig, ImageSize, IntrinsicsEntry, RefineConfig, TargetScanConfig,
};
use crate::dataset::{
    align_streams, package_aligned, read_aligned_dir, write_aligned_dir, AlignConfig, AlignedData, LatencyOffsets, PackageConfig,
    ReplayStore, Streams,
};
use crate::eval::{evaluate_files, plot_svg, EvalConfig};
use crate::geometry::read_trajectory_csv;
use crate::lm::LmConfig;
use crate::odometry::{run_sequence, ChainConfig, PipelineConfig};
use crate::simulation::{read_log, simulate_sequence, write_log, SimConfig};

type CliResult = Result<(), Box<dyn Error + Send + Sync>>;

#[derive(Parser, Debug)]
#[command(name = "umi3d", version, about = "LiDAR-inertial odometry, rig calibration and demonstration packaging")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Synthesize a sensor log and a matching pipeline configuration.
    Simulate(SimulateArgs),
    /// Run odometry over one or more logs.
    Slam(SlamArgs),
    /// Estimate camera intrinsics or LiDAR-camera extrinsics.
    #[command(subcommand)]
    Calib(CalibCommand),
    /// Associate camera frames with LiDAR frames and attach poses and gripper widths.
    Align(AlignArgs),
    /// Segment aligned frames into episodes and write a replay store.
    Package(PackageArgs),
    /// Check a replay store's digests and episode index.
    Verify(VerifyArgs),
    /// Compare an estimated trajectory with ground truth.
    Eval(EvalArgs),
    /// Draw estimated and ground-truth trajectories as SVG.
    Plot(PlotArgs),
}

#[derive(Args, Debug)]
struct SimulateArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Trajectory length in seconds.
    #[arg(long, default_value_t = 10.0)]
    duration: f64,
    /// Disable IMU and range noise.
    #[arg(long)]
    noiseless: bool,
    /// Also write checkerboard views and target captures under `<out>/calib`.
    #[arg(long)]
    calib: bool,
}

#[derive(Args, Debug)]
struct SlamArgs {
    #[arg(long = "log", required = true)]
    logs: Vec<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory; with several logs, one subdirectory per log.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 1)]
    jobs: usize,
}

#[derive(Subcommand, Debug)]
enum CalibCommand {
    /// Fisheye intrinsics from checkerboard corner views.
    Intrinsics {
        #[arg(long)]
        views: PathBuf,
        /// Calibration file to create or update.
        #[arg(long)]
        out: PathBuf,
    },
    /// LiDAR-camera extrinsic from four-hole target captures.
    Extrinsics {
        #[arg(long)]
        frames: PathBuf,
        #[arg(long)]
        target: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args, Debug)]
struct AlignArgs {
    #[arg(long)]
    log: PathBuf,
    /// Camera trajectory CSV, e.g. `camera_trajectory.csv` from `slam`.
    #[arg(long)]
    trajectory: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 10.0)]
    tol_ms: f64,
    /// Association gate around each expected camera slot.
    #[arg(long, default_value_t = 5.0)]
    gate_ms: f64,
    /// Pipeline configuration providing the frame chain and stream latencies.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct PackageArgs {
    #[arg(long = "aligned", required = true)]
    aligned: Vec<PathBuf>,
    /// Store directory; with several inputs, one store per input beneath it.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 16)]
    horizon: usize,
    #[arg(long, default_value_t = 2)]
    window: usize,
    #[arg(long, default_value_t = 0.5)]
    gap: f64,
    #[arg(long, default_value_t = 20)]
    min_len: usize,
    #[arg(long, default_value_t = 1)]
    jobs: usize,
}

#[derive(Args, Debug)]
struct VerifyArgs {
    #[arg(long)]
    store: PathBuf,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    estimate: PathBuf,
    #[arg(long)]
    ground_truth: PathBuf,
    /// Directory for `report.txt` and `errors.csv`.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 10.0)]
    tol_ms: f64,
    #[arg(long)]
    no_align: bool,
}

#[derive(Args, Debug)]
struct PlotArgs {
    #[arg(long)]
    estimate: PathBuf,
    #[arg(long)]
    ground_truth: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 10.0)]
    tol_ms: f64,
}

/// Parses `argv` (including the program name) and runs the subcommand.
/// Returns 0 on success, 1 on a domain error and 2 on a usage error.
pub fn main_cli<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn run(command: Command) -> CliResult {
    match command {
        Command::Simulate(a) => simulate(a),
        Command::Slam(a) => slam(a),
        Command::Calib(c) => calib(c),
        Command::Align(a) => align(a),
        Command::Package(a) => package(a),
        Command::Verify(a) => verify(a),
        Command::Eval(a) => eval(a),
        Command::Plot(a) => plot(a),
    }
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> CliResult {
    fs::write(path, contents).map_err(|e| format!("{}: {e}", path.display()).into())
}

fn load_config(path: Option<&Path>) -> Result<PipelineConfig, Box<dyn Error + Send + Sync>> {
    Ok(match path {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    })
}

fn jobs_pool(jobs: usize) -> Result<rayon::ThreadPool, Box<dyn Error + Send + Sync>> {
    Ok(rayon::ThreadPoolBuilder::new().num_threads(jobs.max(1)).build()?)
}

/// Output location for input `i` of `n`: `out` itself or `out/<input name>`.
fn per_input_dir(out: &Path, input: &Path, n: usize) -> PathBuf {
    if n == 1 {
        out.to_path_buf()
    } else {
        out.join(input.file_name().unwrap_or(input.as_os_str()))
    }
}

/// Camera model used for the synthetic calibration views.
pub fn simulated_camera() -> (FisheyeIntrinsics, ImageSize) {
    let intr = FisheyeIntrinsics::new(330.0, 639.5, 511.5, [0.02, -0.006, 0.001, -0.0001]).expect("valid intrinsics");
    (intr, ImageSize { width: 1280, height: 1024 })
}

fn simulate(a: SimulateArgs) -> CliResult {
    let mut cfg = if a.noiseless { SimConfig::benchmark_noiseless() } else { SimConfig::benchmark() };
    cfg.trajectory.duration = a.duration;
    let log = simulate_sequence(&cfg, a.seed)?;
    write_log(&a.out, &log)?;
    let pipeline = PipelineConfig { chain: ChainConfig::from_chain(&cfg.chain), ..PipelineConfig::default() };
    write(&a.out.join("pipeline.toml"), pipeline.to_toml_string())?;
    if a.calib {
        let dir = a.out.join("calib");
        let (intr, size) = simulated_camera();
        let poses = diverse_board_poses(12, a.seed);
        let views = synthetic_views(&intr, &Checkerboard::default(), &poses, size, 0.2, a.seed);
        write_views_dir(&dir.join("views"), &views, size)?;
        let target = CalibrationTarget::default();
        write(&dir.join("target.toml"), target.to_toml_string())?;
        let scan =
            TargetScanConfig { range_sigma: 0.002, pattern_seed: a.seed, noise_seed: a.seed, ..TargetScanConfig::default() };
        let frames = synthetic_target_frames(&target, &cfg.chain.lidar_camera, 5, &scan, (0.0, 0.0), a.seed);
        write_frames_dir(&dir.join("frames"), &frames)?;
    }
    println!(
        "wrote {} IMU samples, {} scans, {} camera frames to {}",
        log.imu.len(),
        log.scans.len(),
        log.camera_stamps.len(),
        a.out.display()
    );
    Ok(())
}

fn slam(a: SlamArgs) -> CliResult {
    let config = load_config(a.config.as_deref())?;
    let n = a.logs.len();
    let results: Vec<Result<String, String>> = jobs_pool(a.jobs)?.install(|| {
        a.logs
            .par_iter()
            .map(|log| {
                let out = per_input_dir(&a.out, log, n);
                run_sequence(log, &config, &out)
                    .map(|o| {
                        let degenerate = o.records.iter().filter(|r| r.degenerate).count();
                        format!(
                            "{}: {} scans ({} weakly constrained) -> {}",
                            log.display(),
                            o.records.len(),
                            degenerate,
                            out.display()
                        )
                    })
                    .map_err(|e| format!("{}: {e}", log.display()))
            })
            .collect()
    });
    report_all(results)
}

fn report_all(results: Vec<Result<String, String>>) -> CliResult {
    let mut failures = Vec::new();
    for r in results {
        match r {
            Ok(msg) => println!("{msg}"),
            Err(e) => failures.push(e),
        }
    }
    if failures.is_empty() {
        Ok(())
    } else {
        Err(failures.join("\n").into())
    }
}

fn load_or_new_calibration(path: &Path) -> Result<CalibrationFile, Box<dyn Error + Send + Sync>> {
    Ok(if path.exists() { CalibrationFile::load(path)? } else { CalibrationFile::default() })
}

fn calib(c: CalibCommand) -> CliResult {
    match c {
        CalibCommand::Intrinsics { views, out } => {
            let (views, size) = read_views_dir(&views)?;
            let res = calibrate_intrinsics(&views, size, &LmConfig::default())?;
            let mut file = load_or_new_calibration(&out)?;
            file.intrinsics =
                Some(IntrinsicsEntry { intrinsics: res.intrinsics, width: size.width, height: size.height, rms_px: res.rms });
            file.write(&out)?;
            let i = res.intrinsics;
            println!(
                "f {:.4}  c ({:.4}, {:.4})  k [{:.6}, {:.6}, {:.6}, {:.6}]  rms {:.4} px  ({} views, {} iterations)",
                i.f,
                i.cx,
                i.cy,
                i.k[0],
                i.k[1],
                i.k[2],
                i.k[3],
                res.rms,
                views.len(),
                res.iterations
            );
        }
        CalibCommand::Extrinsics { frames, target, out } => {
            let frames = read_frames_dir(&frames)?;
            let target = CalibrationTarget::load(&target)?;
            let res = calibrate_extrinsic(&frames, &target, &HoleExtractionConfig::default(), &RefineConfig::default())?;
            let t = res.refined.pose;
            let sq: f64 = res.correspondences.iter().map(|c| (t.transform_point(&c.p_l) - c.p_c).norm_squared()).sum();
            let rms = (sq / res.correspondences.len() as f64).sqrt();
            let mut file = load_or_new_calibration(&out)?;
            file.extrinsic = Some(ExtrinsicEntry::new(&res.lidar_camera(), frames.len(), rms, res.refined.weighted));
            file.write(&out)?;
            println!(
                "{} frames, rms {:.5} m, {} refinement (homoscedasticity p = {:.3})",
                frames.len(),
                rms,
                if res.refined.weighted { "weighted" } else { "unweighted" },
                res.refined.homoscedasticity_p
            );
        }
    }
    Ok(())
}

fn align(a: AlignArgs) -> CliResult {
    let config = load_config(a.config.as_deref())?;
    let log = read_log(&a.log)?;
    let file = fs::File::open(&a.trajectory).map_err(|e| format!("{}: {e}", a.trajectory.display()))?;
    let poses = read_trajectory_csv(std::io::BufReader::new(file)).map_err(|e| format!("{}: {e}", a.trajectory.display()))?;
    let lidar_ts: Vec<f64> = log.scans.iter().map(|s| s.frame_time - config.latency.lidar).collect();
    let streams = Streams { camera: log.camera_stamps.clone(), poses, gripper: log.gripper.clone() };
    let cfg = AlignConfig {
        association: crate::dataset::AssociationConfig {
            gate: a.gate_ms / 1000.0,
            lidar_period: Some(config.pipeline.scan_period),
            ..Default::default()
        },
        tol: a.tol_ms / 1000.0,
        latency: LatencyOffsets { camera: config.latency.camera, pose: 0.0, gripper: config.latency.aux },
    };
    let (aligned, report) = align_streams(&lidar_ts, &streams, &cfg)?;
    let mut images = std::collections::BTreeMap::new();
    for f in &aligned.frames {
        let img = log
            .images
            .get(f.camera_index)
            .ok_or_else(|| format!("{}: no image for camera frame {}", a.log.display(), f.camera_index))?;
        images.insert(f.camera_index, img.clone());
    }
    let data = AlignedData { frames: aligned.frames, images, chain: config.frame_chain(), report };
    write_aligned_dir(&a.out, &data)?;
    println!(
        "{} camera frames: {} aligned, {} without a complete LiDAR slot set, {} outside {} ms",
        report.input, report.kept, report.ratio_dropped, report.gate_dropped, a.tol_ms
    );
    Ok(())
}

fn package(a: PackageArgs) -> CliResult {
    let cfg = PackageConfig {
        segment: crate::dataset::SegmentConfig { gap: a.gap, min_len: a.min_len },
        horizon: a.horizon,
        window: a.window,
        ..PackageConfig::default()
    };
    let n = a.aligned.len();
    let results: Vec<Result<String, String>> = jobs_pool(a.jobs)?.install(|| {
        a.aligned
            .par_iter()
            .map(|dir| {
                let out = per_input_dir(&a.out, dir, n);
                let data = read_aligned_dir(dir).map_err(|e| e.to_string())?;
                let (store, report) = package_aligned(&data, &out, &cfg).map_err(|e| format!("{}: {e}", dir.display()))?;
                Ok(format!(
                    "{}: {} episodes, {} frames kept of {} ({} ratio, {} gate, {} short-episode dropped) -> {}",
                    dir.display(),
                    store.index.episodes.len(),
                    report.kept,
                    report.input,
                    report.ratio_dropped,
                    report.gate_dropped,
                    report.short_episode_dropped,
                    out.display()
                ))
            })
            .collect()
    });
    report_all(results)
}

fn verify(a: VerifyArgs) -> CliResult {
    let store = ReplayStore::open(&a.store)?;
    let r = store.verify()?;
    for i in 0..store.len() {
        store.read_frame(i)?;
    }
    println!("{}: {} frames, {} episodes, {} chunks verified", a.store.display(), r.frames, r.episodes, r.chunks);
    Ok(())
}

fn eval(a: EvalArgs) -> CliResult {
    let cfg = EvalConfig { associate_tol: a.tol_ms / 1000.0, align: !a.no_align, ..EvalConfig::default() };
    let (report, _, _) = evaluate_files(&a.estimate, &a.ground_truth, &cfg)?;
    fs::create_dir_all(&a.out).map_err(|e| format!("{}: {e}", a.out.display()))?;
    let text = report.to_text();
    write(&a.out.join("report.txt"), &text)?;
    write(&a.out.join("errors.csv"), report.errors_csv())?;
    let mut stdout = std::io::stdout().lock();
    stdout.write_all(text.as_bytes())?;
    Ok(())
}

fn plot(a: PlotArgs) -> CliResult {
    let cfg = EvalConfig { associate_tol: a.tol_ms / 1000.0, ..EvalConfig::default() };
    let (report, est, gt) = evaluate_files(&a.estimate, &a.ground_truth, &cfg)?;
    write(&a.out, plot_svg(&est, &gt, &report))?;
    println!("wrote {}", a.out.display());
    Ok(())
}
