//! LiDAR–camera association, camera-timeline alignment, episode segmentation,
//! relative pose representations and the chunked replay store.
//!
//! Store layout:
//!
//! ```text
//! <store>/index.json                 fields, chunks with sha256, episode ranges
//! <store>/<field>/chunk_NNNNNN.bin   rows of little-endian f64, `width` per frame
//! <store>/image/chunk_NNNNNN.bin     concatenated image payloads
//! <store>/image/chunk_NNNNNN.idx     per frame: u64 LE offset, u64 LE length
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufWriter, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::geometry::{pose_from_fields, pose_to_fields, FrameChain, Pose, StampedPose};
use crate::odometry::ChainConfig;
use crate::textio::read_numeric_csv;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("{stream} stamps are not strictly increasing at index {index}")]
    Unsorted { stream: &'static str, index: usize },
    #[error("empty {0} stream")]
    EmptyStream(&'static str),
    #[error("invalid {name}: {msg}")]
    InvalidParameter { name: &'static str, msg: String },
    #[error("horizon {horizon} from frame {t} crosses the end of a {len}-frame episode")]
    HorizonCrossesEnd { t: usize, horizon: usize, len: usize },
    #[error("window {window} from frame {t} crosses the episode start")]
    WindowCrossesStart { t: usize, window: usize },
    #[error("write failed for field `{field}` at frame {offset}: {msg}")]
    Write { field: String, offset: usize, msg: String },
    #[error("verification failed for field `{field}` at frame {offset}: {msg}")]
    Verify { field: String, offset: usize, msg: String },
    #[error("{path}: {msg}")]
    Io { path: String, msg: String },
}

fn io_err(path: &Path, e: impl ToString) -> DatasetError {
    DatasetError::Io { path: path.display().to_string(), msg: e.to_string() }
}

fn check_increasing(stream: &'static str, stamps: impl IntoIterator<Item = f64>) -> Result<(), DatasetError> {
    let mut prev = f64::NEG_INFINITY;
    for (index, t) in stamps.into_iter().enumerate() {
        if !t.is_finite() || t <= prev {
            return Err(DatasetError::Unsorted { stream, index });
        }
        prev = t;
    }
    Ok(())
}

/// Index and `|Δt|` of the stamp nearest to `t`; the earlier stamp wins ties.
pub fn nearest_stamp(stamps: &[f64], t: f64) -> Option<(usize, f64)> {
    let i = stamps.partition_point(|&s| s < t);
    let mut best = (i > 0).then(|| (i - 1, t - stamps[i - 1]));
    if i < stamps.len() {
        let d = stamps[i] - t;
        if best.is_none_or(|(_, b)| d < b) {
            best = Some((i, d));
        }
    }
    best
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AssociationConfig {
    /// Camera frames per LiDAR frame.
    pub ratio: usize,
    /// Largest `|Δt|` between a camera stamp and its expected slot (s).
    pub gate: f64,
    /// LiDAR frame period; the median stamp spacing when `None`.
    pub lidar_period: Option<f64>,
}

impl Default for AssociationConfig {
    fn default() -> Self {
        Self { ratio: 2, gate: 0.005, lidar_period: None }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Association {
    /// Kept LiDAR frames with their `ratio` camera frames in slot order.
    pub pairs: Vec<(usize, Vec<usize>)>,
    pub dropped_lidar: Vec<usize>,
}

impl Association {
    pub fn camera_indices(&self) -> Vec<usize> {
        let mut v: Vec<usize> = self.pairs.iter().flat_map(|(_, c)| c.iter().copied()).collect();
        v.sort_unstable();
        v
    }
}

fn median_spacing(stamps: &[f64]) -> Option<f64> {
    let mut d: Vec<f64> = stamps.windows(2).map(|w| w[1] - w[0]).collect();
    if d.is_empty() {
        return None;
    }
    d.sort_by(f64::total_cmp);
    Some(d[d.len() / 2])
}

/// Assigns `ratio` camera frames to every LiDAR frame. Slot `k` of a frame
/// stamped `t` expects a camera stamp at `t + k·period/ratio`; each slot takes
/// its nearest camera frame, which must lie within the gate and not already be
/// claimed. Frames with any unmatched slot are dropped.
pub fn associate_lidar_camera(lidar_ts: &[f64], camera_ts: &[f64], cfg: &AssociationConfig) -> Result<Association, DatasetError> {
    check_increasing("lidar", lidar_ts.iter().copied())?;
    check_increasing("camera", camera_ts.iter().copied())?;
    if cfg.ratio == 0 {
        return Err(DatasetError::InvalidParameter { name: "ratio", msg: "must be at least 1".into() });
    }
    if !(cfg.gate >= 0.0) {
        return Err(DatasetError::InvalidParameter { name: "gate", msg: format!("must be non-negative, got {}", cfg.gate) });
    }
    let period = match cfg.lidar_period.or_else(|| median_spacing(lidar_ts)) {
        Some(p) if p > 0.0 && p.is_finite() => p,
        Some(p) => return Err(DatasetError::InvalidParameter { name: "lidar_period", msg: format!("got {p}") }),
        None if lidar_ts.is_empty() => return Ok(Association::default()),
        None => {
            return Err(DatasetError::InvalidParameter {
                name: "lidar_period",
                msg: "a single LiDAR stamp needs an explicit period".into(),
            })
        }
    };
    let mut claimed = vec![false; camera_ts.len()];
    let mut out = Association::default();
    for (li, &tl) in lidar_ts.iter().enumerate() {
        let mut picks = Vec::with_capacity(cfg.ratio);
        for k in 0..cfg.ratio {
            let slot = tl + k as f64 * period / cfg.ratio as f64;
            match nearest_stamp(camera_ts, slot) {
                Some((ci, d)) if d <= cfg.gate && !claimed[ci] && !picks.contains(&ci) => picks.push(ci),
                _ => break,
            }
        }
        if picks.len() == cfg.ratio {
            for &c in &picks {
                claimed[c] = true;
            }
            out.pairs.push((li, picks));
        } else {
            out.dropped_lidar.push(li);
        }
    }
    Ok(out)
}

/// A camera frame with its nearest pose and gripper sample.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AlignedFrame {
    pub t: f64,
    /// Index of the camera frame, also the image handle.
    pub camera_index: usize,
    /// ᴳT_C.
    pub pose: Pose,
    pub gripper_width: f64,
    pub pose_dt: f64,
    pub gripper_dt: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Alignment {
    pub frames: Vec<AlignedFrame>,
    pub dropped: Vec<usize>,
}

/// Matches every camera stamp to its nearest pose and gripper sample and
/// keeps the frame only when both `|Δt|` are within `tol`.
pub fn align_frames(
    camera_ts: &[f64],
    poses: &[StampedPose],
    gripper: &[(f64, f64)],
    tol: f64,
) -> Result<Alignment, DatasetError> {
    if poses.is_empty() {
        return Err(DatasetError::EmptyStream("pose"));
    }
    if gripper.is_empty() {
        return Err(DatasetError::EmptyStream("gripper"));
    }
    check_increasing("camera", camera_ts.iter().copied())?;
    check_increasing("pose", poses.iter().map(|p| p.t))?;
    check_increasing("gripper", gripper.iter().map(|g| g.0))?;
    let pose_ts: Vec<f64> = poses.iter().map(|p| p.t).collect();
    let grip_ts: Vec<f64> = gripper.iter().map(|g| g.0).collect();
    let mut out = Alignment::default();
    for (ci, &t) in camera_ts.iter().enumerate() {
        let (pi, pose_dt) = nearest_stamp(&pose_ts, t).expect("non-empty");
        let (gi, gripper_dt) = nearest_stamp(&grip_ts, t).expect("non-empty");
        if pose_dt <= tol && gripper_dt <= tol {
            out.frames.push(AlignedFrame {
                t,
                camera_index: ci,
                pose: poses[pi].pose,
                gripper_width: gripper[gi].1,
                pose_dt,
                gripper_dt,
            });
        } else {
            out.dropped.push(ci);
        }
    }
    Ok(out)
}

/// Camera, pose and gripper streams feeding the alignment.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Streams {
    pub camera: Vec<f64>,
    pub poses: Vec<StampedPose>,
    pub gripper: Vec<(f64, f64)>,
}

/// Per-stream latencies (s), subtracted from the raw stamps.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LatencyOffsets {
    pub camera: f64,
    pub pose: f64,
    pub gripper: f64,
}

pub fn apply_latency_offsets(streams: &Streams, offsets: &LatencyOffsets) -> Streams {
    Streams {
        camera: streams.camera.iter().map(|t| t - offsets.camera).collect(),
        poses: streams.poses.iter().map(|p| StampedPose::new(p.t - offsets.pose, p.pose)).collect(),
        gripper: streams.gripper.iter().map(|&(t, w)| (t - offsets.gripper, w)).collect(),
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SegmentConfig {
    /// Stamp gaps larger than this start a new episode (s).
    pub gap: f64,
    pub min_len: usize,
}

impl Default for SegmentConfig {
    fn default() -> Self {
        Self { gap: 0.5, min_len: 20 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    pub frames: Vec<AlignedFrame>,
}

impl Episode {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn tcp_poses(&self, chain: &FrameChain) -> Vec<Pose> {
        self.frames.iter().map(|f| chain.tcp_from_camera(&f.pose)).collect()
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Segmentation {
    pub episodes: Vec<Episode>,
    pub dropped_episodes: usize,
    pub dropped_frames: usize,
}

pub fn segment_episodes(frames: &[AlignedFrame], cfg: &SegmentConfig) -> Segmentation {
    let mut out = Segmentation::default();
    let push = |run: &[AlignedFrame], out: &mut Segmentation| {
        if run.len() >= cfg.min_len.max(1) {
            out.episodes.push(Episode { frames: run.to_vec() });
        } else if !run.is_empty() {
            out.dropped_episodes += 1;
            out.dropped_frames += run.len();
        }
    };
    let mut start = 0;
    for i in 1..frames.len() {
        if frames[i].t - frames[i - 1].t > cfg.gap {
            push(&frames[start..i], &mut out);
            start = i;
        }
    }
    push(&frames[start..], &mut out);
    out
}

/// `T_t⁻¹ · T_{t+k}` for `k = 1..=horizon`.
pub fn relative_actions(poses: &[Pose], t: usize, horizon: usize) -> Result<Vec<Pose>, DatasetError> {
    if t >= poses.len() || t + horizon >= poses.len() {
        return Err(DatasetError::HorizonCrossesEnd { t, horizon, len: poses.len() });
    }
    let inv = poses[t].inverse();
    Ok((1..=horizon).map(|k| inv.compose(&poses[t + k])).collect())
}

/// `T_t⁻¹ · T_{t−k}` for `k = 1..=window`.
pub fn relative_proprioception(poses: &[Pose], t: usize, window: usize) -> Result<Vec<Pose>, DatasetError> {
    if t >= poses.len() || window > t {
        return Err(DatasetError::WindowCrossesStart { t, window });
    }
    let inv = poses[t].inverse();
    Ok((1..=window).map(|k| inv.compose(&poses[t - k])).collect())
}

/// One packaged frame. Relative actions and history near the episode ends
/// repeat the last and first poses respectively.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameRecord {
    pub t: f64,
    pub camera_pose: [f64; 7],
    pub tcp_position: [f64; 3],
    pub tcp_rotation: [f64; 4],
    pub gripper_width: f64,
    /// `horizon` relative poses, 7 values each.
    pub action: Vec<f64>,
    /// `window` relative past poses, 7 values each.
    pub proprio: Vec<f64>,
    pub image: Vec<u8>,
}

impl FrameRecord {
    fn numeric(&self) -> [&[f64]; 7] {
        [
            std::slice::from_ref(&self.t),
            &self.camera_pose,
            &self.tcp_position,
            &self.tcp_rotation,
            std::slice::from_ref(&self.gripper_width),
            &self.action,
            &self.proprio,
        ]
    }
}

const NUMERIC_FIELDS: [&str; 7] =
    ["timestamp", "camera_pose", "tcp_position", "tcp_rotation", "gripper_width", "action", "proprio"];
const IMAGE_FIELD: &str = "image";

/// Builds the records of one episode; `image` maps a camera index to its payload.
pub fn episode_records(
    episode: &Episode,
    chain: &FrameChain,
    horizon: usize,
    window: usize,
    image: &dyn Fn(usize) -> Result<Vec<u8>, DatasetError>,
) -> Result<Vec<FrameRecord>, DatasetError> {
    let tcp = episode.tcp_poses(chain);
    let n = tcp.len();
    episode
        .frames
        .iter()
        .enumerate()
        .map(|(t, f)| {
            let inv = tcp[t].inverse();
            let rel = |j: usize| pose_to_fields(&inv.compose(&tcp[j]));
            let tcp_fields = pose_to_fields(&tcp[t]);
            Ok(FrameRecord {
                t: f.t,
                camera_pose: pose_to_fields(&f.pose),
                tcp_position: [tcp_fields[0], tcp_fields[1], tcp_fields[2]],
                tcp_rotation: [tcp_fields[3], tcp_fields[4], tcp_fields[5], tcp_fields[6]],
                gripper_width: f.gripper_width,
                action: (1..=horizon).flat_map(|k| rel((t + k).min(n - 1))).collect(),
                proprio: (1..=window).flat_map(|k| rel(t.saturating_sub(k))).collect(),
                image: image(f.camera_index)?,
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChunkEntry {
    pub file: String,
    pub start: usize,
    pub frames: usize,
    pub bytes: u64,
    pub sha256: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub index_file: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub index_sha256: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FieldEntry {
    pub name: String,
    /// `f64le` or `bytes`.
    pub dtype: String,
    /// Values per frame; zero for variable-size payloads.
    pub width: usize,
    pub chunks: Vec<ChunkEntry>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpisodeRange {
    pub start: usize,
    pub end: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StoreIndex {
    pub format: String,
    pub version: u32,
    pub frames: usize,
    pub chunk_frames: usize,
    pub horizon: usize,
    pub window: usize,
    pub episodes: Vec<EpisodeRange>,
    pub fields: Vec<FieldEntry>,
}

const STORE_FORMAT: &str = "umi3d-replay";
pub const DEFAULT_CHUNK_FRAMES: usize = 1000;

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn chunk_name(c: usize) -> String {
    format!("chunk_{c:06}")
}

/// A finalized store opened for reading.
#[derive(Clone, Debug)]
pub struct ReplayStore {
    pub dir: PathBuf,
    pub index: StoreIndex,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct VerifyReport {
    pub frames: usize,
    pub episodes: usize,
    pub chunks: usize,
}

/// Writes the store, then re-reads every record and compares it bit for bit.
pub fn build_replay_store(episodes: &[Vec<FrameRecord>], out: &Path, chunk_frames: usize) -> Result<ReplayStore, DatasetError> {
    if episodes.is_empty() || episodes.iter().any(|e| e.is_empty()) {
        return Err(DatasetError::InvalidParameter { name: "episodes", msg: "need at least one non-empty episode".into() });
    }
    if chunk_frames == 0 {
        return Err(DatasetError::InvalidParameter { name: "chunk_frames", msg: "must be positive".into() });
    }
    let records: Vec<&FrameRecord> = episodes.iter().flatten().collect();
    let widths: Vec<usize> = records[0].numeric().iter().map(|v| v.len()).collect();
    for (i, r) in records.iter().enumerate() {
        for ((name, v), &w) in NUMERIC_FIELDS.iter().zip(r.numeric()).zip(&widths) {
            if v.len() != w {
                return Err(DatasetError::Write {
                    field: name.to_string(),
                    offset: i,
                    msg: format!("{} values where the first record has {w}", v.len()),
                });
            }
        }
    }
    if widths[5] % 7 != 0 || widths[6] % 7 != 0 {
        return Err(DatasetError::InvalidParameter { name: "records", msg: "action and proprio must hold whole poses".into() });
    }
    if out.exists() && fs::read_dir(out).map_err(|e| io_err(out, e))?.next().is_some() {
        return Err(io_err(out, "output directory is not empty"));
    }

    let mut fields = Vec::new();
    for (fi, name) in NUMERIC_FIELDS.iter().enumerate() {
        let werr = |offset: usize, e: &dyn ToString| DatasetError::Write { field: name.to_string(), offset, msg: e.to_string() };
        let dir = out.join(name);
        fs::create_dir_all(&dir).map_err(|e| werr(0, &e))?;
        let mut chunks = Vec::new();
        for (c, rows) in records.chunks(chunk_frames).enumerate() {
            let start = c * chunk_frames;
            let bytes: Vec<u8> = rows.iter().flat_map(|r| r.numeric()[fi].iter().flat_map(|v| v.to_le_bytes())).collect();
            let file = format!("{}.bin", chunk_name(c));
            write_file(&dir.join(&file), &bytes).map_err(|e| werr(start, &e))?;
            chunks.push(ChunkEntry {
                file,
                start,
                frames: rows.len(),
                bytes: bytes.len() as u64,
                sha256: sha256_hex(&bytes),
                index_file: None,
                index_sha256: None,
            });
        }
        fields.push(FieldEntry { name: name.to_string(), dtype: "f64le".into(), width: widths[fi], chunks });
    }

    let werr = |offset: usize, e: &dyn ToString| DatasetError::Write { field: IMAGE_FIELD.into(), offset, msg: e.to_string() };
    let dir = out.join(IMAGE_FIELD);
    fs::create_dir_all(&dir).map_err(|e| werr(0, &e))?;
    let mut chunks = Vec::new();
    for (c, rows) in records.chunks(chunk_frames).enumerate() {
        let start = c * chunk_frames;
        let mut blob = Vec::new();
        let mut idx = Vec::with_capacity(rows.len() * 16);
        for r in rows {
            idx.extend_from_slice(&(blob.len() as u64).to_le_bytes());
            idx.extend_from_slice(&(r.image.len() as u64).to_le_bytes());
            blob.extend_from_slice(&r.image);
        }
        let (file, index_file) = (format!("{}.bin", chunk_name(c)), format!("{}.idx", chunk_name(c)));
        write_file(&dir.join(&file), &blob).map_err(|e| werr(start, &e))?;
        write_file(&dir.join(&index_file), &idx).map_err(|e| werr(start, &e))?;
        chunks.push(ChunkEntry {
            file,
            start,
            frames: rows.len(),
            bytes: blob.len() as u64,
            sha256: sha256_hex(&blob),
            index_file: Some(index_file),
            index_sha256: Some(sha256_hex(&idx)),
        });
    }
    fields.push(FieldEntry { name: IMAGE_FIELD.into(), dtype: "bytes".into(), width: 0, chunks });

    let mut offset = 0;
    let ranges = episodes
        .iter()
        .map(|e| {
            let r = EpisodeRange { start: offset, end: offset + e.len() };
            offset = r.end;
            r
        })
        .collect();
    let index = StoreIndex {
        format: STORE_FORMAT.into(),
        version: 1,
        frames: records.len(),
        chunk_frames,
        horizon: widths[5] / 7,
        window: widths[6] / 7,
        episodes: ranges,
        fields,
    };
    let text = serde_json::to_string_pretty(&index).expect("index serializes");
    write_file(&out.join("index.json"), format!("{text}\n").as_bytes()).map_err(|e| DatasetError::Write {
        field: "index".into(),
        offset: 0,
        msg: e.to_string(),
    })?;

    let store = ReplayStore { dir: out.to_path_buf(), index };
    for (i, r) in records.iter().enumerate() {
        let back = store.read_frame(i)?;
        for (name, (a, b)) in NUMERIC_FIELDS.iter().zip(r.numeric().iter().zip(back.numeric())) {
            if a.iter().zip(b).any(|(x, y)| x.to_bits() != y.to_bits()) || a.len() != b.len() {
                return Err(DatasetError::Verify { field: name.to_string(), offset: i, msg: "re-read differs".into() });
            }
        }
        if back.image != r.image {
            return Err(DatasetError::Verify { field: IMAGE_FIELD.into(), offset: i, msg: "re-read differs".into() });
        }
    }
    Ok(store)
}

fn write_file(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    w.write_all(bytes)?;
    w.into_inner().map_err(|e| e.into_error())?.sync_all()
}

fn read_at(path: &Path, offset: u64, len: usize) -> std::io::Result<Vec<u8>> {
    let mut f = fs::File::open(path)?;
    f.seek(SeekFrom::Start(offset))?;
    let mut buf = vec![0u8; len];
    f.read_exact(&mut buf)?;
    Ok(buf)
}

impl ReplayStore {
    pub fn open(dir: &Path) -> Result<Self, DatasetError> {
        let path = dir.join("index.json");
        let text = fs::read_to_string(&path).map_err(|e| io_err(&path, e))?;
        let index: StoreIndex = serde_json::from_str(&text).map_err(|e| io_err(&path, e))?;
        if index.format != STORE_FORMAT {
            return Err(io_err(&path, format!("unknown format `{}`", index.format)));
        }
        let names: Vec<&str> = index.fields.iter().map(|f| f.name.as_str()).collect();
        let expected: Vec<&str> = NUMERIC_FIELDS.iter().copied().chain([IMAGE_FIELD]).collect();
        if names != expected || index.chunk_frames == 0 {
            return Err(io_err(&path, format!("unexpected field list {names:?}")));
        }
        Ok(Self { dir: dir.to_path_buf(), index })
    }

    pub fn len(&self) -> usize {
        self.index.frames
    }

    pub fn is_empty(&self) -> bool {
        self.index.frames == 0
    }

    /// Episode start offsets followed by the total frame count.
    pub fn episode_offsets(&self) -> Vec<usize> {
        let mut v: Vec<usize> = self.index.episodes.iter().map(|e| e.start).collect();
        v.push(self.index.frames);
        v
    }

    /// Files a read of frame `i` touches, one per field (two for images: blob and index).
    pub fn frame_files(&self, i: usize) -> Vec<PathBuf> {
        let c = i / self.index.chunk_frames;
        self.index
            .fields
            .iter()
            .flat_map(|f| {
                let ch = &f.chunks[c];
                let dir = self.dir.join(&f.name);
                std::iter::once(dir.join(&ch.file)).chain(ch.index_file.as_ref().map(|x| dir.join(x)))
            })
            .collect()
    }

    pub fn read_frame(&self, i: usize) -> Result<FrameRecord, DatasetError> {
        if i >= self.index.frames {
            return Err(DatasetError::InvalidParameter {
                name: "frame",
                msg: format!("{i} out of range 0..{}", self.index.frames),
            });
        }
        let (c, row) = (i / self.index.chunk_frames, i % self.index.chunk_frames);
        let mut numeric: Vec<Vec<f64>> = Vec::with_capacity(NUMERIC_FIELDS.len());
        for f in &self.index.fields[..NUMERIC_FIELDS.len()] {
            let path = self.dir.join(&f.name).join(&f.chunks[c].file);
            let bytes = read_at(&path, (row * f.width * 8) as u64, f.width * 8).map_err(|e| DatasetError::Verify {
                field: f.name.clone(),
                offset: i,
                msg: e.to_string(),
            })?;
            numeric.push(bytes.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().unwrap())).collect());
        }
        let img = &self.index.fields[NUMERIC_FIELDS.len()];
        let ch = &img.chunks[c];
        let dir = self.dir.join(IMAGE_FIELD);
        let verr = |e: std::io::Error| DatasetError::Verify { field: IMAGE_FIELD.into(), offset: i, msg: e.to_string() };
        let entry = read_at(&dir.join(ch.index_file.as_deref().unwrap_or_default()), (row * 16) as u64, 16).map_err(verr)?;
        let off = u64::from_le_bytes(entry[..8].try_into().unwrap());
        let len = u64::from_le_bytes(entry[8..].try_into().unwrap()) as usize;
        let image = read_at(&dir.join(&ch.file), off, len).map_err(verr)?;
        let arr = |v: &[f64]| -> Vec<f64> { v.to_vec() };
        let [t, cam, pos, rot, grip, action, proprio]: [Vec<f64>; 7] = numeric.try_into().expect("seven numeric fields");
        Ok(FrameRecord {
            t: t[0],
            camera_pose: arr(&cam).try_into().expect("width 7"),
            tcp_position: pos.try_into().expect("width 3"),
            tcp_rotation: rot.try_into().expect("width 4"),
            gripper_width: grip[0],
            action,
            proprio,
            image,
        })
    }

    pub fn read_episode(&self, e: usize) -> Result<Vec<FrameRecord>, DatasetError> {
        let r = self.index.episodes.get(e).ok_or(DatasetError::InvalidParameter {
            name: "episode",
            msg: format!("{e} out of range 0..{}", self.index.episodes.len()),
        })?;
        (r.start..r.end).map(|i| self.read_frame(i)).collect()
    }

    /// Checks chunk digests and sizes and that the episode ranges partition the frames.
    pub fn verify(&self) -> Result<VerifyReport, DatasetError> {
        let ix = &self.index;
        let mut cursor = 0;
        for (k, e) in ix.episodes.iter().enumerate() {
            if e.start != cursor || e.end <= e.start {
                return Err(DatasetError::Verify {
                    field: "episodes".into(),
                    offset: e.start,
                    msg: format!("episode {k} range {}..{} does not continue at {cursor}", e.start, e.end),
                });
            }
            cursor = e.end;
        }
        if cursor != ix.frames {
            return Err(DatasetError::Verify {
                field: "episodes".into(),
                offset: cursor,
                msg: format!("episodes cover {cursor} of {} frames", ix.frames),
            });
        }
        let mut chunks = 0;
        for f in &ix.fields {
            let verr = |offset: usize, msg: String| DatasetError::Verify { field: f.name.clone(), offset, msg };
            let mut covered = 0;
            for ch in &f.chunks {
                if ch.start != covered || ch.frames == 0 || ch.frames > ix.chunk_frames {
                    return Err(verr(ch.start, format!("chunk {} does not continue at frame {covered}", ch.file)));
                }
                let path = self.dir.join(&f.name).join(&ch.file);
                let bytes = fs::read(&path).map_err(|e| verr(ch.start, format!("{}: {e}", path.display())))?;
                if f.width > 0 && bytes.len() != ch.frames * f.width * 8 {
                    return Err(verr(
                        ch.start,
                        format!("{} has {} bytes, expected {}", ch.file, bytes.len(), ch.frames * f.width * 8),
                    ));
                }
                if bytes.len() as u64 != ch.bytes || sha256_hex(&bytes) != ch.sha256 {
                    return Err(verr(ch.start, format!("{} does not match its digest", ch.file)));
                }
                if let Some(idx_file) = &ch.index_file {
                    let path = self.dir.join(&f.name).join(idx_file);
                    let idx = fs::read(&path).map_err(|e| verr(ch.start, format!("{}: {e}", path.display())))?;
                    if Some(sha256_hex(&idx)) != ch.index_sha256 || idx.len() != ch.frames * 16 {
                        return Err(verr(ch.start, format!("{idx_file} does not match its digest")));
                    }
                    let mut expect = 0u64;
                    for (r, e) in idx.chunks_exact(16).enumerate() {
                        let off = u64::from_le_bytes(e[..8].try_into().unwrap());
                        let len = u64::from_le_bytes(e[8..].try_into().unwrap());
                        if off != expect {
                            return Err(verr(ch.start + r, format!("payload offset {off}, expected {expect}")));
                        }
                        expect += len;
                    }
                    if expect != ch.bytes {
                        return Err(verr(ch.start, format!("payloads cover {expect} of {} bytes", ch.bytes)));
                    }
                }
                covered += ch.frames;
                chunks += 1;
            }
            if covered != ix.frames {
                return Err(verr(covered, format!("chunks cover {covered} of {} frames", ix.frames)));
            }
        }
        Ok(VerifyReport { frames: ix.frames, episodes: ix.episodes.len(), chunks })
    }
}

/// Per-stage accounting of camera frames.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConservationReport {
    pub input: usize,
    pub kept: usize,
    /// Not attached to a LiDAR frame with a complete set of camera slots.
    pub ratio_dropped: usize,
    /// Attached, but the nearest pose or gripper sample was outside the tolerance.
    pub gate_dropped: usize,
    pub short_episode_dropped: usize,
}

impl ConservationReport {
    pub fn is_balanced(&self) -> bool {
        self.kept + self.ratio_dropped + self.gate_dropped + self.short_episode_dropped == self.input
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AlignConfig {
    pub association: AssociationConfig,
    pub tol: f64,
    pub latency: LatencyOffsets,
}

impl Default for AlignConfig {
    fn default() -> Self {
        Self { association: AssociationConfig::default(), tol: 0.010, latency: LatencyOffsets::default() }
    }
}

/// Associates camera frames to LiDAR frames, then aligns the associated ones.
/// Camera indices in the result refer to `streams.camera`.
pub fn align_streams(
    lidar_ts: &[f64],
    streams: &Streams,
    cfg: &AlignConfig,
) -> Result<(Alignment, ConservationReport), DatasetError> {
    let shifted = apply_latency_offsets(streams, &cfg.latency);
    let assoc = associate_lidar_camera(lidar_ts, &shifted.camera, &cfg.association)?;
    let picked = assoc.camera_indices();
    let stamps: Vec<f64> = picked.iter().map(|&i| shifted.camera[i]).collect();
    let mut aligned = align_frames(&stamps, &shifted.poses, &shifted.gripper, cfg.tol)?;
    for f in &mut aligned.frames {
        f.camera_index = picked[f.camera_index];
    }
    for d in &mut aligned.dropped {
        *d = picked[*d];
    }
    let report = ConservationReport {
        input: streams.camera.len(),
        kept: aligned.frames.len(),
        ratio_dropped: streams.camera.len() - picked.len(),
        gate_dropped: aligned.dropped.len(),
        short_episode_dropped: 0,
    };
    Ok((aligned, report))
}

const ALIGNED_HEADER: &str = "t,camera_index,x,y,z,qx,qy,qz,qw,gripper_width,pose_dt,gripper_dt";

/// Contents of an aligned-frames directory.
#[derive(Clone, Debug, PartialEq)]
pub struct AlignedData {
    pub frames: Vec<AlignedFrame>,
    pub images: BTreeMap<usize, Vec<u8>>,
    pub chain: FrameChain,
    pub report: ConservationReport,
}

/// Writes `aligned.csv`, `images/NNNNNN.bin` for the kept frames,
/// `chain.toml` and `report.json`.
pub fn write_aligned_dir(dir: &Path, data: &AlignedData) -> Result<(), DatasetError> {
    fs::create_dir_all(dir.join("images")).map_err(|e| io_err(dir, e))?;
    let mut s = format!("{ALIGNED_HEADER}\n");
    for f in &data.frames {
        let p = pose_to_fields(&f.pose).map(|v| v.to_string()).join(",");
        s.push_str(&format!("{},{},{p},{},{},{}\n", f.t, f.camera_index, f.gripper_width, f.pose_dt, f.gripper_dt));
    }
    let path = dir.join("aligned.csv");
    fs::write(&path, s).map_err(|e| io_err(&path, e))?;
    for (i, img) in &data.images {
        let path = dir.join("images").join(format!("{i:06}.bin"));
        fs::write(&path, img).map_err(|e| io_err(&path, e))?;
    }
    let path = dir.join("chain.toml");
    let chain = toml::to_string(&ChainConfig::from_chain(&data.chain)).expect("chain serializes");
    fs::write(&path, chain).map_err(|e| io_err(&path, e))?;
    let path = dir.join("report.json");
    let report = serde_json::to_string_pretty(&data.report).expect("report serializes");
    fs::write(&path, format!("{report}\n")).map_err(|e| io_err(&path, e))
}

pub fn read_aligned_dir(dir: &Path) -> Result<AlignedData, DatasetError> {
    let path = dir.join("aligned.csv");
    let rows = read_numeric_csv(&path, ALIGNED_HEADER)
        .map_err(|e| DatasetError::Io { path: e.path.clone(), msg: format!("line {}: {}", e.line, e.msg) })?;
    let mut frames = Vec::with_capacity(rows.len());
    let mut images = BTreeMap::new();
    for (line, r) in rows.iter().enumerate() {
        let pose = pose_from_fields(&r[2..9]).ok_or_else(|| io_err(&path, format!("row {}: bad pose", line + 1)))?;
        if r[1] < 0.0 || r[1].fract() != 0.0 {
            return Err(io_err(&path, format!("row {}: camera_index {} is not an index", line + 1, r[1])));
        }
        let camera_index = r[1] as usize;
        frames.push(AlignedFrame { t: r[0], camera_index, pose, gripper_width: r[9], pose_dt: r[10], gripper_dt: r[11] });
        let img = dir.join("images").join(format!("{camera_index:06}.bin"));
        images.insert(camera_index, fs::read(&img).map_err(|e| io_err(&img, e))?);
    }
    check_increasing("aligned", frames.iter().map(|f| f.t)).map_err(|e| io_err(&path, e))?;
    let path = dir.join("chain.toml");
    let text = fs::read_to_string(&path).map_err(|e| io_err(&path, e))?;
    let chain: ChainConfig = toml::from_str(&text).map_err(|e| io_err(&path, e))?;
    let chain = chain.to_chain().map_err(|e| io_err(&path, e))?;
    let path = dir.join("report.json");
    let text = fs::read_to_string(&path).map_err(|e| io_err(&path, e))?;
    let report = serde_json::from_str(&text).map_err(|e| io_err(&path, e))?;
    Ok(AlignedData { frames, images, chain, report })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PackageConfig {
    pub segment: SegmentConfig,
    pub horizon: usize,
    pub window: usize,
    pub chunk_frames: usize,
}

impl Default for PackageConfig {
    fn default() -> Self {
        Self { segment: SegmentConfig::default(), horizon: 16, window: 2, chunk_frames: DEFAULT_CHUNK_FRAMES }
    }
}

/// Segments aligned frames into episodes and writes the replay store plus
/// `<store>/report.json` with the completed frame accounting.
pub fn package_aligned(
    data: &AlignedData,
    out: &Path,
    cfg: &PackageConfig,
) -> Result<(ReplayStore, ConservationReport), DatasetError> {
    let seg = segment_episodes(&data.frames, &cfg.segment);
    if seg.episodes.is_empty() {
        return Err(DatasetError::InvalidParameter {
            name: "episodes",
            msg: format!("no episode reaches {} frames", cfg.segment.min_len),
        });
    }
    let image = |i: usize| {
        data.images
            .get(&i)
            .cloned()
            .ok_or_else(|| DatasetError::InvalidParameter { name: "image", msg: format!("missing payload for camera frame {i}") })
    };
    let records = seg
        .episodes
        .iter()
        .map(|e| episode_records(e, &data.chain, cfg.horizon, cfg.window, &image))
        .collect::<Result<Vec<_>, _>>()?;
    let store = build_replay_store(&records, out, cfg.chunk_frames)?;
    let report = ConservationReport {
        kept: data.report.kept - seg.dropped_frames,
        short_episode_dropped: seg.dropped_frames,
        ..data.report
    };
    let path = out.join("report.json");
    let text = serde_json::to_string_pretty(&report).expect("report serializes");
    fs::write(&path, format!("{text}\n")).map_err(|e| io_err(&path, e))?;
    Ok((store, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Rotation;
    use nalgebra::Vector3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn brute_nearest(stamps: &[f64], t: f64) -> Option<(usize, f64)> {
        let mut best: Option<(usize, f64)> = None;
        for (i, &s) in stamps.iter().enumerate() {
            let d = (s - t).abs();
            if best.is_none_or(|(_, b)| d < b) {
                best = Some((i, d));
            }
        }
        best
    }

    fn ideal(n_lidar: usize) -> (Vec<f64>, Vec<f64>) {
        ((0..n_lidar).map(|k| k as f64 / 10.0).collect(), (0..2 * n_lidar).map(|k| k as f64 / 20.0).collect())
    }

    #[test]
    fn nearest_breaks_ties_toward_the_earlier_stamp() {
        assert_eq!(nearest_stamp(&[0.0, 1.0], 0.5), Some((0, 0.5)));
        assert_eq!(nearest_stamp(&[0.0, 1.0], 0.6).unwrap().0, 1);
        assert_eq!(nearest_stamp(&[], 0.6), None);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..200 {
            let mut s: Vec<f64> = (0..20).map(|_| rng.random_range(0..40) as f64 * 0.25).collect();
            s.sort_by(f64::total_cmp);
            s.dedup();
            let t = rng.random_range(0..44) as f64 * 0.125 - 0.25;
            assert_eq!(nearest_stamp(&s, t), brute_nearest(&s, t));
        }
    }

    #[test]
    fn ideal_rates_pair_two_cameras_per_lidar_frame() {
        let (l, c) = ideal(50);
        let a = associate_lidar_camera(&l, &c, &AssociationConfig::default()).unwrap();
        assert!(a.dropped_lidar.is_empty());
        assert_eq!(a.pairs.len(), 50);
        for (li, cams) in &a.pairs {
            assert_eq!(cams, &vec![2 * li, 2 * li + 1]);
        }
    }

    #[test]
    fn missing_camera_frame_drops_one_lidar_frame() {
        let (l, mut c) = ideal(20);
        c.remove(13);
        let a = associate_lidar_camera(&l, &c, &AssociationConfig::default()).unwrap();
        assert_eq!(a.dropped_lidar, vec![6]);
        assert_eq!(a.pairs.len(), 19);
    }

    #[test]
    fn unsorted_input_is_rejected() {
        let err = associate_lidar_camera(&[0.0, 0.2, 0.1], &[0.0], &AssociationConfig::default()).unwrap_err();
        assert!(matches!(err, DatasetError::Unsorted { stream: "lidar", index: 2 }));
        let pose = [StampedPose::new(0.0, Pose::identity())];
        let err = align_frames(&[0.1, 0.1], &pose, &[(0.0, 0.0)], 0.01).unwrap_err();
        assert!(matches!(err, DatasetError::Unsorted { stream: "camera", index: 1 }));
        assert!(matches!(align_frames(&[0.0], &[], &[(0.0, 0.0)], 0.01), Err(DatasetError::EmptyStream("pose"))));
    }

    #[test]
    fn small_jitter_drops_nothing() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (l, c) = ideal(100);
        let c: Vec<f64> = c.iter().map(|t| t + rng.random_range(-0.001..0.001)).collect();
        let a = associate_lidar_camera(&l, &c, &AssociationConfig::default()).unwrap();
        assert!(a.dropped_lidar.is_empty());
    }

    fn pose_stream(stamps: &[f64]) -> Vec<StampedPose> {
        stamps.iter().map(|&t| StampedPose::new(t, Pose::from_translation(Vector3::new(t, 0.0, 0.0)))).collect()
    }

    #[test]
    fn identical_and_offset_stamps() {
        let cam: Vec<f64> = (0..40).map(|k| k as f64 / 20.0).collect();
        let grip: Vec<(f64, f64)> = cam.iter().map(|&t| (t, 0.05)).collect();
        let a = align_frames(&cam, &pose_stream(&cam), &grip, 0.010).unwrap();
        assert_eq!(a.frames.len(), 40);
        assert!(a.frames.iter().all(|f| f.pose_dt == 0.0 && f.gripper_dt == 0.0));

        let shifted: Vec<f64> = cam.iter().map(|t| t + 0.004).collect();
        let a = align_frames(&cam, &pose_stream(&shifted), &grip, 0.010).unwrap();
        assert_eq!(a.frames.len(), 40);
        assert!(a.frames.iter().all(|f| (f.pose_dt - 0.004).abs() < 1e-12));
    }

    #[test]
    fn alignment_is_idempotent() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let cam: Vec<f64> = (0..200).map(|k| k as f64 / 20.0 + rng.random_range(-0.002..0.002)).collect();
        let poses: Vec<f64> = (0..2000).map(|k| k as f64 / 200.0 + rng.random_range(-0.001..0.001)).collect();
        let grip: Vec<(f64, f64)> = (0..300).map(|k| (k as f64 / 30.0, k as f64)).collect();
        let first = align_frames(&cam, &pose_stream(&poses), &grip, 0.010).unwrap();
        let t: Vec<f64> = first.frames.iter().map(|f| f.t).collect();
        let p: Vec<StampedPose> = first.frames.iter().map(|f| StampedPose::new(f.t, f.pose)).collect();
        let g: Vec<(f64, f64)> = first.frames.iter().map(|f| (f.t, f.gripper_width)).collect();
        let second = align_frames(&t, &p, &g, 0.010).unwrap();
        assert!(second.dropped.is_empty());
        for (a, b) in first.frames.iter().zip(&second.frames) {
            assert_eq!((a.t, a.pose, a.gripper_width), (b.t, b.pose, b.gripper_width));
        }
    }

    #[test]
    fn segmentation_splits_at_gaps() {
        let mk = |ts: &[f64]| -> Vec<AlignedFrame> {
            ts.iter()
                .enumerate()
                .map(|(i, &t)| AlignedFrame {
                    t,
                    camera_index: i,
                    pose: Pose::identity(),
                    gripper_width: 0.0,
                    pose_dt: 0.0,
                    gripper_dt: 0.0,
                })
                .collect()
        };
        let cont: Vec<f64> = (0..100).map(|k| k as f64 / 20.0).collect();
        assert_eq!(segment_episodes(&mk(&cont), &SegmentConfig::default()).episodes.len(), 1);
        let gapped: Vec<f64> = (0..100).map(|k| k as f64 / 20.0 + if k >= 50 { 2.0 } else { 0.0 }).collect();
        let s = segment_episodes(&mk(&gapped), &SegmentConfig::default());
        assert_eq!(s.episodes.iter().map(Episode::len).collect::<Vec<_>>(), vec![50, 50]);
        let short: Vec<f64> = (0..60).map(|k| k as f64 / 20.0 + if k >= 50 { 2.0 } else { 0.0 }).collect();
        let s = segment_episodes(&mk(&short), &SegmentConfig::default());
        assert_eq!((s.episodes.len(), s.dropped_episodes, s.dropped_frames), (1, 1, 10));
        assert_eq!(segment_episodes(&[], &SegmentConfig::default()), Segmentation::default());
    }

    #[test]
    fn relative_representations_on_simple_motions() {
        let still = vec![Pose::new(Rotation::exp(&Vector3::new(0.3, 0.1, 0.2)), Vector3::new(1.0, 2.0, 3.0)); 10];
        for a in relative_actions(&still, 4, 3).unwrap().iter().chain(&relative_proprioception(&still, 4, 3).unwrap()) {
            assert!(a.translation.norm() < 1e-12 && a.rotation.angle() < 1e-12);
        }
        let rot = Rotation::exp(&Vector3::new(0.0, 0.0, 0.7));
        let moving: Vec<Pose> = (0..10).map(|k| Pose::new(rot, Vector3::new(0.1 * k as f64 / 20.0, 0.0, 0.0))).collect();
        let a = relative_actions(&moving, 2, 3).unwrap();
        for (k, p) in a.iter().enumerate() {
            let world = rot.rotate(&p.translation);
            assert!((world - Vector3::new(0.005 * (k + 1) as f64, 0.0, 0.0)).norm() < 1e-12);
            assert!((p.translation.norm() - 0.005 * (k + 1) as f64).abs() < 1e-12);
        }
        let h = relative_proprioception(&moving, 5, 2).unwrap();
        let expected = rot.inverse().rotate(&Vector3::new(-0.005, 0.0, 0.0));
        assert!((h[0].translation - expected).norm() < 1e-12);
        assert!(matches!(relative_actions(&moving, 7, 3), Err(DatasetError::HorizonCrossesEnd { .. })));
        assert!(relative_actions(&moving, 6, 3).is_ok());
        assert!(matches!(relative_proprioception(&moving, 1, 2), Err(DatasetError::WindowCrossesStart { .. })));
    }

    fn record(rng: &mut ChaCha8Rng, horizon: usize, window: usize) -> FrameRecord {
        let mut v = |n: usize| -> Vec<f64> {
            (0..n).map(|_| f64::from_bits(rng.random::<u64>() >> 2) * rng.random_range(-1.0..1.0)).collect()
        };
        FrameRecord {
            t: v(1)[0],
            camera_pose: v(7).try_into().unwrap(),
            tcp_position: v(3).try_into().unwrap(),
            tcp_rotation: v(4).try_into().unwrap(),
            gripper_width: v(1)[0],
            action: v(7 * horizon),
            proprio: v(7 * window),
            image: (0..rng.random_range(0..40)).map(|_| rng.random()).collect(),
        }
    }

    #[test]
    fn single_frame_store_round_trips() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let dir = tempfile::tempdir().unwrap();
        let eps = vec![vec![record(&mut rng, 2, 1)]];
        let store = build_replay_store(&eps, &dir.path().join("s"), 4).unwrap();
        assert_eq!(store.index.episodes, vec![EpisodeRange { start: 0, end: 1 }]);
        assert_eq!(store.read_frame(0).unwrap(), eps[0][0]);
        let reopened = ReplayStore::open(&dir.path().join("s")).unwrap();
        assert_eq!(reopened.verify().unwrap(), VerifyReport { frames: 1, episodes: 1, chunks: 8 });
    }

    #[test]
    fn episode_offsets_are_prefix_sums_and_access_touches_one_chunk() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let eps: Vec<Vec<FrameRecord>> = [5, 7, 9].iter().map(|&n| (0..n).map(|_| record(&mut rng, 3, 2)).collect()).collect();
        let dir = tempfile::tempdir().unwrap();
        let store = build_replay_store(&eps, dir.path(), 4).unwrap();
        assert_eq!(store.episode_offsets(), vec![0, 5, 12, 21]);
        assert_eq!(store.read_episode(1).unwrap(), eps[1]);
        for i in 0..21 {
            let files = store.frame_files(i);
            assert_eq!(files.len(), NUMERIC_FIELDS.len() + 2);
            assert!(files.iter().all(|f| f.file_name().unwrap().to_str().unwrap().starts_with(&chunk_name(i / 4))));
        }
    }

    #[test]
    fn write_failure_names_field_and_offset() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let eps = vec![(0..6).map(|_| record(&mut rng, 1, 1)).collect::<Vec<_>>()];
        let dir = tempfile::tempdir().unwrap();
        let blocker = dir.path().join("file");
        fs::write(&blocker, b"x").unwrap();
        match build_replay_store(&eps, &blocker.join("s"), 4).unwrap_err() {
            DatasetError::Write { field, offset, .. } => assert_eq!((field.as_str(), offset), ("timestamp", 0)),
            e => panic!("{e}"),
        }
        let out2 = dir.path().join("t");
        let mut bad = eps.clone();
        bad[0][5].action.push(1.0);
        match build_replay_store(&bad, &out2, 4).unwrap_err() {
            DatasetError::Write { field, offset, .. } => assert_eq!((field.as_str(), offset), ("action", 5)),
            e => panic!("{e}"),
        }
    }

    #[test]
    fn verify_detects_corruption() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let eps = vec![(0..10).map(|_| record(&mut rng, 1, 1)).collect::<Vec<_>>()];
        let dir = tempfile::tempdir().unwrap();
        let store = build_replay_store(&eps, dir.path(), 4).unwrap();
        let path = dir.path().join("gripper_width").join("chunk_000001.bin");
        let mut bytes = fs::read(&path).unwrap();
        bytes[3] ^= 1;
        fs::write(&path, bytes).unwrap();
        match store.verify().unwrap_err() {
            DatasetError::Verify { field, offset, .. } => assert_eq!((field.as_str(), offset), ("gripper_width", 4)),
            e => panic!("{e}"),
        }
    }

    #[test]
    fn latency_offsets_zero_is_identity() {
        let s = Streams { camera: vec![0.0, 0.05], poses: pose_stream(&[0.0, 0.1]), gripper: vec![(0.0, 1.0)] };
        assert_eq!(apply_latency_offsets(&s, &LatencyOffsets::default()), s);
    }
}
