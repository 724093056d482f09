//! Autoregressive generation sessions.
//!
//! A session plans a conditioning sequence for a user path, cuts it into
//! chunks that share one boundary step, and generates one video segment per
//! chunk. Each chunk is conditioned on the last frame generated for the
//! previous one, the camera poses of its steps relative to the first step,
//! and perspective crops of the retrieved panoramas.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::geodesy::{pose_distance, to_relative_poses, Se3Pose};
use crate::image_buffer::ImageBuffer;
use crate::pano_index::{PanoIndex, PanoRecord};
use crate::pano_projection::{crop_camera_pose, crop_perspective, rig_relative_yaw, AugmentationParams};
use crate::retrieval_planner::{chunk_plan, plan_condition_path, PlanChunk, PlanStep, PlannerParams, RetrievalPlan, SegmentCatalog, UserPath};

/// Frames per generated segment.
pub const TARGET_FRAMES: usize = 73;
pub const MANIFEST_VERSION: u32 = 1;

/// Cooperative cancellation shared between a caller and a backend call.
#[derive(Debug, Clone, Default)]
pub struct CancelFlag(Arc<AtomicBool>);

impl CancelFlag {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn cancel(&self) {
        self.0.store(true, Ordering::SeqCst);
    }

    pub fn is_cancelled(&self) -> bool {
        self.0.load(Ordering::SeqCst)
    }

    pub fn check(&self) -> Result<()> {
        if self.is_cancelled() {
            Err(Error::Cancelled)
        } else {
            Ok(())
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PackageMetadata {
    pub session_id: String,
    pub chunk_index: usize,
    /// Offset of the chunk's first step within the plan.
    pub chunk_start: usize,
    /// Plan steps in the chunk; poses beyond this hold the last one.
    pub step_count: usize,
    pub seed: u64,
    /// Always false at inference.
    pub drop_pose: bool,
    pub drop_geo: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConditionPackage {
    pub first_image: ImageBuffer,
    pub relative_poses: Vec<Se3Pose>,
    pub geo_frames: Vec<ImageBuffer>,
    pub metadata: PackageMetadata,
}

impl ConditionPackage {
    pub fn validate(&self, params: &AugmentationParams) -> Result<()> {
        if self.relative_poses.first() != Some(&Se3Pose::identity()) {
            return Err(Error::InvalidPose("first relative pose must be the identity".into()));
        }
        if !params.cond_lengths.contains(&self.geo_frames.len()) {
            return Err(Error::InvalidParams(format!("{} geo frames is not an allowed length", self.geo_frames.len())));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendCapabilities {
    pub max_frames: usize,
    pub width: u32,
    pub height: u32,
}

/// A video generator. Implementations must return exactly one frame per
/// relative pose and should poll `cancel` while working.
pub trait GeneratorBackend: Send + Sync {
    fn id(&self) -> String;
    fn capabilities(&self) -> BackendCapabilities;
    fn generate(&self, package: &ConditionPackage, cancel: &CancelFlag) -> Result<Vec<ImageBuffer>>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MockBehavior {
    /// Geo frames resampled to the pose count by nearest index.
    Echo,
    /// Frames whose leading pixels encode the relative pose and frame index.
    PoseStamp,
}

#[derive(Debug, Clone)]
pub struct MockGenerator {
    pub behavior: MockBehavior,
}

impl MockGenerator {
    pub fn echo() -> Self {
        Self { behavior: MockBehavior::Echo }
    }

    pub fn pose_stamp() -> Self {
        Self { behavior: MockBehavior::PoseStamp }
    }
}

/// `round(k (m - 1) / (n - 1))` for output index `k` of `n`, input length `m`.
pub fn nearest_index(k: usize, n: usize, m: usize) -> usize {
    if n <= 1 {
        return 0;
    }
    let num = 2 * k * (m - 1) + (n - 1);
    num / (2 * (n - 1))
}

pub fn resample_frames<T: Clone>(frames: &[T], n: usize) -> Vec<T> {
    (0..n).map(|k| frames[nearest_index(k, n, frames.len())].clone()).collect()
}

impl GeneratorBackend for MockGenerator {
    fn id(&self) -> String {
        match self.behavior {
            MockBehavior::Echo => "mock-echo".into(),
            MockBehavior::PoseStamp => "mock-pose-stamp".into(),
        }
    }

    fn capabilities(&self) -> BackendCapabilities {
        BackendCapabilities { max_frames: TARGET_FRAMES, width: 4096, height: 4096 }
    }

    fn generate(&self, package: &ConditionPackage, cancel: &CancelFlag) -> Result<Vec<ImageBuffer>> {
        let n = package.relative_poses.len();
        match self.behavior {
            MockBehavior::Echo => {
                if package.geo_frames.is_empty() {
                    return Err(Error::BackendFailure("echo needs at least one geo frame".into()));
                }
                cancel.check()?;
                Ok(resample_frames(&package.geo_frames, n))
            }
            MockBehavior::PoseStamp => {
                let (w, h) = package.first_image.dims();
                package
                    .relative_poses
                    .iter()
                    .enumerate()
                    .map(|(k, pose)| {
                        cancel.check()?;
                        encode_pose_stamp(w, h, k, pose)
                    })
                    .collect()
            }
        }
    }
}

const STAMP_VALUES: usize = 13;
const STAMP_CHUNKS: usize = 4;
const STAMP_SCALE: f64 = 1e8;
const STAMP_BIAS: i64 = 1 << 50;

/// Frame whose first 52 channel values hold, in order, the 12 row-major
/// pose entries and the frame index as biased fixed-point numbers (scale
/// 1e8), each split into four 16-bit pieces stored as `piece / 65535`.
pub fn encode_pose_stamp(width: u32, height: u32, index: usize, pose: &Se3Pose) -> Result<ImageBuffer> {
    let cells = width as usize * height as usize * 3;
    if cells < STAMP_VALUES * STAMP_CHUNKS {
        return Err(Error::IncompatibleDims(format!("{width}x{height} frame cannot hold a pose stamp")));
    }
    let mut values = pose.to_row_major_3x4().to_vec();
    values.push(index as f64);
    let mut data = vec![0.0f32; cells];
    for (i, v) in values.iter().enumerate() {
        let q = (v * STAMP_SCALE).round() as i64;
        if q.abs() >= STAMP_BIAS {
            return Err(Error::BackendFailure(format!("value {v} too large to stamp")));
        }
        let u = (q + STAMP_BIAS) as u64;
        for c in 0..STAMP_CHUNKS {
            let piece = (u >> (16 * (STAMP_CHUNKS - 1 - c))) & 0xffff;
            data[i * STAMP_CHUNKS + c] = piece as f32 / 65535.0;
        }
    }
    ImageBuffer::new(width, height, data)
}

/// Inverse of [`encode_pose_stamp`]: the frame index and row-major pose.
pub fn decode_pose_stamp(frame: &ImageBuffer) -> Result<(usize, [f64; 12])> {
    let data = frame.data();
    if data.len() < STAMP_VALUES * STAMP_CHUNKS {
        return Err(Error::IncompatibleDims("frame too small for a pose stamp".into()));
    }
    let mut values = [0.0f64; STAMP_VALUES];
    for (i, v) in values.iter_mut().enumerate() {
        let mut u: u64 = 0;
        for c in 0..STAMP_CHUNKS {
            let piece = (data[i * STAMP_CHUNKS + c] as f64 * 65535.0).round() as u64;
            u = (u << 16) | piece;
        }
        *v = (u as i64 - STAMP_BIAS) as f64 / STAMP_SCALE;
    }
    let mut pose = [0.0; 12];
    pose.copy_from_slice(&values[..12]);
    Ok((values[12].round() as usize, pose))
}

/// Where panorama rasters come from.
pub trait PanoSource: Send + Sync {
    fn load(&self, record: &PanoRecord) -> Result<ImageBuffer>;
}

/// Procedural panoramas whose colors depend on world direction, so crops
/// from neighboring captures looking the same way resemble each other.
#[derive(Debug, Clone)]
pub struct SyntheticPanoSource {
    pub width: u32,
}

impl Default for SyntheticPanoSource {
    fn default() -> Self {
        Self { width: 512 }
    }
}

impl PanoSource for SyntheticPanoSource {
    fn load(&self, record: &PanoRecord) -> Result<ImageBuffer> {
        let (w, h) = (self.width, self.width / 2);
        let rig = record.rig_heading_deg();
        let p = record.position();
        // Slow spatial variation so frames along a street differ.
        let tint = 0.08 * ((p.x * 0.05).sin() + (p.y * 0.07).cos()) as f32;
        Ok(ImageBuffer::from_fn(w, h, |i, j| {
            let az = (i as f64 + 0.5) / w as f64 * 360.0;
            let el = 90.0 - (j as f64 + 0.5) / h as f64 * 180.0;
            let hd = (rig + az).to_radians();
            let e = el.to_radians();
            if el > 0.0 {
                [
                    (0.45 + 0.3 * (3.0 * hd).sin()) as f32,
                    (0.55 + 0.25 * (2.0 * hd + e).cos()) as f32,
                    (0.65 + 0.3 * e.sin()) as f32,
                ]
            } else {
                let stripes = (8.0 * hd).sin() * (6.0 * e).cos();
                [
                    (0.35 + 0.2 * stripes) as f32 + tint,
                    (0.3 + 0.1 * (5.0 * hd).cos()) as f32,
                    (0.25 + 0.15 * (4.0 * e).cos()) as f32 - tint,
                ]
            }
        }))
    }
}

/// Files for plain or `file://` URIs (relative ones resolved against
/// `root`); procedural panoramas for `synthetic://` URIs.
#[derive(Debug, Clone, Default)]
pub struct DefaultPanoSource {
    pub root: Option<PathBuf>,
    pub synthetic: SyntheticPanoSource,
}

impl DefaultPanoSource {
    pub fn new(root: Option<PathBuf>) -> Self {
        Self { root, synthetic: SyntheticPanoSource::default() }
    }

    pub fn resolve(&self, uri: &str) -> PathBuf {
        let p = Path::new(uri.strip_prefix("file://").unwrap_or(uri));
        match &self.root {
            Some(root) if p.is_relative() => root.join(p),
            _ => p.to_path_buf(),
        }
    }
}

impl PanoSource for DefaultPanoSource {
    fn load(&self, record: &PanoRecord) -> Result<ImageBuffer> {
        if record.image_uri.starts_with("synthetic://") {
            self.synthetic.load(record)
        } else {
            ImageBuffer::load(&self.resolve(&record.image_uri))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionParams {
    pub planner: PlannerParams,
    /// Crop geometry; `out_w`/`out_h` set the resolution of every frame.
    pub augmentation: AugmentationParams,
    pub chunk_len: usize,
    pub seed: u64,
    pub pitch_deg: f64,
}

impl Default for SessionParams {
    fn default() -> Self {
        Self {
            planner: PlannerParams::default(),
            augmentation: AugmentationParams::default().with_output(208, 120),
            chunk_len: TARGET_FRAMES,
            seed: 0,
            pitch_deg: 0.0,
        }
    }
}

impl SessionParams {
    pub fn validate(&self) -> Result<()> {
        self.planner.validate()?;
        self.augmentation.validate()?;
        let max_len = self.augmentation.cond_lengths.iter().copied().max().unwrap_or(0);
        if self.chunk_len < 2 || self.chunk_len > max_len {
            return Err(Error::InvalidParams(format!("chunk length {} must be in [2, {max_len}]", self.chunk_len)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SessionStatus {
    Active,
    Complete,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentRecord {
    pub index: usize,
    pub chunk_start: usize,
    pub step_count: usize,
    pub geo_frame_count: usize,
    pub frame_count: usize,
    pub backend_id: String,
    pub seed: u64,
    pub first_pano: String,
    pub last_pano: String,
    /// Camera-to-ECEF poses, one per frame, row-major 3x4.
    pub absolute_poses: Vec<[f64; 12]>,
}

/// Everything about a session except the current first image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionManifest {
    pub version: u32,
    pub session_id: String,
    pub status: SessionStatus,
    pub params: SessionParams,
    pub plan: RetrievalPlan,
    pub chunks: Vec<PlanChunk>,
    /// Index of the next chunk to generate.
    pub next_chunk: usize,
    pub start_pose: Se3Pose,
    pub current_pose: Se3Pose,
    pub segments: Vec<SegmentRecord>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SessionState {
    pub manifest: SessionManifest,
    pub current_first_image: ImageBuffer,
}

impl SessionState {
    pub fn id(&self) -> &str {
        &self.manifest.session_id
    }

    pub fn status(&self) -> SessionStatus {
        self.manifest.status
    }

    pub fn remaining_chunks(&self) -> &[PlanChunk] {
        &self.manifest.chunks[self.manifest.next_chunk..]
    }
}

/// Read-only inputs a step needs besides the state.
pub struct SessionContext<'a> {
    pub index: &'a PanoIndex,
    pub source: &'a dyn PanoSource,
}

fn record_for<'a>(index: &'a PanoIndex, step: &PlanStep) -> Result<&'a PanoRecord> {
    index.get(&step.pano_id).ok_or_else(|| Error::InvalidParams(format!("plan references unknown panorama {}", step.pano_id)))
}

/// Camera pose of a plan step: level, at the capture, looking along the path.
pub fn step_pose(index: &PanoIndex, step: &PlanStep) -> Result<Se3Pose> {
    Ok(crop_camera_pose(record_for(index, step)?, step.path_heading_deg))
}

/// The conditioning crop for a plan step.
pub fn render_step_view(ctx: &SessionContext<'_>, step: &PlanStep, params: &SessionParams) -> Result<ImageBuffer> {
    let record = record_for(ctx.index, step)?;
    let pano = ctx.source.load(record)?;
    crop_perspective(&pano, rig_relative_yaw(record, step.path_heading_deg), params.pitch_deg, &params.augmentation)
}

/// Plans `path` and queues its chunks. `first_image` must have the crop
/// resolution from `params`.
pub fn start_session(
    session_id: &str,
    first_image: ImageBuffer,
    path: &UserPath,
    index: &PanoIndex,
    catalog: &SegmentCatalog,
    params: &SessionParams,
) -> Result<SessionState> {
    params.validate()?;
    let want = (params.augmentation.out_w, params.augmentation.out_h);
    if first_image.dims() != want {
        return Err(Error::IncompatibleDims(format!(
            "first image is {}x{}, sessions render {}x{}",
            first_image.width(),
            first_image.height(),
            want.0,
            want.1
        )));
    }
    let plan = plan_condition_path(path, index, catalog, &params.planner)?;
    let chunks = chunk_plan(&plan, params.chunk_len)?;
    let start_pose = step_pose(index, &plan.steps[0])?;
    Ok(SessionState {
        manifest: SessionManifest {
            version: MANIFEST_VERSION,
            session_id: session_id.into(),
            status: SessionStatus::Active,
            params: params.clone(),
            plan,
            chunks,
            next_chunk: 0,
            start_pose,
            current_pose: start_pose,
            segments: Vec::new(),
        },
        current_first_image: first_image,
    })
}

/// Absolute camera poses for a chunk, padded to `chunk_len` by holding the
/// last step.
pub fn chunk_poses(index: &PanoIndex, chunk: &PlanChunk, chunk_len: usize) -> Result<Vec<Se3Pose>> {
    let mut poses = chunk.steps.iter().map(|s| step_pose(index, s)).collect::<Result<Vec<_>>>()?;
    let last = *poses.last().ok_or_else(|| Error::InvalidParams("empty chunk".into()))?;
    poses.resize(chunk_len, last);
    Ok(poses)
}

/// Builds the condition package for the next queued chunk.
pub fn assemble_package(state: &SessionState, ctx: &SessionContext<'_>) -> Result<ConditionPackage> {
    let m = &state.manifest;
    if m.status != SessionStatus::Active {
        return Err(Error::SessionNotActive);
    }
    let chunk = m.chunks.get(m.next_chunk).ok_or(Error::SessionNotActive)?;
    let params = &m.params;
    let absolute = chunk_poses(ctx.index, chunk, params.chunk_len)?;
    let relative_poses = to_relative_poses(&absolute)?;

    let mut cache: HashMap<&str, ImageBuffer> = HashMap::new();
    let mut crops = Vec::with_capacity(chunk.steps.len());
    for step in &chunk.steps {
        let record = record_for(ctx.index, step)?;
        if !cache.contains_key(record.id.as_str()) {
            cache.insert(record.id.as_str(), ctx.source.load(record)?);
        }
        let yaw = rig_relative_yaw(record, step.path_heading_deg);
        crops.push(crop_perspective(&cache[record.id.as_str()], yaw, params.pitch_deg, &params.augmentation)?);
    }
    // Short chunks are stretched to the smallest allowed condition length.
    let geo_len = params
        .augmentation
        .cond_lengths
        .iter()
        .copied()
        .filter(|&l| l >= crops.len())
        .min()
        .ok_or_else(|| Error::InvalidParams(format!("{} steps exceed every condition length", crops.len())))?;
    let geo_frames = if crops.len() == geo_len { crops } else { resample_frames(&crops, geo_len) };

    let package = ConditionPackage {
        first_image: state.current_first_image.clone(),
        relative_poses,
        geo_frames,
        metadata: PackageMetadata {
            session_id: m.session_id.clone(),
            chunk_index: m.next_chunk,
            chunk_start: chunk.start,
            step_count: chunk.steps.len(),
            seed: params.seed.wrapping_add(m.next_chunk as u64),
            drop_pose: false,
            drop_geo: false,
        },
    };
    package.validate(&params.augmentation)?;
    Ok(package)
}

/// Generates the next segment. On any error the input state is untouched
/// and can be stepped again.
pub fn step(
    state: &SessionState,
    ctx: &SessionContext<'_>,
    backend: &dyn GeneratorBackend,
    cancel: &CancelFlag,
) -> Result<(SessionState, Vec<ImageBuffer>)> {
    let package = assemble_package(state, ctx)?;
    let caps = backend.capabilities();
    let (w, h) = package.first_image.dims();
    if caps.max_frames < package.relative_poses.len() || caps.width < w || caps.height < h {
        return Err(Error::IncompatibleDims(format!(
            "backend {} handles {} frames up to {}x{}, chunk needs {} frames at {w}x{h}",
            backend.id(),
            caps.max_frames,
            caps.width,
            caps.height,
            package.relative_poses.len()
        )));
    }
    cancel.check()?;
    let frames = backend.generate(&package, cancel)?;
    cancel.check()?;
    if frames.len() != package.relative_poses.len() {
        return Err(Error::FrameCountMismatch { expected: package.relative_poses.len(), got: frames.len() });
    }
    let m = &state.manifest;
    let chunk = &m.chunks[m.next_chunk];
    let absolute = chunk_poses(ctx.index, chunk, m.params.chunk_len)?;
    let last_frame = frames.last().expect("at least two poses").clone();

    let mut next = state.manifest.clone();
    next.segments.push(SegmentRecord {
        index: m.next_chunk,
        chunk_start: chunk.start,
        step_count: chunk.steps.len(),
        geo_frame_count: package.geo_frames.len(),
        frame_count: frames.len(),
        backend_id: backend.id(),
        seed: package.metadata.seed,
        first_pano: chunk.steps[0].pano_id.clone(),
        last_pano: chunk.steps.last().expect("non-empty chunk").pano_id.clone(),
        absolute_poses: absolute.iter().map(Se3Pose::to_row_major_3x4).collect(),
    });
    next.current_pose = *absolute.last().expect("non-empty poses");
    next.next_chunk += 1;
    if next.next_chunk == next.chunks.len() {
        next.status = SessionStatus::Complete;
    }
    Ok((SessionState { manifest: next, current_first_image: last_frame }, frames))
}

/// Distance between where the session started and where it ended.
pub fn loop_closure_error(state: &SessionState) -> Result<f64> {
    if state.status() != SessionStatus::Complete {
        return Err(Error::SessionIncomplete);
    }
    Ok(pose_distance(&state.manifest.start_pose, &state.manifest.current_pose))
}

/// Drops the first frame of every segment after the first, since it
/// repeats the previous segment's last frame.
pub fn unique_frames(segments: &[Vec<ImageBuffer>]) -> Vec<(usize, &ImageBuffer)> {
    segments
        .iter()
        .enumerate()
        .flat_map(|(k, frames)| frames.iter().skip(usize::from(k > 0)).map(move |f| (k, f)))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExportedFrame {
    pub index: usize,
    pub segment: usize,
    pub file: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExportManifest {
    pub version: u32,
    pub session: SessionManifest,
    pub unique_frames: usize,
    pub loop_closure_error_m: Option<f64>,
    pub frames: Vec<ExportedFrame>,
}

/// Writes `frames/NNNNNN.png` and `manifest.json` under `dir`.
pub fn export_session(state: &SessionState, segments: &[Vec<ImageBuffer>], dir: &Path) -> Result<ExportManifest> {
    if segments.len() != state.manifest.segments.len() {
        return Err(Error::InvalidParams(format!(
            "{} frame lists for {} segments",
            segments.len(),
            state.manifest.segments.len()
        )));
    }
    let frame_dir = dir.join("frames");
    fs::create_dir_all(&frame_dir)?;
    let mut frames = Vec::new();
    for (i, (segment, img)) in unique_frames(segments).into_iter().enumerate() {
        let file = format!("frames/{i:06}.png");
        let bytes = img.to_png_bytes()?;
        fs::write(dir.join(&file), &bytes)?;
        frames.push(ExportedFrame { index: i, segment, file, sha256: hex::encode(Sha256::digest(&bytes)) });
    }
    let manifest = ExportManifest {
        version: MANIFEST_VERSION,
        session: state.manifest.clone(),
        unique_frames: frames.len(),
        loop_closure_error_m: loop_closure_error(state).ok(),
        frames,
    };
    let mut text = serde_json::to_string_pretty(&manifest)?;
    text.push('\n');
    fs::write(dir.join("manifest.json"), text)?;
    Ok(manifest)
}
