//! Equirectangular-to-pinhole cropping and the sampling that turns a mined
//! pair into a concrete training example: yaw augmentation, condition
//! length, classifier-free dropout flags and latent-shape arithmetic.
//!
//! Panorama conventions: column centers map linearly to azimuth in
//! [0°, 360°), measured clockwise (seen from above) from the rig's forward
//! axis; row centers map linearly to elevation from +90° (top) to -90°.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geodesy::{angle_difference, level_camera_rotation, to_relative_poses, travel_headings, wrap_degrees, LocalFrame, Se3Pose};
use crate::image_buffer::ImageBuffer;
use crate::pair_miner::TrainingPair;
use crate::pano_index::{PanoIndex, PanoRecord};

pub const VAE_TEMPORAL_STRIDE: u32 = 4;
pub const VAE_SPATIAL_STRIDE: u32 = 8;
pub const PATCH_SIZE: u32 = 2;

/// Allowed condition lengths: 61..=81 in steps of 4, so every length is
/// compatible with the temporal VAE stride.
pub const CONDITION_LENGTHS: [usize; 6] = [61, 65, 69, 73, 77, 81];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentationParams {
    /// Horizontal field of view.
    pub fov_deg: f64,
    pub out_w: u32,
    pub out_h: u32,
    /// Range of the random starting yaw, degrees, half-open.
    pub start_yaw_range: (f64, f64),
    /// Range of the per-frame added rotation, degrees, closed.
    pub per_frame_rot_range: (f64, f64),
    pub cond_lengths: Vec<usize>,
}

impl Default for AugmentationParams {
    fn default() -> Self {
        Self {
            fov_deg: 65.0,
            out_w: 832,
            out_h: 480,
            start_yaw_range: (0.0, 360.0),
            per_frame_rot_range: (0.0, 2.0),
            cond_lengths: CONDITION_LENGTHS.to_vec(),
        }
    }
}

impl AugmentationParams {
    pub fn with_output(mut self, w: u32, h: u32) -> Self {
        self.out_w = w;
        self.out_h = h;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fov_deg > 0.0 && self.fov_deg < 180.0) {
            return Err(Error::InvalidParams(format!("fov {} must be in (0, 180)", self.fov_deg)));
        }
        if self.out_w == 0 || self.out_h == 0 {
            return Err(Error::InvalidParams("output dimensions must be positive".into()));
        }
        let (a, b) = self.start_yaw_range;
        let (c, d) = self.per_frame_rot_range;
        if !(a < b) || !(c <= d) {
            return Err(Error::InvalidParams("empty yaw sampling range".into()));
        }
        if self.cond_lengths.is_empty() || self.cond_lengths.iter().any(|l| l % 4 != 1) {
            return Err(Error::InvalidParams("condition lengths must be non-empty and = 1 (mod 4)".into()));
        }
        Ok(())
    }

    /// Focal length in pixels (square pixels).
    pub fn focal_px(&self) -> f64 {
        (self.out_w as f64 / 2.0) / (self.fov_deg.to_radians() / 2.0).tan()
    }

    pub fn vertical_fov_deg(&self) -> f64 {
        2.0 * ((self.out_h as f64 / 2.0) / self.focal_px()).atan().to_degrees()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DropoutPolicy {
    pub p_pose: f64,
    pub p_geo: f64,
    /// When false a single draw with `p_pose` drops both conditions.
    pub independent: bool,
}

impl Default for DropoutPolicy {
    fn default() -> Self {
        Self { p_pose: 0.10, p_geo: 0.10, independent: true }
    }
}

impl DropoutPolicy {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.p_pose) || !(0.0..=1.0).contains(&self.p_geo) {
            return Err(Error::InvalidParams("dropout probabilities must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

/// Snaps a yaw into [0, 360) on a 1e-9° grid so that yaws differing by
/// whole turns produce bit-identical crops.
fn canonical_yaw(yaw_deg: f64) -> f64 {
    let q = (wrap_degrees(yaw_deg) * 1e9).round() / 1e9;
    if q >= 360.0 {
        0.0
    } else {
        q
    }
}

/// Viewing geometry of a pinhole crop.
#[derive(Debug, Clone, Copy)]
pub struct CropCamera {
    forward: [f64; 3],
    right: [f64; 3],
    up: [f64; 3],
    focal: f64,
    cx: f64,
    cy: f64,
}

impl CropCamera {
    pub fn new(yaw_deg: f64, pitch_deg: f64, params: &AugmentationParams) -> Self {
        let (sy, cy) = canonical_yaw(yaw_deg).to_radians().sin_cos();
        let (sp, cp) = pitch_deg.to_radians().sin_cos();
        // Local frame: x = clockwise-90° azimuth, y = azimuth 0, z = up.
        let forward = [cp * sy, cp * cy, sp];
        let right = [cy, -sy, 0.0];
        let up = [
            right[1] * forward[2] - right[2] * forward[1],
            right[2] * forward[0] - right[0] * forward[2],
            right[0] * forward[1] - right[1] * forward[0],
        ];
        Self {
            forward,
            right,
            up,
            focal: params.focal_px(),
            cx: params.out_w as f64 / 2.0,
            cy: params.out_h as f64 / 2.0,
        }
    }

    /// (azimuth, elevation) in degrees of the ray through continuous image
    /// coordinates `(u, v)`; pixel `(i, j)` has its center at `(i + 0.5, j + 0.5)`.
    pub fn ray_angles(&self, u: f64, v: f64) -> (f64, f64) {
        let x = (u - self.cx) / self.focal;
        let y = (v - self.cy) / self.focal;
        let d: [f64; 3] = std::array::from_fn(|k| self.forward[k] + x * self.right[k] - y * self.up[k]);
        let az = wrap_degrees(d[0].atan2(d[1]).to_degrees());
        let el = d[2].atan2(d[0].hypot(d[1])).to_degrees();
        (az, el)
    }
}

/// Bilinear sample at continuous pixel-center coordinates, wrapping
/// horizontally and clamping vertically.
fn sample_bilinear(pano: &ImageBuffer, px: f64, py: f64) -> [f32; 3] {
    let w = pano.width() as i64;
    let h = pano.height() as i64;
    let x0f = px.floor();
    let y0f = py.floor();
    let fx = (px - x0f) as f32;
    let fy = (py - y0f) as f32;
    let x0 = (x0f as i64).rem_euclid(w);
    let x1 = (x0 + 1).rem_euclid(w);
    let y0 = (y0f as i64).clamp(0, h - 1);
    let y1 = (y0f as i64 + 1).clamp(0, h - 1);
    let p00 = pano.pixel(x0 as u32, y0 as u32);
    let p10 = pano.pixel(x1 as u32, y0 as u32);
    let p01 = pano.pixel(x0 as u32, y1 as u32);
    let p11 = pano.pixel(x1 as u32, y1 as u32);
    std::array::from_fn(|c| {
        let top = p00[c] + (p10[c] - p00[c]) * fx;
        let bot = p01[c] + (p11[c] - p01[c]) * fx;
        top + (bot - top) * fy
    })
}

/// Renders a pinhole view of an equirectangular panorama.
pub fn crop_perspective(pano: &ImageBuffer, yaw_deg: f64, pitch_deg: f64, params: &AugmentationParams) -> Result<ImageBuffer> {
    params.validate()?;
    if pano.width() != 2 * pano.height() {
        return Err(Error::BadAspect { width: pano.width(), height: pano.height() });
    }
    let limit = 90.0 - params.fov_deg / 2.0;
    if !(pitch_deg.abs() < limit) {
        return Err(Error::PitchOutOfRange { pitch_deg, limit_deg: limit });
    }
    let cam = CropCamera::new(yaw_deg, pitch_deg, params);
    let pw = pano.width() as f64;
    let ph = pano.height() as f64;
    Ok(ImageBuffer::from_fn(params.out_w, params.out_h, |i, j| {
        let (az, el) = cam.ray_angles(i as f64 + 0.5, j as f64 + 0.5);
        let px = az / 360.0 * pw - 0.5;
        let py = (90.0 - el) / 180.0 * ph - 0.5;
        sample_bilinear(pano, px, py)
    }))
}

/// Per-frame crop yaws (degrees) following the trajectory heading plus a
/// random start offset and a small random positive sweep per frame.
///
/// `yaw[0] = heading[0] + u` with `u` from `start_yaw_range`, wrapped to
/// [0, 360); `yaw[k] = yaw[k-1] + Δheading[k] + δ_k` with `δ_k` from
/// `per_frame_rot_range` and `Δheading` the signed smallest turn. Later
/// yaws are left unwrapped so increments stay visible.
pub fn sample_yaw_schedule<R: Rng + ?Sized>(
    n_frames: usize,
    headings_deg: &[f64],
    params: &AugmentationParams,
    rng: &mut R,
) -> Result<Vec<f64>> {
    if n_frames == 0 {
        return Err(Error::InvalidParams("yaw schedule needs at least one frame".into()));
    }
    if headings_deg.len() != n_frames {
        return Err(Error::InvalidParams(format!(
            "{} headings for {n_frames} frames",
            headings_deg.len()
        )));
    }
    let (a, b) = params.start_yaw_range;
    let (c, d) = params.per_frame_rot_range;
    let mut yaws = Vec::with_capacity(n_frames);
    yaws.push(wrap_degrees(headings_deg[0] + rng.random_range(a..b)));
    for k in 1..n_frames {
        let turn = angle_difference(headings_deg[k - 1], headings_deg[k]);
        let delta = rng.random_range(c..=d);
        yaws.push(yaws[k - 1] + turn + delta);
    }
    Ok(yaws)
}

pub fn sample_condition_length<R: Rng + ?Sized>(params: &AugmentationParams, rng: &mut R) -> usize {
    params.cond_lengths[rng.random_range(0..params.cond_lengths.len())]
}

/// `(drop_pose, drop_geo)`.
pub fn sample_dropout_flags<R: Rng + ?Sized>(policy: &DropoutPolicy, rng: &mut R) -> (bool, bool) {
    if policy.independent {
        (rng.random_bool(policy.p_pose), rng.random_bool(policy.p_geo))
    } else {
        let both = rng.random_bool(policy.p_pose);
        (both, both)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LatentShape {
    pub t: u32,
    pub h: u32,
    pub w: u32,
}

/// Token grid of a clip after the video VAE (4x temporal, 8x spatial) and
/// 2x2 patchification.
pub fn compute_latent_shape(t_frames: u32, h_px: u32, w_px: u32) -> Result<LatentShape> {
    let spatial = VAE_SPATIAL_STRIDE * PATCH_SIZE;
    if t_frames % VAE_TEMPORAL_STRIDE != 1 {
        return Err(Error::IncompatibleDims(format!("frame count {t_frames} is not 1 (mod {VAE_TEMPORAL_STRIDE})")));
    }
    if h_px == 0 || w_px == 0 || h_px % spatial != 0 || w_px % spatial != 0 {
        return Err(Error::IncompatibleDims(format!("{w_px}x{h_px} is not a positive multiple of {spatial}")));
    }
    Ok(LatentShape { t: (t_frames - 1) / VAE_TEMPORAL_STRIDE, h: h_px / spatial, w: w_px / spatial })
}

/// Crop yaw for a panorama so the view looks along a world compass heading.
pub fn rig_relative_yaw(record: &PanoRecord, world_heading_deg: f64) -> f64 {
    wrap_degrees(world_heading_deg - record.rig_heading_deg())
}

/// Pose of a level crop camera at a panorama looking along a world heading.
pub fn crop_camera_pose(record: &PanoRecord, world_heading_deg: f64) -> Se3Pose {
    let frame = LocalFrame::at_geodetic(&record.geodetic);
    Se3Pose { rotation: level_camera_rotation(&frame, world_heading_deg), translation: record.position() }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameRef {
    pub pano_id: String,
    pub image_uri: String,
    /// Crop yaw relative to the panorama's rig heading, [0, 360).
    pub yaw_deg: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingExample {
    pub seed: u64,
    pub target: Vec<FrameRef>,
    /// Row-major 3x4 extrinsics relative to the first target frame.
    pub relative_poses: Vec<[f64; 12]>,
    pub condition: Vec<FrameRef>,
    pub condition_length: usize,
    pub drop_pose: bool,
    pub drop_geo: bool,
    pub latent_shape: LatentShape,
}

impl TrainingExample {
    pub fn to_manifest_line(&self) -> String {
        serde_json::to_string(self).expect("training example serializes")
    }
}

fn lookup<'a>(index: &'a PanoIndex, ids: &[String]) -> Result<Vec<&'a PanoRecord>> {
    ids.iter()
        .map(|id| index.get(id).ok_or_else(|| Error::InvalidParams(format!("unknown panorama id {id}"))))
        .collect()
}

/// Assembles the conditioning manifest for one mined pair.
///
/// The condition span is cut to the sampled length, centered; if the span is
/// shorter than the sampled length the longest allowed length that fits is
/// used instead. Each condition frame borrows the world viewing direction of
/// the proportionally matching target frame.
pub fn build_training_example(
    pair: &TrainingPair,
    index: &PanoIndex,
    params: &AugmentationParams,
    policy: &DropoutPolicy,
    seed: u64,
) -> Result<TrainingExample> {
    params.validate()?;
    policy.validate()?;
    let min_len = *params.cond_lengths.iter().min().unwrap();
    if pair.condition_window.len() < min_len {
        return Err(Error::ConditionTooShort { len: pair.condition_window.len(), min: min_len });
    }
    if pair.target_window.is_empty() {
        return Err(Error::EmptyTrajectory);
    }
    let target = lookup(index, &pair.target_window)?;
    let condition = lookup(index, &pair.condition_window)?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let positions: Vec<_> = target.iter().map(|r| r.position()).collect();
    let headings = travel_headings(&positions)?;
    let world_yaws = sample_yaw_schedule(target.len(), &headings, params, &mut rng)?;
    let sampled = sample_condition_length(params, &mut rng);
    let (drop_pose, drop_geo) = sample_dropout_flags(policy, &mut rng);

    let condition_length = params
        .cond_lengths
        .iter()
        .copied()
        .filter(|&l| l <= sampled && l <= condition.len())
        .max()
        .unwrap_or(min_len);
    let start = (condition.len() - condition_length) / 2;

    let target_refs = target
        .iter()
        .zip(&world_yaws)
        .map(|(r, &yaw)| FrameRef { pano_id: r.id.clone(), image_uri: r.image_uri.clone(), yaw_deg: rig_relative_yaw(r, yaw) })
        .collect();
    let absolute: Vec<_> = target.iter().zip(&world_yaws).map(|(r, &yaw)| crop_camera_pose(r, yaw)).collect();
    let relative_poses = to_relative_poses(&absolute)?.iter().map(Se3Pose::to_row_major_3x4).collect();

    let n = target.len();
    let condition_refs = condition[start..start + condition_length]
        .iter()
        .enumerate()
        .map(|(j, r)| {
            let k = if condition_length > 1 {
                ((j * (n - 1)) as f64 / (condition_length - 1) as f64).round() as usize
            } else {
                0
            };
            FrameRef { pano_id: r.id.clone(), image_uri: r.image_uri.clone(), yaw_deg: rig_relative_yaw(r, world_yaws[k]) }
        })
        .collect();

    let latent_shape = compute_latent_shape(n as u32, params.out_h, params.out_w)
        .unwrap_or(LatentShape { t: 0, h: 0, w: 0 });
    Ok(TrainingExample {
        seed,
        target: target_refs,
        relative_poses,
        condition: condition_refs,
        condition_length,
        drop_pose,
        drop_geo,
        latent_shape,
    })
}
