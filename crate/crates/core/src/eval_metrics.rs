//! Image and video quality metrics: PSNR, SSIM, their static-masked
//! variants that ignore dynamic pixels, and FID from precomputed features.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image_buffer::ImageBuffer;

/// Reported PSNR for identical images.
pub const PSNR_CAP_DB: f64 = 99.0;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
/// Relative residual the FID matrix square root must reach.
pub const SQRT_TOLERANCE: f64 = 1e-8;
pub const COV_REGULARIZATION: f64 = 1e-6;

/// One frame of a dynamic-object mask; `true` marks a dynamic pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskFrame {
    pub width: u32,
    pub height: u32,
    pub data: Vec<bool>,
}

impl MaskFrame {
    pub fn empty(width: u32, height: u32) -> Self {
        Self { width, height, data: vec![false; width as usize * height as usize] }
    }

    pub fn from_fn(width: u32, height: u32, f: impl Fn(u32, u32) -> bool) -> Self {
        let data = (0..height).flat_map(|y| (0..width).map(move |x| (x, y))).map(|(x, y)| f(x, y)).collect();
        Self { width, height, data }
    }

    #[inline]
    pub fn is_dynamic(&self, x: u32, y: u32) -> bool {
        self.data[y as usize * self.width as usize + x as usize]
    }

    /// Single-channel raster; pixels brighter than mid-gray are dynamic.
    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::FileNotFound(path.to_path_buf()));
        }
        Ok(Self::from_luma(image::open(path)?))
    }

    pub fn from_png_bytes(bytes: &[u8]) -> Result<Self> {
        Ok(Self::from_luma(image::load_from_memory(bytes)?))
    }

    fn from_luma(img: image::DynamicImage) -> Self {
        let img = img.to_luma32f();
        let (width, height) = img.dimensions();
        Self { width, height, data: img.into_raw().into_iter().map(|v| v > 0.5).collect() }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let raw: Vec<u8> = self.data.iter().map(|&d| if d { 255 } else { 0 }).collect();
        image::GrayImage::from_raw(self.width, self.height, raw).expect("mask size matches").save(path)?;
        Ok(())
    }
}

/// Per-frame masks for a video.
#[derive(Debug, Clone, PartialEq)]
pub struct DynamicMask {
    pub frames: Vec<MaskFrame>,
}

fn check_dims(a: &ImageBuffer, b: &ImageBuffer, mask: Option<&MaskFrame>) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::DimMismatch(format!("{:?} vs {:?}", a.dims(), b.dims())));
    }
    if let Some(m) = mask {
        if (m.width, m.height) != a.dims() {
            return Err(Error::DimMismatch(format!("mask {}x{} vs image {:?}", m.width, m.height, a.dims())));
        }
    }
    Ok(())
}

/// Peak signal-to-noise ratio in dB over static pixels, for values in
/// [0, 1]. Zero error reports [`PSNR_CAP_DB`].
pub fn psnr(a: &ImageBuffer, b: &ImageBuffer, mask: Option<&MaskFrame>) -> Result<f64> {
    check_dims(a, b, mask)?;
    let (da, db) = (a.data(), b.data());
    let mut sum = 0.0f64;
    let mut count = 0usize;
    for p in 0..da.len() / 3 {
        if mask.is_some_and(|m| m.data[p]) {
            continue;
        }
        for c in 0..3 {
            let d = da[3 * p + c] as f64 - db[3 * p + c] as f64;
            sum += d * d;
        }
        count += 3;
    }
    if count == 0 {
        return Err(Error::AllMasked);
    }
    let mse = sum / count as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP_DB))
}

fn gaussian_kernel() -> [f64; SSIM_WINDOW] {
    let mut k = [0.0; SSIM_WINDOW];
    let half = (SSIM_WINDOW / 2) as f64;
    for (i, v) in k.iter_mut().enumerate() {
        let x = i as f64 - half;
        *v = (-x * x / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = k.iter().sum();
    k.map(|v| v / s)
}

/// Weighted window sums of `plane` at every valid window position, using
/// the separable Gaussian.
fn filter_valid(plane: &[f64], w: usize, h: usize, k: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let ow = w - SSIM_WINDOW + 1;
    let oh = h - SSIM_WINDOW + 1;
    let mut rows = vec![0.0; ow * h];
    for y in 0..h {
        for x in 0..ow {
            let mut s = 0.0;
            for (i, kv) in k.iter().enumerate() {
                s += kv * plane[y * w + x + i];
            }
            rows[y * ow + x] = s;
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            let mut s = 0.0;
            for (i, kv) in k.iter().enumerate() {
                s += kv * rows[(y + i) * ow + x];
            }
            out[y * ow + x] = s;
        }
    }
    out
}

/// Mean structural similarity over 11x11 Gaussian windows lying fully
/// inside the image, averaged over the three channels. With a mask, only
/// windows whose center pixel is static count.
pub fn ssim(a: &ImageBuffer, b: &ImageBuffer, mask: Option<&MaskFrame>) -> Result<f64> {
    check_dims(a, b, mask)?;
    let (w, h) = (a.width() as usize, a.height() as usize);
    if w < SSIM_WINDOW || h < SSIM_WINDOW {
        return Err(Error::TooSmall { width: a.width(), height: a.height(), window: SSIM_WINDOW as u32 });
    }
    let k = gaussian_kernel();
    let c1 = (SSIM_K1 * 1.0).powi(2);
    let c2 = (SSIM_K2 * 1.0).powi(2);
    let (ow, oh) = (w - SSIM_WINDOW + 1, h - SSIM_WINDOW + 1);
    let half = SSIM_WINDOW / 2;
    let keep: Vec<bool> = (0..ow * oh)
        .map(|i| {
            let (x, y) = (i % ow + half, i / ow + half);
            !mask.is_some_and(|m| m.is_dynamic(x as u32, y as u32))
        })
        .collect();
    let kept = keep.iter().filter(|&&v| v).count();
    if kept == 0 {
        return Err(Error::AllMasked);
    }
    let mut total = 0.0;
    for c in 0..3 {
        let pa: Vec<f64> = a.data().iter().skip(c).step_by(3).map(|&v| v as f64).collect();
        let pb: Vec<f64> = b.data().iter().skip(c).step_by(3).map(|&v| v as f64).collect();
        let aa: Vec<f64> = pa.iter().map(|v| v * v).collect();
        let bb: Vec<f64> = pb.iter().map(|v| v * v).collect();
        let ab: Vec<f64> = pa.iter().zip(&pb).map(|(x, y)| x * y).collect();
        let mu_a = filter_valid(&pa, w, h, &k);
        let mu_b = filter_valid(&pb, w, h, &k);
        let e_aa = filter_valid(&aa, w, h, &k);
        let e_bb = filter_valid(&bb, w, h, &k);
        let e_ab = filter_valid(&ab, w, h, &k);
        let mut sum = 0.0;
        for i in 0..ow * oh {
            if !keep[i] {
                continue;
            }
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = e_aa[i] - ma * ma;
            let vb = e_bb[i] - mb * mb;
            let cov = e_ab[i] - ma * mb;
            sum += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
        }
        total += sum / kept as f64;
    }
    Ok(total / 3.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VideoMetrics {
    pub psnr: f64,
    pub ssim: f64,
    pub frames_used: usize,
    pub frames_skipped: usize,
}

/// Per-frame PSNR and SSIM averaged over frames. With masks, frames whose
/// static region is empty for either metric are skipped with a warning.
/// Masks describe the ground-truth frames.
pub fn video_metrics(gen: &[ImageBuffer], gt: &[ImageBuffer], masks: Option<&DynamicMask>) -> Result<VideoMetrics> {
    if gen.len() != gt.len() {
        return Err(Error::DimMismatch(format!("{} generated frames vs {} ground-truth frames", gen.len(), gt.len())));
    }
    if let Some(m) = masks {
        if m.frames.len() != gt.len() {
            return Err(Error::DimMismatch(format!("{} masks for {} frames", m.frames.len(), gt.len())));
        }
    }
    if gen.is_empty() {
        return Err(Error::DimMismatch("no frames".into()));
    }
    let per_frame: Vec<Result<Option<(f64, f64)>>> = (0..gen.len())
        .into_par_iter()
        .map(|i| {
            let mask = masks.map(|m| &m.frames[i]);
            match (psnr(&gen[i], &gt[i], mask), ssim(&gen[i], &gt[i], mask)) {
                (Ok(p), Ok(s)) => Ok(Some((p, s))),
                (Err(Error::AllMasked), _) | (_, Err(Error::AllMasked)) => {
                    log::warn!("frame {i}: no static pixels, skipped");
                    Ok(None)
                }
                (Err(e), _) | (_, Err(e)) => Err(e),
            }
        })
        .collect();
    let mut used = Vec::new();
    for r in per_frame {
        if let Some(v) = r? {
            used.push(v);
        }
    }
    if used.is_empty() {
        return Err(Error::AllMasked);
    }
    let n = used.len() as f64;
    Ok(VideoMetrics {
        psnr: used.iter().map(|v| v.0).sum::<f64>() / n,
        ssim: used.iter().map(|v| v.1).sum::<f64>() / n,
        frames_used: used.len(),
        frames_skipped: gen.len() - used.len(),
    })
}

/// Static-masked PSNR and SSIM (`psnr_s`, `ssim_s`).
pub fn masked_video_metrics(gen: &[ImageBuffer], gt: &[ImageBuffer], masks: &DynamicMask) -> Result<VideoMetrics> {
    video_metrics(gen, gt, Some(masks))
}

/// n feature vectors of dimension d, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSet {
    pub n: usize,
    pub d: usize,
    pub data: Vec<f64>,
}

impl FeatureSet {
    pub fn new(n: usize, d: usize, data: Vec<f64>) -> Result<Self> {
        if d == 0 || data.len() != n * d {
            return Err(Error::DimMismatch(format!("{} values for {n}x{d} features", data.len())));
        }
        Ok(Self { n, d, data })
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.d..(i + 1) * self.d]
    }

    /// File layout: little-endian u32 n, u32 d, then n*d f32 values.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 {
            return Err(Error::Parse("feature file shorter than its header".into()));
        }
        let n = u32::from_le_bytes(bytes[0..4].try_into().unwrap()) as usize;
        let d = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        let body = &bytes[8..];
        if body.len() != n * d * 4 {
            return Err(Error::Parse(format!("expected {} bytes of features, found {}", n * d * 4, body.len())));
        }
        let data = body.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64).collect();
        Self::new(n, d, data)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(8 + self.data.len() * 4);
        out.extend_from_slice(&(self.n as u32).to_le_bytes());
        out.extend_from_slice(&(self.d as u32).to_le_bytes());
        for v in &self.data {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
        out
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::FileNotFound(path.to_path_buf()));
        }
        Self::from_bytes(&fs::read(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::File::create(path)?.write_all(&self.to_bytes())?;
        Ok(())
    }

    /// Mean and unbiased covariance.
    pub fn moments(&self) -> (DVector<f64>, DMatrix<f64>) {
        let m = DMatrix::from_row_slice(self.n, self.d, &self.data);
        let mean = m.row_mean().transpose();
        let mut centered = m;
        for mut row in centered.row_iter_mut() {
            row -= mean.transpose();
        }
        let cov = centered.transpose() * &centered / (self.n as f64 - 1.0);
        (mean, cov)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FidResult {
    pub fid: f64,
    /// True when a covariance had to be regularized (n <= d).
    pub regularized: bool,
    pub sqrt_residual: f64,
}

fn sym_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let roots = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose()
}

/// Fréchet distance between Gaussian fits of two feature sets.
///
/// The cross term uses `tr((Σr Σg)^½) = tr((Σr^½ Σg Σr^½)^½)`, where the
/// inner matrix is symmetric positive semidefinite.
pub fn fid_from_features(real: &FeatureSet, gen: &FeatureSet) -> Result<FidResult> {
    if real.d != gen.d {
        return Err(Error::DimMismatch(format!("feature dimensions {} and {}", real.d, gen.d)));
    }
    if real.n < 2 || gen.n < 2 {
        return Err(Error::DimMismatch("each feature set needs at least 2 rows".into()));
    }
    let d = real.d;
    let (mu_r, mut cov_r) = real.moments();
    let (mu_g, mut cov_g) = gen.moments();
    let mut regularized = false;
    for (set, cov) in [(real, &mut cov_r), (gen, &mut cov_g)] {
        if set.n <= d {
            *cov += DMatrix::identity(d, d) * COV_REGULARIZATION;
            regularized = true;
        }
    }
    let root_r = sym_sqrt(&cov_r);
    let inner = &root_r * &cov_g * &root_r;
    let inner = (&inner + inner.transpose()) * 0.5;
    let root = sym_sqrt(&inner);
    let norm = inner.norm();
    let sqrt_residual = if norm > 0.0 { (&root * &root - &inner).norm() / norm } else { 0.0 };
    if !(sqrt_residual < SQRT_TOLERANCE) {
        return Err(Error::SqrtNonConvergence { residual: sqrt_residual });
    }
    let diff = mu_r - mu_g;
    let raw = diff.dot(&diff) + cov_r.trace() + cov_g.trace() - 2.0 * root.trace();
    if raw < -1e-6 {
        log::warn!("FID {raw} is negative beyond rounding; clamped to 0");
    }
    Ok(FidResult { fid: raw.max(0.0), regularized, sqrt_residual })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub psnr: f64,
    pub ssim: f64,
    pub psnr_s: Option<f64>,
    pub ssim_s: Option<f64>,
    pub fid: Option<f64>,
    pub frames: usize,
    pub masked_frames_skipped: usize,
    pub fid_regularized: bool,
}

impl MetricReport {
    /// `key=value` lines in a fixed order; absent values are omitted.
    pub fn to_key_value(&self) -> String {
        let mut lines = vec![
            format!("frames={}", self.frames),
            format!("psnr={:.6}", self.psnr),
            format!("ssim={:.8}", self.ssim),
        ];
        if let Some(v) = self.psnr_s {
            lines.push(format!("psnr_s={v:.6}"));
        }
        if let Some(v) = self.ssim_s {
            lines.push(format!("ssim_s={v:.8}"));
            lines.push(format!("masked_frames_skipped={}", self.masked_frames_skipped));
        }
        if let Some(v) = self.fid {
            lines.push(format!("fid={v:.8}"));
            lines.push(format!("fid_regularized={}", self.fid_regularized));
        }
        lines.push(format!("psnr_cap_db={PSNR_CAP_DB}"));
        lines.join("\n") + "\n"
    }
}

/// PNG files in a directory, sorted by file name.
pub fn sorted_pngs(dir: &Path) -> Result<Vec<PathBuf>> {
    if !dir.is_dir() {
        return Err(Error::FileNotFound(dir.to_path_buf()));
    }
    let mut files: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
        .collect();
    files.sort();
    Ok(files)
}

pub fn load_frames(dir: &Path) -> Result<Vec<ImageBuffer>> {
    sorted_pngs(dir)?.iter().map(|p| ImageBuffer::load(p)).collect()
}

pub fn load_masks(dir: &Path) -> Result<DynamicMask> {
    Ok(DynamicMask { frames: sorted_pngs(dir)?.iter().map(|p| MaskFrame::load(p)).collect::<Result<_>>()? })
}

/// Full report for a generated video against ground truth.
pub fn evaluate(
    gen: &[ImageBuffer],
    gt: &[ImageBuffer],
    masks: Option<&DynamicMask>,
    features: Option<(&FeatureSet, &FeatureSet)>,
) -> Result<MetricReport> {
    let plain = video_metrics(gen, gt, None)?;
    let masked = masks.map(|m| masked_video_metrics(gen, gt, m)).transpose()?;
    let fid = features.map(|(r, g)| fid_from_features(r, g)).transpose()?;
    Ok(MetricReport {
        psnr: plain.psnr,
        ssim: plain.ssim,
        psnr_s: masked.as_ref().map(|m| m.psnr),
        ssim_s: masked.as_ref().map(|m| m.ssim),
        fid: fid.map(|f| f.fid),
        frames: gen.len(),
        masked_frames_skipped: masked.map_or(0, |m| m.frames_skipped),
        fid_regularized: fid.is_some_and(|f| f.regularized),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn psnr_closed_forms() {
        let a = ImageBuffer::filled(4, 4, [0.0; 3]);
        let b = ImageBuffer::filled(4, 4, [0.5; 3]);
        assert_eq!(psnr(&a, &a, None).unwrap(), PSNR_CAP_DB);
        assert!((psnr(&a, &b, None).unwrap() - 6.020_599_913).abs() < 1e-8);
        let all = MaskFrame::from_fn(4, 4, |_, _| true);
        assert_eq!(psnr(&a, &b, Some(&all)).unwrap_err().code(), "all_masked");
        let c = ImageBuffer::filled(3, 4, [0.0; 3]);
        assert_eq!(psnr(&a, &c, None).unwrap_err().code(), "dim_mismatch");
    }

    #[test]
    fn ssim_constant_images() {
        let a = ImageBuffer::filled(16, 16, [0.2; 3]);
        let b = ImageBuffer::filled(16, 16, [0.3; 3]);
        assert!((ssim(&a, &a, None).unwrap() - 1.0).abs() < 1e-12);
        // Zero variance: only the luminance term remains.
        let c1 = 0.01f64.powi(2);
        let (ma, mb) = (0.2f32 as f64, 0.3f32 as f64);
        let expected = (2.0 * ma * mb + c1) / (ma * ma + mb * mb + c1);
        assert!((ssim(&a, &b, None).unwrap() - expected).abs() < 1e-9);
        let small = ImageBuffer::filled(10, 16, [0.2; 3]);
        assert_eq!(ssim(&small, &small, None).unwrap_err().code(), "too_small");
    }

    #[test]
    fn kernel_is_normalized_and_symmetric() {
        let k = gaussian_kernel();
        assert!((k.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        for i in 0..SSIM_WINDOW {
            assert_eq!(k[i], k[SSIM_WINDOW - 1 - i]);
        }
    }

    #[test]
    fn feature_file_round_trip() {
        let f = FeatureSet::new(3, 2, vec![1.0, 2.0, 3.5, -4.0, 0.25, 6.0]).unwrap();
        assert_eq!(FeatureSet::from_bytes(&f.to_bytes()).unwrap(), f);
        assert!(FeatureSet::from_bytes(&f.to_bytes()[..20]).is_err());
    }

    #[test]
    fn report_format() {
        let r = MetricReport {
            psnr: 30.0,
            ssim: 0.9,
            psnr_s: None,
            ssim_s: None,
            fid: Some(1.5),
            frames: 2,
            masked_frames_skipped: 0,
            fid_regularized: false,
        };
        assert_eq!(
            r.to_key_value(),
            "frames=2\npsnr=30.000000\nssim=0.90000000\nfid=1.50000000\nfid_regularized=false\npsnr_cap_db=99\n"
        );
    }
}
