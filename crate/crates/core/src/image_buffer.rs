use std::fs;
use std::io::Write as _;
use std::path::Path;

use image::{ImageBuffer as RasterBuffer, Rgb};

use crate::error::{Error, Result};

/// Three-channel image with values in [0, 1], stored row-major and
/// channel-interleaved.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageBuffer {
    width: u32,
    height: u32,
    data: Vec<f32>,
}

const RAW_MAGIC: &[u8; 4] = b"SGF3";

impl ImageBuffer {
    pub fn new(width: u32, height: u32, data: Vec<f32>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::IncompatibleDims(format!("image must be at least 1x1, got {width}x{height}")));
        }
        let expected = width as usize * height as usize * 3;
        if data.len() != expected {
            return Err(Error::IncompatibleDims(format!("expected {expected} values, got {}", data.len())));
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::IncompatibleDims(format!("pixel value {v} outside [0, 1]")));
        }
        Ok(Self { width, height, data })
    }

    pub fn filled(width: u32, height: u32, rgb: [f32; 3]) -> Self {
        Self::from_fn(width, height, |_, _| rgb)
    }

    /// Builds an image from a per-pixel function; values are clamped to [0, 1].
    pub fn from_fn(width: u32, height: u32, mut f: impl FnMut(u32, u32) -> [f32; 3]) -> Self {
        assert!(width > 0 && height > 0, "image dimensions must be positive");
        let mut data = Vec::with_capacity(width as usize * height as usize * 3);
        for y in 0..height {
            for x in 0..width {
                data.extend(f(x, y).iter().map(|v| v.clamp(0.0, 1.0)));
            }
        }
        Self { width, height, data }
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn dims(&self) -> (u32, u32) {
        (self.width, self.height)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn pixel(&self, x: u32, y: u32) -> [f32; 3] {
        let i = (y as usize * self.width as usize + x as usize) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    #[inline]
    pub fn set_pixel(&mut self, x: u32, y: u32, rgb: [f32; 3]) {
        let i = (y as usize * self.width as usize + x as usize) * 3;
        for c in 0..3 {
            self.data[i + c] = rgb[c].clamp(0.0, 1.0);
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::FileNotFound(path.to_path_buf()));
        }
        let img = image::open(path)?.to_rgb32f();
        let (w, h) = img.dimensions();
        Self::new(w, h, img.into_raw().into_iter().map(|v| v.clamp(0.0, 1.0)).collect())
    }

    /// Writes a 16-bit RGB PNG.
    pub fn save_png(&self, path: &Path) -> Result<()> {
        let raw: Vec<u16> = self.data.iter().map(|v| (v * 65535.0).round() as u16).collect();
        let buf: RasterBuffer<Rgb<u16>, Vec<u16>> =
            RasterBuffer::from_raw(self.width, self.height, raw).expect("buffer size matches dimensions");
        buf.save(path)?;
        Ok(())
    }

    /// PNG bytes (16-bit RGB) for serving over the wire.
    pub fn to_png_bytes(&self) -> Result<Vec<u8>> {
        let raw: Vec<u16> = self.data.iter().map(|v| (v * 65535.0).round() as u16).collect();
        let buf: RasterBuffer<Rgb<u16>, Vec<u16>> =
            RasterBuffer::from_raw(self.width, self.height, raw).expect("buffer size matches dimensions");
        let mut out = std::io::Cursor::new(Vec::new());
        buf.write_to(&mut out, image::ImageFormat::Png)?;
        Ok(out.into_inner())
    }

    pub fn from_png_bytes(bytes: &[u8]) -> Result<Self> {
        let img = image::load_from_memory(bytes)?.to_rgb32f();
        let (w, h) = img.dimensions();
        Self::new(w, h, img.into_raw().into_iter().map(|v| v.clamp(0.0, 1.0)).collect())
    }

    /// Lossless little-endian f32 dump: magic, width, height, samples.
    pub fn to_raw_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(12 + self.data.len() * 4);
        out.extend_from_slice(RAW_MAGIC);
        out.extend_from_slice(&self.width.to_le_bytes());
        out.extend_from_slice(&self.height.to_le_bytes());
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_raw_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 12 || &bytes[..4] != RAW_MAGIC {
            return Err(Error::Parse("not a raw frame file".into()));
        }
        let w = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        let h = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        let data: Vec<f32> = bytes[12..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Self::new(w, h, data)
    }

    pub fn save_raw(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path)?;
        f.write_all(&self.to_raw_bytes())?;
        Ok(())
    }

    pub fn load_raw(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::FileNotFound(path.to_path_buf()));
        }
        Self::from_raw_bytes(&fs::read(path)?)
    }
}
