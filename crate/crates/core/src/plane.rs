//! RGB image planes, the currency passed between every stage.

use std::io::Cursor;
use std::path::Path;

use image::imageops::{self, FilterType};
use image::{ImageFormat, Rgb32FImage, RgbImage};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// An `H×W×3` RGB image with `f32` samples in `[0, 1]`, stored row-major
/// with interleaved channels.
#[derive(Debug, Clone, PartialEq)]
pub struct ImagePlane {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl ImagePlane {
    pub fn new(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![0.0; height * width * 3],
        }
    }

    pub fn from_vec(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != height * width * 3 {
            return Err(Error::Shape(format!(
                "{} samples cannot fill a {height}x{width} RGB image",
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> [f32; 3]) -> Self {
        let mut data = Vec::with_capacity(height * width * 3);
        for y in 0..height {
            for x in 0..width {
                data.extend_from_slice(&f(y, x));
            }
        }
        Self {
            height,
            width,
            data,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// `(height, width)`
    pub fn extent(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn pixel_count(&self) -> usize {
        self.height * self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    #[inline]
    pub fn pixel(&self, y: usize, x: usize) -> [f32; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    #[inline]
    pub fn set_pixel(&mut self, y: usize, x: usize, rgb: [f32; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn clamp_unit(&mut self) {
        self.data.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    }

    pub fn to_tensor(&self) -> Tensor {
        let n = self.pixel_count();
        let mut out = vec![0.0; 3 * n];
        for (i, px) in self.data.chunks_exact(3).enumerate() {
            out[i] = px[0];
            out[n + i] = px[1];
            out[2 * n + i] = px[2];
        }
        Tensor::from_vec(3, self.height, self.width, out).expect("sized above")
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        if t.channels() != 3 {
            return Err(Error::Shape(format!(
                "expected a 3-channel tensor, got {}",
                t.shape_str()
            )));
        }
        let n = t.plane_len();
        let src = t.data();
        let mut data = Vec::with_capacity(3 * n);
        for i in 0..n {
            data.extend_from_slice(&[src[i], src[n + i], src[2 * n + i]]);
        }
        Self::from_vec(t.height(), t.width(), data)
    }

    /// Copies the `h×w` window whose top-left corner is at `(top, left)`.
    pub fn crop(&self, top: usize, left: usize, h: usize, w: usize) -> Result<Self> {
        if top + h > self.height || left + w > self.width {
            return Err(Error::Shape(format!(
                "crop {h}x{w}+{top}+{left} exceeds {}x{}",
                self.height, self.width
            )));
        }
        let mut data = Vec::with_capacity(h * w * 3);
        for y in top..top + h {
            let row = (y * self.width + left) * 3;
            data.extend_from_slice(&self.data[row..row + w * 3]);
        }
        Self::from_vec(h, w, data)
    }

    /// Resamples to `height×width`. Same-size requests return a copy.
    pub fn resize(&self, height: usize, width: usize, filter: FilterType) -> ImagePlane {
        if (height, width) == self.extent() {
            return self.clone();
        }
        let buf = Rgb32FImage::from_raw(self.width as u32, self.height as u32, self.data.clone()).expect("sized by construction");
        let out = imageops::resize(&buf, width as u32, height as u32, filter);
        let mut plane = Self {
            height,
            width,
            data: out.into_raw(),
        };
        plane.clamp_unit();
        plane
    }

    /// Downscales so the long side is at most `cap`, keeping the aspect ratio.
    pub fn fit_long_side(&self, cap: usize) -> ImagePlane {
        let long = self.height.max(self.width);
        if long <= cap {
            return self.clone();
        }
        let s = cap as f64 / long as f64;
        let h = ((self.height as f64 * s).round() as usize).clamp(1, cap);
        let w = ((self.width as f64 * s).round() as usize).clamp(1, cap);
        self.resize(h, w, FilterType::Triangle)
    }

    pub fn max_abs_diff(&self, other: &ImagePlane) -> f32 {
        assert_eq!(self.extent(), other.extent());
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max)
    }

    /// SHA-256 over the extent and raw sample bits.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        h.update((self.height as u64).to_le_bytes());
        h.update((self.width as u64).to_le_bytes());
        for v in &self.data {
            h.update(v.to_le_bytes());
        }
        hex(&h.finalize())
    }

    pub fn from_rgb8(img: &RgbImage) -> Self {
        let (w, h) = img.dimensions();
        let data = img.as_raw().iter().map(|&v| v as f32 / 255.0).collect();
        Self {
            height: h as usize,
            width: w as usize,
            data,
        }
    }

    pub fn to_rgb8(&self) -> RgbImage {
        let raw = self
            .data
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        RgbImage::from_raw(self.width as u32, self.height as u32, raw).expect("sized by construction")
    }

    /// Reads `(height, width)` from an encoded image header without decoding
    /// the pixels.
    pub fn probe_extent(bytes: &[u8]) -> Result<(usize, usize)> {
        let (w, h) = image::ImageReader::new(Cursor::new(bytes))
            .with_guessed_format()
            .map_err(|e| Error::Input(format!("unreadable image: {e}")))?
            .into_dimensions()?;
        Ok((h as usize, w as usize))
    }

    /// Decodes PNG or JPEG bytes.
    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let img = image::load_from_memory(bytes)?;
        Ok(Self::from_rgb8(&img.to_rgb8()))
    }

    pub fn encode_png(&self) -> Result<Vec<u8>> {
        let mut buf = Cursor::new(Vec::new());
        self.to_rgb8().write_to(&mut buf, ImageFormat::Png)?;
        Ok(buf.into_inner())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes)
    }

    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let bytes = self.encode_png()?;
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> ImagePlane {
        ImagePlane::from_fn(5, 7, |y, x| [y as f32 / 4.0, x as f32 / 6.0, 0.25])
    }

    #[test]
    fn tensor_layout_round_trips() {
        let img = sample();
        let t = img.to_tensor();
        assert_eq!(t.at(1, 2, 3), img.pixel(2, 3)[1]);
        assert_eq!(ImagePlane::from_tensor(&t).unwrap(), img);
    }

    #[test]
    fn png_round_trip_is_within_quantization() {
        let img = sample();
        let back = ImagePlane::decode(&img.encode_png().unwrap()).unwrap();
        assert_eq!(back.extent(), img.extent());
        assert!(back.max_abs_diff(&img) <= 0.5 / 255.0 + 1e-6);
    }

    #[test]
    fn crop_bounds_are_checked() {
        let img = sample();
        let c = img.crop(1, 2, 3, 4).unwrap();
        assert_eq!(c.pixel(0, 0), img.pixel(1, 2));
        assert!(img.crop(3, 0, 3, 1).is_err());
    }

    #[test]
    fn hash_depends_on_content() {
        let a = sample();
        let mut b = sample();
        b.set_pixel(0, 0, [1.0, 1.0, 1.0]);
        assert_ne!(a.content_hash(), b.content_hash());
        assert_eq!(a.content_hash(), sample().content_hash());
    }
}
