//! Per-pixel convex weights over stroke levels.
//!
//! Two on-disk encodings are accepted, both 8-bit single channel (colour
//! input is converted to luma):
//!
//! * a **label map**: one image whose pixel value is the level index;
//! * **weight planes**: one image per level whose values are relative
//!   weights, renormalized per pixel on load.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Pixels whose total weight falls below this are reset to uniform weights.
pub const DEGENERATE_SUM: f32 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct LevelMask {
    weights: Tensor,
}

impl LevelMask {
    /// Wraps raw non-negative weights (`L×H×W`) and renormalizes them.
    pub fn from_weights(weights: Tensor) -> Result<Self> {
        if weights.channels() == 0 {
            return Err(Error::Shape("a level mask needs at least one level".into()));
        }
        if weights.data().iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::Input("mask weights must be finite and non-negative".into()));
        }
        let mut m = Self { weights };
        m.normalize();
        Ok(m)
    }

    /// All weight on level `k`.
    pub fn one_hot(levels: usize, k: usize, height: usize, width: usize) -> Result<Self> {
        if k >= levels {
            return Err(Error::Shape(format!("level {k} out of range for {levels} levels")));
        }
        Ok(Self {
            weights: Tensor::from_fn(levels, height, width, |c, _, _| if c == k { 1.0 } else { 0.0 }),
        })
    }

    pub fn uniform(levels: usize, height: usize, width: usize) -> Self {
        Self {
            weights: Tensor::from_fn(levels, height, width, |_, _, _| 1.0 / levels as f32),
        }
    }

    /// Builds a mask from a per-pixel level index.
    pub fn from_labels(labels: &[u8], levels: usize, height: usize, width: usize) -> Result<Self> {
        if labels.len() != height * width {
            return Err(Error::Shape(format!(
                "label map has {} pixels, expected {height}x{width}",
                labels.len()
            )));
        }
        if let Some(bad) = labels.iter().find(|&&l| l as usize >= levels) {
            return Err(Error::Shape(format!(
                "label map references level {bad} but only {levels} levels exist"
            )));
        }
        let n = height * width;
        let mut t = Tensor::zeros(levels, height, width);
        for (i, &l) in labels.iter().enumerate() {
            t.data_mut()[l as usize * n + i] = 1.0;
        }
        Ok(Self { weights: t })
    }

    /// Decodes a label-map image (PNG or JPEG bytes).
    pub fn decode_labels(bytes: &[u8], levels: usize) -> Result<Self> {
        let img = image::load_from_memory(bytes)?.to_luma8();
        let (w, h) = img.dimensions();
        Self::from_labels(img.as_raw(), levels, h as usize, w as usize)
    }

    /// Decodes one weight-plane image per level.
    pub fn decode_planes(planes: &[Vec<u8>]) -> Result<Self> {
        let mut extent = None;
        let mut data = Vec::new();
        for bytes in planes {
            let img = image::load_from_memory(bytes)?.to_luma8();
            let (w, h) = img.dimensions();
            match extent {
                None => extent = Some((h as usize, w as usize)),
                Some(e) if e != (h as usize, w as usize) => {
                    return Err(Error::Shape("mask planes differ in size".into()));
                }
                _ => {}
            }
            data.extend(img.as_raw().iter().map(|&v| v as f32 / 255.0));
        }
        let (h, w) = extent.ok_or_else(|| Error::Shape("no mask planes given".into()))?;
        Self::from_weights(Tensor::from_vec(planes.len(), h, w, data)?)
    }

    /// Loads a mask file list: one path is a label map, several are planes.
    pub fn load(paths: &[impl AsRef<Path>], levels: usize) -> Result<Self> {
        let read = |p: &Path| std::fs::read(p).map_err(|e| Error::io(p, e));
        match paths {
            [] => Err(Error::Input("no mask file given".into())),
            [one] => Self::decode_labels(&read(one.as_ref())?, levels),
            many => {
                if many.len() != levels {
                    return Err(Error::Shape(format!(
                        "{} mask planes given for {levels} levels",
                        many.len()
                    )));
                }
                let bytes = many.iter().map(|p| read(p.as_ref())).collect::<Result<Vec<_>>>()?;
                Self::decode_planes(&bytes)
            }
        }
    }

    pub fn levels(&self) -> usize {
        self.weights.channels()
    }

    pub fn extent(&self) -> (usize, usize) {
        self.weights.extent()
    }

    pub fn weights(&self) -> &Tensor {
        &self.weights
    }

    pub fn plane(&self, level: usize) -> &[f32] {
        self.weights.plane(level)
    }

    /// Rescales every pixel to unit total weight; pixels with (near) zero
    /// total become uniform.
    pub fn normalize(&mut self) {
        let levels = self.levels();
        let n = self.weights.plane_len();
        let data = self.weights.data_mut();
        for i in 0..n {
            let sum: f32 = (0..levels).map(|l| data[l * n + i]).sum();
            if sum < DEGENERATE_SUM {
                (0..levels).for_each(|l| data[l * n + i] = 1.0 / levels as f32);
            } else if sum != 1.0 {
                (0..levels).for_each(|l| data[l * n + i] /= sum);
            }
        }
    }

    /// Largest deviation of a per-pixel weight sum from one.
    pub fn max_sum_error(&self) -> f32 {
        let n = self.weights.plane_len();
        (0..n)
            .map(|i| {
                let s: f32 = (0..self.levels()).map(|l| self.weights.data()[l * n + i]).sum();
                (s - 1.0).abs()
            })
            .fold(0.0, f32::max)
    }
}
