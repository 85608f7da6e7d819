//! Dense channel-major feature maps.

use crate::error::{Error, Result};

/// A `C×H×W` array of `f32`, stored channel-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl Tensor {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![0.0; channels * height * width],
        }
    }

    pub fn from_vec(channels: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(Error::Shape(format!(
                "{} values cannot fill a {channels}x{height}x{width} tensor",
                data.len()
            )));
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn from_fn(
        channels: usize,
        height: usize,
        width: usize,
        mut f: impl FnMut(usize, usize, usize) -> f32,
    ) -> Self {
        let mut data = Vec::with_capacity(channels * height * width);
        for c in 0..channels {
            for y in 0..height {
                for x in 0..width {
                    data.push(f(c, y, x));
                }
            }
        }
        Self {
            channels,
            height,
            width,
            data,
        }
    }

    #[inline]
    pub fn channels(&self) -> usize {
        self.channels
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    /// `(height, width)`
    #[inline]
    pub fn extent(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    #[inline]
    pub fn plane_len(&self) -> usize {
        self.height * self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.data
    }

    pub fn plane(&self, c: usize) -> &[f32] {
        let n = self.plane_len();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn plane_mut(&mut self, c: usize) -> &mut [f32] {
        let n = self.plane_len();
        &mut self.data[c * n..(c + 1) * n]
    }

    #[inline]
    pub fn at(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn at_mut(&mut self, c: usize, y: usize, x: usize) -> &mut f32 {
        &mut self.data[(c * self.height + y) * self.width + x]
    }

    pub fn same_shape(&self, other: &Tensor) -> bool {
        self.channels == other.channels && self.height == other.height && self.width == other.width
    }

    pub fn shape_str(&self) -> String {
        format!("{}x{}x{}", self.channels, self.height, self.width)
    }

    pub fn map_inplace(&mut self, f: impl Fn(f32) -> f32) {
        self.data.iter_mut().for_each(|v| *v = f(*v));
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        debug_assert!(self.same_shape(other));
        self.data
            .iter_mut()
            .zip(&other.data)
            .for_each(|(a, b)| *a += b);
    }

    pub fn scale(&mut self, s: f32) {
        self.data.iter_mut().for_each(|v| *v *= s);
    }

    /// Stacks tensors of equal extent along the channel axis.
    pub fn concat(parts: &[&Tensor]) -> Result<Tensor> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Shape("cannot concatenate zero tensors".into()))?;
        let (h, w) = first.extent();
        let mut channels = 0;
        for p in parts {
            if p.extent() != (h, w) {
                return Err(Error::Shape(format!(
                    "concat extent {}x{} vs {}x{}",
                    h,
                    w,
                    p.height(),
                    p.width()
                )));
            }
            channels += p.channels();
        }
        let mut data = Vec::with_capacity(channels * h * w);
        for p in parts {
            data.extend_from_slice(&p.data);
        }
        Tensor::from_vec(channels, h, w, data)
    }

    /// Splits along the channel axis at `at`.
    pub fn split_channels(&self, at: usize) -> (Tensor, Tensor) {
        assert!(at <= self.channels);
        let n = self.plane_len();
        let a = Tensor {
            channels: at,
            height: self.height,
            width: self.width,
            data: self.data[..at * n].to_vec(),
        };
        let b = Tensor {
            channels: self.channels - at,
            height: self.height,
            width: self.width,
            data: self.data[at * n..].to_vec(),
        };
        (a, b)
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f32 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Feature map produced by the encoder, optionally tagged with the stroke
/// level it was computed for.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureTensor {
    pub data: Tensor,
    pub level_tag: Option<usize>,
}

impl FeatureTensor {
    pub fn new(data: Tensor) -> Self {
        Self {
            data,
            level_tag: None,
        }
    }

    pub fn tagged(data: Tensor, level: usize) -> Self {
        Self {
            data,
            level_tag: Some(level),
        }
    }

    pub fn extent(&self) -> (usize, usize) {
        self.data.extent()
    }

    pub fn channels(&self) -> usize {
        self.data.channels()
    }
}
