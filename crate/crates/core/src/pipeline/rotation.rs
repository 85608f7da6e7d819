//! Rotation about the image centre into an enlarged, reflection-filled
//! canvas, and its inverse.
//!
//! Quarter turns are exact pixel permutations. Other angles resample
//! bilinearly; canvas pixels whose source lies outside the image take the
//! value mirrored across the (rotated) image border.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::normalize_degrees;
use crate::plane::ImagePlane;
use crate::tensor::Tensor;

/// Geometry of one rotate-and-pad step, needed to invert it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RotationFrame {
    pub tau: f32,
    pub original_extent: (usize, usize),
    pub padded_extent: (usize, usize),
    /// Canvas position (row, col) of the original image's top-left pixel.
    pub offset: (f64, f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum QuarterTurn {
    Zero,
    Ninety,
    OneEighty,
    TwoSeventy,
}

impl RotationFrame {
    pub fn new(tau: f32, (h, w): (usize, usize)) -> Self {
        let tau = normalize_degrees(tau);
        let padded_extent = match quarter_turn(tau) {
            Some(QuarterTurn::Zero) | Some(QuarterTurn::OneEighty) => (h, w),
            Some(QuarterTurn::Ninety) | Some(QuarterTurn::TwoSeventy) => (w, h),
            None => {
                let (s, c) = trig(tau);
                let (s, c) = (s.abs(), c.abs());
                // Bounding box of the rotated rectangle; the epsilon keeps
                // exact integers from rounding up.
                let ph = (h as f64 * c + w as f64 * s - 1e-9).ceil() as usize;
                let pw = (w as f64 * c + h as f64 * s - 1e-9).ceil() as usize;
                (ph, pw)
            }
        };
        let mut frame = Self {
            tau,
            original_extent: (h, w),
            padded_extent,
            offset: (0.0, 0.0),
        };
        frame.offset = frame.to_canvas(0.0, 0.0);
        frame
    }

    pub fn is_identity(&self) -> bool {
        self.tau == 0.0
    }

    fn centers(&self) -> ((f64, f64), (f64, f64)) {
        let (h, w) = self.original_extent;
        let (ph, pw) = self.padded_extent;
        (
            ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0),
            ((ph as f64 - 1.0) / 2.0, (pw as f64 - 1.0) / 2.0),
        )
    }

    /// Maps an original-image coordinate to canvas coordinates.
    pub fn to_canvas(&self, y: f64, x: f64) -> (f64, f64) {
        let ((cy, cx), (cr, cc)) = self.centers();
        let (s, c) = trig(self.tau);
        let (dy, dx) = (y - cy, x - cx);
        (cr + c * dy + s * dx, cc - s * dy + c * dx)
    }

    /// Maps a canvas coordinate back to original-image coordinates.
    pub fn to_source(&self, r: f64, col: f64) -> (f64, f64) {
        let ((cy, cx), (cr, cc)) = self.centers();
        let (s, c) = trig(self.tau);
        let (dr, dc) = (r - cr, col - cc);
        (cy + c * dr - s * dc, cx + s * dr + c * dc)
    }
}

fn quarter_turn(tau: f32) -> Option<QuarterTurn> {
    match tau {
        t if t == 0.0 => Some(QuarterTurn::Zero),
        t if t == 90.0 => Some(QuarterTurn::Ninety),
        t if t == 180.0 => Some(QuarterTurn::OneEighty),
        t if t == 270.0 => Some(QuarterTurn::TwoSeventy),
        _ => None,
    }
}

fn trig(tau: f32) -> (f64, f64) {
    match quarter_turn(tau) {
        Some(QuarterTurn::Zero) => (0.0, 1.0),
        Some(QuarterTurn::Ninety) => (1.0, 0.0),
        Some(QuarterTurn::OneEighty) => (0.0, -1.0),
        Some(QuarterTurn::TwoSeventy) => (-1.0, 0.0),
        None => (tau as f64).to_radians().sin_cos(),
    }
}

/// Mirrors a continuous coordinate into `[0, n-1]`.
fn reflect_coord(v: f64, n: usize) -> f64 {
    if n <= 1 {
        return 0.0;
    }
    let last = (n - 1) as f64;
    let m = v.rem_euclid(2.0 * last);
    if m > last {
        2.0 * last - m
    } else {
        m
    }
}

/// Bilinear taps `(index, weight)` into a `h×w` plane at `(y, x)`, which
/// must already lie inside `[0, h-1]×[0, w-1]`.
fn taps(y: f64, x: f64, h: usize, w: usize) -> [(usize, f32); 4] {
    let y0 = (y.floor() as usize).min(h - 1);
    let x0 = (x.floor() as usize).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    let x1 = (x0 + 1).min(w - 1);
    let fy = (y - y0 as f64) as f32;
    let fx = (x - x0 as f64) as f32;
    [
        (y0 * w + x0, (1.0 - fy) * (1.0 - fx)),
        (y0 * w + x1, (1.0 - fy) * fx),
        (y1 * w + x0, fy * (1.0 - fx)),
        (y1 * w + x1, fy * fx),
    ]
}

fn resample(src: &Tensor, out_extent: (usize, usize), mut coord: impl FnMut(usize, usize) -> (f64, f64)) -> Tensor {
    let (h, w) = src.extent();
    let (oh, ow) = out_extent;
    let table: Vec<[(usize, f32); 4]> = (0..oh * ow)
        .map(|i| {
            let (y, x) = coord(i / ow, i % ow);
            taps(y, x, h, w)
        })
        .collect();
    let mut out = Tensor::zeros(src.channels(), oh, ow);
    for c in 0..src.channels() {
        let s = src.plane(c);
        for (o, t) in out.plane_mut(c).iter_mut().zip(&table) {
            *o = t.iter().map(|&(i, wt)| s[i] * wt).sum();
        }
    }
    out
}

fn permute(src: &Tensor, out_extent: (usize, usize), map: impl Fn(usize, usize) -> (usize, usize)) -> Tensor {
    let (oh, ow) = out_extent;
    Tensor::from_fn(src.channels(), oh, ow, |c, r, col| {
        let (y, x) = map(r, col);
        src.at(c, y, x)
    })
}

/// Rotates every channel of `x` by `tau` degrees into the padded canvas.
pub fn rotate_pad_tensor(x: &Tensor, tau: f32) -> (Tensor, RotationFrame) {
    let frame = RotationFrame::new(tau, x.extent());
    let (h, w) = x.extent();
    let out = match quarter_turn(frame.tau) {
        Some(QuarterTurn::Zero) => x.clone(),
        Some(QuarterTurn::Ninety) => permute(x, (w, h), |r, c| (h - 1 - c, r)),
        Some(QuarterTurn::OneEighty) => permute(x, (h, w), |r, c| (h - 1 - r, w - 1 - c)),
        Some(QuarterTurn::TwoSeventy) => permute(x, (w, h), |r, c| (c, w - 1 - r)),
        None => resample(x, frame.padded_extent, |r, c| {
            let (y, xx) = frame.to_source(r as f64, c as f64);
            (reflect_coord(y, h), reflect_coord(xx, w))
        }),
    };
    (out, frame)
}

/// Inverse of [`rotate_pad_tensor`]: rotates back and crops to the original
/// extent.
pub fn crop_unrotate_tensor(x: &Tensor, frame: &RotationFrame) -> Result<Tensor> {
    if x.extent() != frame.padded_extent {
        return Err(Error::Shape(format!(
            "rotated image is {}x{}, frame expects {}x{}",
            x.height(),
            x.width(),
            frame.padded_extent.0,
            frame.padded_extent.1
        )));
    }
    let (h, w) = frame.original_extent;
    let (ph, pw) = frame.padded_extent;
    Ok(match quarter_turn(frame.tau) {
        Some(QuarterTurn::Zero) => x.clone(),
        Some(QuarterTurn::Ninety) => permute(x, (h, w), |y, xx| (xx, h - 1 - y)),
        Some(QuarterTurn::OneEighty) => permute(x, (h, w), |y, xx| (h - 1 - y, w - 1 - xx)),
        Some(QuarterTurn::TwoSeventy) => permute(x, (h, w), |y, xx| (w - 1 - xx, y)),
        None => resample(x, (h, w), |y, xx| {
            let (r, c) = frame.to_canvas(y as f64, xx as f64);
            (r.clamp(0.0, (ph - 1) as f64), c.clamp(0.0, (pw - 1) as f64))
        }),
    })
}

pub fn rotate_pad(image: &ImagePlane, tau: f32) -> (ImagePlane, RotationFrame) {
    let (t, frame) = rotate_pad_tensor(&image.to_tensor(), tau);
    (ImagePlane::from_tensor(&t).expect("three channels in, three out"), frame)
}

pub fn crop_unrotate(image: &ImagePlane, frame: &RotationFrame) -> Result<ImagePlane> {
    ImagePlane::from_tensor(&crop_unrotate_tensor(&image.to_tensor(), frame)?)
}

/// Peak signal-to-noise ratio in dB for unit-range images.
pub fn psnr(a: &[f32], b: &[f32]) -> f64 {
    assert_eq!(a.len(), b.len());
    let mse = a.iter().zip(b).map(|(x, y)| ((x - y) as f64).powi(2)).sum::<f64>() / a.len() as f64;
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (1.0 / mse).log10()
    }
}

/// The central `fraction` of an image (by side length).
pub fn central_region(image: &ImagePlane, fraction: f64) -> ImagePlane {
    let (h, w) = image.extent();
    let ch = ((h as f64 * fraction).round() as usize).max(1);
    let cw = ((w as f64 * fraction).round() as usize).max(1);
    image.crop((h - ch) / 2, (w - cw) / 2, ch, cw).expect("window inside image")
}
