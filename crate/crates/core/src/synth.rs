//! Procedural images for tests, demos and offline training corpora.
//!
//! Everything here is a pure function of its seed.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::plane::ImagePlane;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15)
}

/// Sum of a few low-frequency colour waves: smooth, band-limited content.
pub fn smooth_photo(height: usize, width: usize, seed: u64) -> ImagePlane {
    let mut r = rng(seed);
    let waves: Vec<([f32; 3], f32, f32, f32)> = (0..6)
        .map(|_| {
            let amp = [r.gen_range(-0.15..0.15), r.gen_range(-0.15..0.15), r.gen_range(-0.15..0.15)];
            let angle = r.gen_range(0.0..std::f32::consts::TAU);
            // At most ~3 cycles across a 100 px image.
            let freq = r.gen_range(0.005..0.03);
            let phase = r.gen_range(0.0..std::f32::consts::TAU);
            (amp, angle, freq, phase)
        })
        .collect();
    let base = [r.gen_range(0.3..0.7), r.gen_range(0.3..0.7), r.gen_range(0.3..0.7)];
    ImagePlane::from_fn(height, width, |y, x| {
        let mut px = base;
        for (amp, angle, freq, phase) in &waves {
            let t = (x as f32 * angle.cos() + y as f32 * angle.sin()) * freq * std::f32::consts::TAU + phase;
            let s = t.sin();
            for c in 0..3 {
                px[c] += amp[c] * s;
            }
        }
        px.map(|v| v.clamp(0.0, 1.0))
    })
}

/// A photo-like scene: smooth background, hard-edged shapes and mild grain.
pub fn scene(height: usize, width: usize, seed: u64) -> ImagePlane {
    let mut img = smooth_photo(height, width, seed);
    let mut r = rng(seed.wrapping_add(1));
    let n_shapes = r.gen_range(3..9);
    let scale = height.min(width) as f32;
    for _ in 0..n_shapes {
        let color = [r.gen::<f32>(), r.gen::<f32>(), r.gen::<f32>()];
        let cy = r.gen_range(0.0..height as f32);
        let cx = r.gen_range(0.0..width as f32);
        let ry = r.gen_range(0.05..0.3) * scale;
        let rx = r.gen_range(0.05..0.3) * scale;
        let disc = r.gen_bool(0.5);
        for y in 0..height {
            for x in 0..width {
                let dy = (y as f32 - cy) / ry;
                let dx = (x as f32 - cx) / rx;
                let inside = if disc { dy * dy + dx * dx <= 1.0 } else { dy.abs() <= 1.0 && dx.abs() <= 1.0 };
                if inside {
                    let old = img.pixel(y, x);
                    img.set_pixel(y, x, [0, 1, 2].map(|c| 0.2 * old[c] + 0.8 * color[c]));
                }
            }
        }
    }
    let grain = 0.02;
    for v in img.data_mut() {
        *v = (*v + r.gen_range(-grain..grain)).clamp(0.0, 1.0);
    }
    img
}

/// A painterly texture of short oriented strokes from a small palette.
pub fn brush_strokes(height: usize, width: usize, seed: u64) -> ImagePlane {
    let mut r = rng(seed.wrapping_add(2));
    let palette: Vec<[f32; 3]> = (0..5)
        .map(|_| [r.gen_range(0.0..1.0), r.gen_range(0.0..1.0), r.gen_range(0.0..1.0)])
        .collect();
    let mut img = ImagePlane::from_fn(height, width, |_, _| palette[0]);
    let area = (height * width) as f32;
    let length = 0.12 * height.min(width) as f32;
    let thickness = (length / 5.0).max(1.5);
    let n = (area / (length * thickness) * 3.0) as usize;
    let base_angle = r.gen_range(0.0..std::f32::consts::PI);
    for _ in 0..n {
        let color = palette[r.gen_range(0..palette.len())];
        let cy = r.gen_range(0.0..height as f32);
        let cx = r.gen_range(0.0..width as f32);
        let angle = base_angle + r.gen_range(-0.4..0.4);
        let (s, c) = angle.sin_cos();
        let half = length / 2.0;
        let reach = half + thickness;
        let y0 = (cy - reach).max(0.0) as usize;
        let y1 = ((cy + reach) as usize).min(height - 1);
        let x0 = (cx - reach).max(0.0) as usize;
        let x1 = ((cx + reach) as usize).min(width - 1);
        let shade = r.gen_range(0.85..1.15);
        for y in y0..=y1 {
            for x in x0..=x1 {
                let dy = y as f32 - cy;
                let dx = x as f32 - cx;
                let along = dx * c + dy * s;
                let across = -dx * s + dy * c;
                if along.abs() <= half && across.abs() <= thickness / 2.0 {
                    img.set_pixel(y, x, color.map(|v| (v * shade).clamp(0.0, 1.0)));
                }
            }
        }
    }
    img
}

/// Writes `count` scene images of `size×size` pixels as PNGs into `dir`.
pub fn write_corpus(dir: impl AsRef<Path>, count: usize, size: usize, seed: u64) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    (0..count)
        .map(|i| {
            let path = dir.join(format!("scene_{i:04}.png"));
            scene(size, size, seed.wrapping_mul(1_000_003).wrapping_add(i as u64)).save_png(&path)?;
            Ok(path)
        })
        .collect()
}
