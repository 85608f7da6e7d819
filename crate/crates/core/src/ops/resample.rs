//! Separable resampling: bilinear (antialiased when shrinking) and nearest ×2.

use crate::tensor::Tensor;

/// Per-output-sample taps along one axis.
#[derive(Debug, Clone)]
struct AxisTaps {
    taps: Vec<Vec<(usize, f32)>>,
}

impl AxisTaps {
    /// Half-pixel-centred linear filter. When shrinking, the triangle is
    /// widened by the scale factor so it integrates over every covered source
    /// sample; taps falling outside the source are dropped and the rest
    /// renormalized.
    fn bilinear(src: usize, dst: usize, antialias: bool) -> Self {
        if src == dst {
            return Self {
                taps: (0..dst).map(|i| vec![(i, 1.0)]).collect(),
            };
        }
        let scale = src as f64 / dst as f64;
        let support = if antialias && scale > 1.0 { scale } else { 1.0 };
        let taps = (0..dst)
            .map(|o| {
                let mut center = (o as f64 + 0.5) * scale - 0.5;
                if support == 1.0 {
                    center = center.clamp(0.0, (src - 1) as f64);
                }
                let lo = (center - support).floor().max(0.0) as usize;
                let hi = ((center + support).ceil() as usize).min(src - 1);
                let mut row: Vec<(usize, f64)> = (lo..=hi)
                    .map(|j| (j, 1.0 - (j as f64 - center).abs() / support))
                    .filter(|(_, w)| *w > 0.0)
                    .collect();
                let total: f64 = row.iter().map(|(_, w)| w).sum();
                if total <= 0.0 {
                    row = vec![(center.round().clamp(0.0, (src - 1) as f64) as usize, 1.0)];
                } else {
                    row.iter_mut().for_each(|(_, w)| *w /= total);
                }
                row.into_iter().map(|(j, w)| (j, w as f32)).collect()
            })
            .collect();
        Self { taps }
    }
}

/// A precomputed linear resize operator between two extents.
#[derive(Debug, Clone)]
pub struct Resize {
    src: (usize, usize),
    dst: (usize, usize),
    rows: AxisTaps,
    cols: AxisTaps,
}

impl Resize {
    /// Bilinear resize; `antialias` widens the filter on shrinking axes.
    pub fn bilinear(src: (usize, usize), dst: (usize, usize), antialias: bool) -> Self {
        Self {
            src,
            dst,
            rows: AxisTaps::bilinear(src.0, dst.0, antialias),
            cols: AxisTaps::bilinear(src.1, dst.1, antialias),
        }
    }

    pub fn is_identity(&self) -> bool {
        self.src == self.dst
    }

    pub fn dst(&self) -> (usize, usize) {
        self.dst
    }

    pub fn apply(&self, x: &Tensor) -> Tensor {
        assert_eq!(x.extent(), self.src, "resize source extent");
        if self.is_identity() {
            return x.clone();
        }
        let (sh, sw) = self.src;
        let (dh, dw) = self.dst;
        let mut out = Tensor::zeros(x.channels(), dh, dw);
        let mut tmp = vec![0.0f32; sh * dw];
        for c in 0..x.channels() {
            let src = x.plane(c);
            for y in 0..sh {
                let row = &src[y * sw..(y + 1) * sw];
                for (ox, taps) in self.cols.taps.iter().enumerate() {
                    tmp[y * dw + ox] = taps.iter().map(|&(j, w)| row[j] * w).sum();
                }
            }
            let dst = out.plane_mut(c);
            for (oy, taps) in self.rows.taps.iter().enumerate() {
                let out_row = &mut dst[oy * dw..(oy + 1) * dw];
                for &(j, w) in taps {
                    let src_row = &tmp[j * dw..(j + 1) * dw];
                    out_row.iter_mut().zip(src_row).for_each(|(o, s)| *o += w * s);
                }
            }
        }
        out
    }

    /// Transpose of [`Resize::apply`], used for backpropagation.
    pub fn adjoint(&self, g: &Tensor) -> Tensor {
        assert_eq!(g.extent(), self.dst, "resize adjoint extent");
        if self.is_identity() {
            return g.clone();
        }
        let (sh, sw) = self.src;
        let dw = self.dst.1;
        let mut out = Tensor::zeros(g.channels(), sh, sw);
        let mut tmp = vec![0.0f32; sh * dw];
        for c in 0..g.channels() {
            tmp.fill(0.0);
            let src = g.plane(c);
            for (oy, taps) in self.rows.taps.iter().enumerate() {
                let g_row = &src[oy * dw..(oy + 1) * dw];
                for &(j, w) in taps {
                    tmp[j * dw..(j + 1) * dw]
                        .iter_mut()
                        .zip(g_row)
                        .for_each(|(t, s)| *t += w * s);
                }
            }
            let dst = out.plane_mut(c);
            for y in 0..sh {
                let t_row = &tmp[y * dw..(y + 1) * dw];
                for (ox, taps) in self.cols.taps.iter().enumerate() {
                    for &(j, w) in taps {
                        dst[y * sw + j] += w * t_row[ox];
                    }
                }
            }
        }
        out
    }
}

/// Extent of an image shrunk by `factor` (at least 1×1).
pub fn scaled_extent((h, w): (usize, usize), factor: f32) -> (usize, usize) {
    let f = factor as f64;
    (
        ((h as f64 / f).round() as usize).max(1),
        ((w as f64 / f).round() as usize).max(1),
    )
}

pub fn upsample_nearest2(x: &Tensor) -> Tensor {
    let (h, w) = x.extent();
    let mut out = Tensor::zeros(x.channels(), 2 * h, 2 * w);
    for c in 0..x.channels() {
        let src = x.plane(c);
        let dst = out.plane_mut(c);
        for y in 0..2 * h {
            let s = &src[(y / 2) * w..(y / 2 + 1) * w];
            let d = &mut dst[y * 2 * w..(y + 1) * 2 * w];
            for (x, v) in d.iter_mut().enumerate() {
                *v = s[x / 2];
            }
        }
    }
    out
}

pub fn upsample_nearest2_backward(g: &Tensor) -> Tensor {
    let (h, w) = (g.height() / 2, g.width() / 2);
    let mut out = Tensor::zeros(g.channels(), h, w);
    for c in 0..g.channels() {
        let src = g.plane(c);
        let dst = out.plane_mut(c);
        for y in 0..2 * h {
            for x in 0..2 * w {
                dst[(y / 2) * w + x / 2] += src[y * 2 * w + x];
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(c: usize, h: usize, w: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(c, h, w, |_, _, _| rng.gen_range(-1.0..1.0))
    }

    fn dot(a: &Tensor, b: &Tensor) -> f64 {
        a.data().iter().zip(b.data()).map(|(x, y)| (*x as f64) * (*y as f64)).sum()
    }

    #[test]
    fn same_extent_is_identity() {
        let x = random(2, 9, 7, 1);
        let r = Resize::bilinear((9, 7), (9, 7), true);
        assert_eq!(r.apply(&x), x);
    }

    #[test]
    fn rows_of_taps_sum_to_one() {
        for (s, d) in [(10, 3), (3, 10), (256, 171), (7, 1), (1, 5)] {
            for aa in [false, true] {
                let t = AxisTaps::bilinear(s, d, aa);
                for row in &t.taps {
                    let sum: f32 = row.iter().map(|(_, w)| w).sum();
                    assert!((sum - 1.0).abs() < 1e-5);
                    assert!(row.iter().all(|(j, _)| *j < s));
                }
            }
        }
    }

    #[test]
    fn constant_image_stays_constant() {
        let x = Tensor::from_fn(1, 12, 8, |_, _, _| 0.3);
        for dst in [(3, 2), (24, 16), (5, 13)] {
            let y = Resize::bilinear((12, 8), dst, true).apply(&x);
            assert!(y.data().iter().all(|v| (v - 0.3).abs() < 1e-6));
        }
    }

    #[test]
    fn antialiased_halving_averages_pairs() {
        // A factor-2 triangle with half-pixel centres spans exactly the two
        // covered samples plus half-weight neighbours.
        let x = Tensor::from_vec(1, 1, 4, vec![0.0, 1.0, 0.0, 1.0]).unwrap();
        let y = Resize::bilinear((1, 4), (1, 2), false).apply(&x);
        assert!((y.data()[0] - 0.5).abs() < 1e-6);
        let alt = Tensor::from_fn(1, 8, 8, |_, y, x| ((x + y) % 2) as f32);
        let smooth = Resize::bilinear((8, 8), (2, 2), true).apply(&alt);
        assert!(smooth.data().iter().all(|v| (v - 0.5).abs() < 0.1));
    }

    #[test]
    fn adjoint_identity_holds() {
        for (src, dst, aa) in [((9, 7), (4, 3), true), ((4, 5), (16, 11), false), ((6, 6), (6, 6), false)] {
            let r = Resize::bilinear(src, dst, aa);
            let x = random(2, src.0, src.1, 2);
            let g = random(2, dst.0, dst.1, 3);
            assert!((dot(&r.apply(&x), &g) - dot(&x, &r.adjoint(&g))).abs() < 1e-4);
        }
    }

    #[test]
    fn nearest_backward_is_adjoint() {
        let x = random(3, 4, 5, 4);
        let g = random(3, 8, 10, 5);
        let up = upsample_nearest2(&x);
        assert_eq!(up.at(1, 5, 7), x.at(1, 2, 3));
        assert!((dot(&up, &g) - dot(&x, &upsample_nearest2_backward(&g))).abs() < 1e-4);
    }

    #[test]
    fn scaled_extent_rounds() {
        assert_eq!(scaled_extent((256, 256), 1.5), (171, 171));
        assert_eq!(scaled_extent((16, 16), 8.0), (2, 2));
        assert_eq!(scaled_extent((5, 3), 8.0), (1, 1));
    }
}
