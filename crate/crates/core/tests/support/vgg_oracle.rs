//! Double-precision reimplementation of the truncated VGG-19 and the
//! perceptual loss, used as a finite-difference oracle.

use brushwork::loss::{Vgg19, IMAGENET_MEAN, IMAGENET_STD};
use brushwork::Tensor;

/// `c × h × w` in f64.
#[derive(Clone)]
pub struct T {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub d: Vec<f64>,
}

pub struct Oracle {
    /// (weight, bias, in, out, pool after, tap slot)
    layers: Vec<(Vec<f64>, Vec<f64>, usize, usize, bool, Option<usize>)>,
}

impl Oracle {
    pub fn new(vgg: &Vgg19) -> Self {
        let named = vgg.named_tensors();
        let pools = [false, true, false, true, false, false, false, true, false, false, false, true, false];
        let taps = [Some(0), None, Some(1), None, Some(2), None, None, None, Some(3), Some(4), None, None, Some(5)];
        let layers = named
            .chunks(2)
            .enumerate()
            .map(|(i, pair)| {
                let (_, shape, w) = &pair[0];
                let (_, _, b) = &pair[1];
                (
                    w.iter().map(|&v| v as f64).collect(),
                    b.iter().map(|&v| v as f64).collect(),
                    shape[1],
                    shape[0],
                    pools[i],
                    taps[i],
                )
            })
            .collect();
        Self { layers }
    }

    fn conv_relu(x: &T, w: &[f64], b: &[f64], out: usize) -> T {
        let (h, wd) = (x.h, x.w);
        let n = h * wd;
        let mut y = vec![0.0; out * n];
        for o in 0..out {
            let acc = &mut y[o * n..(o + 1) * n];
            acc.fill(b[o]);
            for i in 0..x.c {
                let src = &x.d[i * n..(i + 1) * n];
                for ky in 0..3 {
                    for kx in 0..3 {
                        let k = w[((o * x.c + i) * 3 + ky) * 3 + kx];
                        // Output rows/cols whose source (yy+ky-1, xx+kx-1) is in range.
                        let y0 = 1usize.saturating_sub(ky);
                        let y1 = (h + 1 - ky).min(h);
                        let x0 = 1usize.saturating_sub(kx);
                        let x1 = (wd + 1 - kx).min(wd);
                        for yy in y0..y1 {
                            let sy = yy + ky - 1;
                            let row = &src[sy * wd + x0 + kx - 1..sy * wd + x1 + kx - 1];
                            for (a, s) in acc[yy * wd + x0..yy * wd + x1].iter_mut().zip(row) {
                                *a += k * s;
                            }
                        }
                    }
                }
            }
            acc.iter_mut().for_each(|v| *v = v.max(0.0));
        }
        T { c: out, h, w: wd, d: y }
    }

    fn pool(x: &T) -> T {
        let (h, w) = (x.h / 2, x.w / 2);
        let mut d = vec![0.0; x.c * h * w];
        for c in 0..x.c {
            for y in 0..h {
                for xx in 0..w {
                    let at = |dy: usize, dx: usize| x.d[(c * x.h + 2 * y + dy) * x.w + 2 * xx + dx];
                    d[(c * h + y) * w + xx] = at(0, 0).max(at(0, 1)).max(at(1, 0)).max(at(1, 1));
                }
            }
        }
        T { c: x.c, h, w, d }
    }

    pub fn taps(&self, img: &T) -> Vec<T> {
        let mut x = img.clone();
        for c in 0..3 {
            for v in &mut x.d[c * x.h * x.w..(c + 1) * x.h * x.w] {
                *v = (*v - IMAGENET_MEAN[c] as f64) / IMAGENET_STD[c] as f64;
            }
        }
        let mut taps = vec![None; 6];
        for (w, b, _, out, pool, tap) in &self.layers {
            x = Self::conv_relu(&x, w, b, *out);
            if let Some(t) = tap {
                taps[*t] = Some(x.clone());
            }
            if *pool {
                x = Self::pool(&x);
            }
        }
        taps.into_iter().map(Option::unwrap).collect()
    }

    pub fn gram(f: &T) -> Vec<f64> {
        let n = f.h * f.w;
        let mut g = vec![0.0; f.c * f.c];
        for i in 0..f.c {
            for j in 0..f.c {
                let s: f64 = (0..n).map(|p| f.d[i * n + p] * f.d[j * n + p]).sum();
                g[i * f.c + j] = s / (f.c * n) as f64;
            }
        }
        g
    }

    pub fn loss(&self, img: &T, content: &[T], style_grams: &[Vec<f64>], lambda_i: f64, cw: f64) -> f64 {
        let t = self.taps(img);
        let content_term = {
            let (a, b) = (&t[4].d, &content[4].d);
            a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.len() as f64
        };
        let style_term: f64 = [0, 1, 2, 3, 5]
            .iter()
            .zip(style_grams)
            .map(|(&l, r)| {
                let g = Self::gram(&t[l]);
                g.iter().zip(r).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / g.len() as f64
            })
            .sum();
        cw * content_term + lambda_i * style_term
    }
}

pub fn to_t(x: &Tensor) -> T {
    T {
        c: x.channels(),
        h: x.height(),
        w: x.width(),
        d: x.data().iter().map(|&v| v as f64).collect(),
    }
}

/// Oracle inputs for one (content, style) pair.
pub struct Problem {
    pub oracle: Oracle,
    pub content_taps: Vec<T>,
    pub style_grams: Vec<Vec<f64>>,
}

impl Problem {
    pub fn new(vgg: &Vgg19, content: &Tensor, style: &Tensor) -> Self {
        let oracle = Oracle::new(vgg);
        let content_taps = oracle.taps(&to_t(content));
        let t = oracle.taps(&to_t(style));
        let style_grams = [0, 1, 2, 3, 5].iter().map(|&l| Oracle::gram(&t[l])).collect();
        Self {
            oracle,
            content_taps,
            style_grams,
        }
    }

    pub fn loss(&self, x: &T, lambda_i: f64, content_weight: f64) -> f64 {
        self.oracle
            .loss(x, &self.content_taps, &self.style_grams, lambda_i, content_weight)
    }

    /// Norm-wise relative error of `analytic` against central differences
    /// with step `h` at the given flat coordinates.
    pub fn gradient_error(
        &self,
        x: &Tensor,
        analytic: &Tensor,
        coords: &[usize],
        h: f64,
        lambda_i: f64,
        content_weight: f64,
    ) -> f64 {
        let (mut err, mut norm) = (0.0f64, 0.0f64);
        for &i in coords {
            let at = |sign: f64| {
                let mut t = to_t(x);
                t.d[i] += sign * h;
                self.loss(&t, lambda_i, content_weight)
            };
            let numeric = (at(1.0) - at(-1.0)) / (2.0 * h);
            err += (numeric - analytic.data()[i] as f64).powi(2);
            norm += numeric.powi(2);
        }
        (err / norm).sqrt()
    }
}
