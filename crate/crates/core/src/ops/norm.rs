//! Conditional instance normalization.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CIN_EPS: f32 = 1e-5;

/// Per-channel spatial mean and `1 / sqrt(var + eps)` (population variance).
fn channel_stats(plane: &[f32]) -> (f32, f32) {
    let n = plane.len() as f64;
    let mean = plane.iter().map(|&v| v as f64).sum::<f64>() / n;
    let var = plane.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
    (mean as f32, (1.0 / (var + CIN_EPS as f64).sqrt()) as f32)
}

fn check(x: &Tensor, gamma: &[f32], beta: &[f32]) -> Result<()> {
    if gamma.len() != x.channels() || beta.len() != x.channels() {
        return Err(Error::Shape(format!(
            "CIN parameters ({} scales, {} shifts) do not match {} channels",
            gamma.len(),
            beta.len(),
            x.channels()
        )));
    }
    if x.plane_len() == 0 {
        return Err(Error::Shape("CIN over an empty spatial extent".into()));
    }
    Ok(())
}

/// `gamma[c] * (x_c - mean(x_c)) / sqrt(var(x_c) + eps) + beta[c]`.
pub fn cin_forward(x: &Tensor, gamma: &[f32], beta: &[f32]) -> Result<Tensor> {
    check(x, gamma, beta)?;
    let mut out = x.clone();
    for c in 0..x.channels() {
        let (mean, inv) = channel_stats(x.plane(c));
        let (g, b) = (gamma[c] * inv, beta[c]);
        out.plane_mut(c).iter_mut().for_each(|v| *v = (*v - mean) * g + b);
    }
    Ok(out)
}

/// State saved by [`cin_forward_cached`] for the backward pass.
#[derive(Debug, Clone)]
pub struct CinCache {
    normalized: Tensor,
    inv_std: Vec<f32>,
}

pub fn cin_forward_cached(x: &Tensor, gamma: &[f32], beta: &[f32]) -> Result<(Tensor, CinCache)> {
    check(x, gamma, beta)?;
    let mut normalized = x.clone();
    let mut inv_std = Vec::with_capacity(x.channels());
    for c in 0..x.channels() {
        let (mean, inv) = channel_stats(x.plane(c));
        normalized.plane_mut(c).iter_mut().for_each(|v| *v = (*v - mean) * inv);
        inv_std.push(inv);
    }
    let mut out = normalized.clone();
    for c in 0..x.channels() {
        let (g, b) = (gamma[c], beta[c]);
        out.plane_mut(c).iter_mut().for_each(|v| *v = *v * g + b);
    }
    Ok((out, CinCache { normalized, inv_std }))
}

/// Returns `(grad_x, grad_gamma, grad_beta)`.
pub fn cin_backward(cache: &CinCache, gamma: &[f32], grad_out: &Tensor) -> (Tensor, Vec<f32>, Vec<f32>) {
    let xhat = &cache.normalized;
    let n = xhat.plane_len() as f64;
    let mut gx = Tensor::zeros(xhat.channels(), xhat.height(), xhat.width());
    let mut g_gamma = Vec::with_capacity(xhat.channels());
    let mut g_beta = Vec::with_capacity(xhat.channels());
    for c in 0..xhat.channels() {
        let g = grad_out.plane(c);
        let xh = xhat.plane(c);
        let sum_g: f64 = g.iter().map(|&v| v as f64).sum();
        let sum_gx: f64 = g.iter().zip(xh).map(|(&a, &b)| (a * b) as f64).sum();
        g_beta.push(sum_g as f32);
        g_gamma.push(sum_gx as f32);
        let scale = gamma[c] * cache.inv_std[c];
        let mean_g = (sum_g / n) as f32;
        let mean_gx = (sum_gx / n) as f32;
        for ((o, &gv), &xv) in gx.plane_mut(c).iter_mut().zip(g).zip(xh) {
            *o = scale * (gv - mean_g - xv * mean_gx);
        }
    }
    (gx, g_gamma, g_beta)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn two_by_two_matches_hand_computation() {
        // Scalar oracle: mean 2.5, population variance 1.25.
        let x = Tensor::from_vec(1, 2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let y = cin_forward(&x, &[2.0], &[1.0]).unwrap();
        let sd = (1.25f64 + 1e-5).sqrt();
        let want: Vec<f64> = [1.0, 2.0, 3.0, 4.0].iter().map(|v| 2.0 * (v - 2.5) / sd + 1.0).collect();
        for (g, w) in y.data().iter().zip(&want) {
            assert!((*g as f64 - w).abs() < 1e-6, "{g} vs {w}");
        }
    }

    #[test]
    fn zero_scale_gives_constant_shift() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = Tensor::from_fn(3, 5, 5, |_, _, _| rng.gen_range(-3.0..3.0));
        let y = cin_forward(&x, &[0.0; 3], &[0.5, -1.0, 2.0]).unwrap();
        for (c, b) in [0.5, -1.0, 2.0].iter().enumerate() {
            assert!(y.plane(c).iter().all(|v| v == b));
        }
    }

    #[test]
    fn constant_channel_is_finite() {
        let x = Tensor::from_vec(1, 2, 2, vec![3.0; 4]).unwrap();
        let y = cin_forward(&x, &[1.0], &[0.0]).unwrap();
        assert!(y.data().iter().all(|v| *v == 0.0));
        let one_px = Tensor::from_vec(2, 1, 1, vec![3.0, -1.0]).unwrap();
        assert!(cin_forward(&one_px, &[1.0, 1.0], &[0.0, 0.0]).unwrap().is_finite());
    }

    #[test]
    fn parameter_length_mismatch() {
        let x = Tensor::zeros(2, 3, 3);
        assert!(matches!(cin_forward(&x, &[1.0], &[0.0, 0.0]), Err(Error::Shape(_))));
    }

    #[test]
    fn cached_path_equals_plain_path() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Tensor::from_fn(2, 4, 6, |_, _, _| rng.gen_range(-1.0..1.0));
        let (a, _) = cin_forward_cached(&x, &[1.5, -0.5], &[0.1, 0.2]).unwrap();
        let b = cin_forward(&x, &[1.5, -0.5], &[0.1, 0.2]).unwrap();
        assert!(a.max_abs_diff(&b) < 1e-6);
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = Tensor::from_fn(2, 3, 4, |_, _, _| rng.gen_range(-1.0..1.0));
        let gy = Tensor::from_fn(2, 3, 4, |_, _, _| rng.gen_range(-1.0..1.0));
        let gamma = [1.3f32, -0.7];
        let beta = [0.2f32, 0.4];
        let objective = |x: &Tensor, gamma: &[f32], beta: &[f32]| -> f64 {
            let y = cin_forward(x, gamma, beta).unwrap();
            y.data().iter().zip(gy.data()).map(|(a, b)| (*a as f64) * (*b as f64)).sum()
        };
        let (_, cache) = cin_forward_cached(&x, &gamma, &beta).unwrap();
        let (gx, gg, gb) = cin_backward(&cache, &gamma, &gy);
        let h = 1e-2f32;
        for i in [0, 5, 11, 17, 23] {
            let mut xp = x.clone();
            xp.data_mut()[i] += h;
            let mut xm = x.clone();
            xm.data_mut()[i] -= h;
            let fd = (objective(&xp, &gamma, &beta) - objective(&xm, &gamma, &beta)) / (2.0 * h as f64);
            assert!((fd - gx.data()[i] as f64).abs() < 2e-3, "x[{i}]: {fd} vs {}", gx.data()[i]);
        }
        let fd_g = (objective(&x, &[gamma[0] + h, gamma[1]], &beta) - objective(&x, &[gamma[0] - h, gamma[1]], &beta)) / (2.0 * h as f64);
        assert!((fd_g - gg[0] as f64).abs() < 1e-3);
        let fd_b = (objective(&x, &gamma, &[beta[0], beta[1] + h]) - objective(&x, &gamma, &[beta[0], beta[1] - h])) / (2.0 * h as f64);
        assert!((fd_b - gb[1] as f64).abs() < 1e-3);
    }
}
