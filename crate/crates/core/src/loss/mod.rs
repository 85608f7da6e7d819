//! Perceptual features, Gram matrices and the style/content losses.

mod vgg;

use serde::{Deserialize, Serialize};

pub use vgg::{ExtractorSource, Vgg19, IMAGENET_MEAN, IMAGENET_STD, LAYER_NAMES, WEIGHTS_ENV};

use crate::error::{Error, Result};
use crate::plane::ImagePlane;
use crate::tensor::Tensor;

/// Indices into [`PerceptualFeatures::layers`] used for the style term.
pub const STYLE_LAYERS: [usize; 5] = [0, 1, 2, 3, 5];
/// Index of `relu4_2`.
pub const CONTENT_LAYER: usize = 4;

/// Activations at `relu1_1, relu2_1, relu3_1, relu4_1, relu4_2, relu5_1`.
#[derive(Debug, Clone, PartialEq)]
pub struct PerceptualFeatures {
    pub layers: [Tensor; 6],
}

impl PerceptualFeatures {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        LAYER_NAMES.iter().position(|n| *n == name).map(|i| &self.layers[i])
    }

    pub fn content(&self) -> &Tensor {
        &self.layers[CONTENT_LAYER]
    }
}

/// `C×C` Gram matrix of one layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GramMatrix {
    pub channels: usize,
    pub data: Vec<f32>,
    pub layer: String,
}

impl GramMatrix {
    pub fn at(&self, i: usize, j: usize) -> f32 {
        self.data[i * self.channels + j]
    }
}

/// `G = F·Fᵀ / (C·H·W)` with `F` the `C×(H·W)` flattening.
pub fn gram(f: &Tensor) -> GramMatrix {
    gram_named(f, "")
}

fn gram_named(f: &Tensor, layer: &str) -> GramMatrix {
    let c = f.channels();
    let n = f.plane_len();
    let mut g = vec![0.0f32; c * c];
    if c > 0 && n > 0 {
        let alpha = 1.0 / (c * n) as f32;
        // SAFETY: strides describe `F` (c×n row-major), its transpose, and
        // the c×c output, all within the slices' bounds.
        unsafe {
            matrixmultiply::sgemm(
                c,
                n,
                c,
                alpha,
                f.data().as_ptr(),
                n as isize,
                1,
                f.data().as_ptr(),
                1,
                n as isize,
                0.0,
                g.as_mut_ptr(),
                c as isize,
                1,
            );
        }
        for i in 0..c {
            for j in 0..i {
                g[i * c + j] = g[j * c + i];
            }
        }
    }
    GramMatrix {
        channels: c,
        data: g,
        layer: layer.to_string(),
    }
}

/// Reference Grams for the five style layers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StyleReference {
    pub grams: Vec<GramMatrix>,
}

impl StyleReference {
    pub fn from_features(f: &PerceptualFeatures) -> Self {
        Self {
            grams: STYLE_LAYERS
                .iter()
                .map(|&l| gram_named(&f.layers[l], LAYER_NAMES[l]))
                .collect(),
        }
    }

    pub fn from_image(vgg: &Vgg19, style: &ImagePlane) -> Result<Self> {
        Ok(Self::from_features(&vgg.extract(style)?))
    }
}

fn check_reference(style_ref: &StyleReference) -> Result<()> {
    let ok = style_ref.grams.len() == STYLE_LAYERS.len()
        && style_ref
            .grams
            .iter()
            .zip(STYLE_LAYERS)
            .all(|(g, l)| g.layer == LAYER_NAMES[l]);
    if ok {
        Ok(())
    } else {
        let got: Vec<_> = style_ref.grams.iter().map(|g| g.layer.as_str()).collect();
        Err(Error::Config(format!("style reference layers {got:?} do not match the style layers")))
    }
}

/// Mean squared difference between two equally sized matrices.
fn gram_mse(a: &GramMatrix, b: &GramMatrix) -> Result<f64> {
    if a.channels != b.channels {
        return Err(Error::Config(format!(
            "{} Gram has {} channels, reference has {}",
            a.layer, a.channels, b.channels
        )));
    }
    let s: f64 = a.data.iter().zip(&b.data).map(|(x, y)| ((x - y) as f64).powi(2)).sum();
    Ok(s / a.data.len().max(1) as f64)
}

/// Per-layer style losses.
pub fn style_loss_layers(target: &PerceptualFeatures, style_ref: &StyleReference) -> Result<Vec<f64>> {
    check_reference(style_ref)?;
    STYLE_LAYERS
        .iter()
        .zip(&style_ref.grams)
        .map(|(&l, r)| gram_mse(&gram_named(&target.layers[l], LAYER_NAMES[l]), r))
        .collect()
}

/// Sum over style layers of the mean squared Gram difference.
pub fn style_loss(target: &PerceptualFeatures, style_ref: &StyleReference) -> Result<f64> {
    Ok(style_loss_layers(target, style_ref)?.iter().sum())
}

/// Mean squared difference at `relu4_2`.
pub fn content_loss(target: &PerceptualFeatures, content: &PerceptualFeatures) -> Result<f64> {
    let (a, b) = (target.content(), content.content());
    if !a.same_shape(b) {
        return Err(Error::Shape(format!(
            "content layers differ: {} vs {}",
            a.shape_str(),
            b.shape_str()
        )));
    }
    let s: f64 = a.data().iter().zip(b.data()).map(|(x, y)| ((x - y) as f64).powi(2)).sum();
    Ok(s / a.data().len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub content: f64,
    pub style: f64,
    pub content_weight: f64,
    pub style_weight: f64,
    pub total: f64,
}

impl LossBreakdown {
    fn new(content: f64, style: f64, content_weight: f32, lambda_i: f32) -> Self {
        let (cw, sw) = (content_weight as f64, lambda_i as f64);
        Self {
            content,
            style,
            content_weight: cw,
            style_weight: sw,
            total: cw * content + sw * style,
        }
    }
}

fn check_weights(lambda_i: f32, content_weight: f32) -> Result<()> {
    if !(lambda_i >= 0.0 && lambda_i.is_finite()) {
        return Err(Error::parameter("lambda_i", "loss weight must be finite and non-negative"));
    }
    if !(content_weight >= 0.0 && content_weight.is_finite()) {
        return Err(Error::parameter("content_weight", "loss weight must be finite and non-negative"));
    }
    Ok(())
}

/// `content_weight·content + λI·style` for an output image.
pub fn total_loss(
    vgg: &Vgg19,
    output: &ImagePlane,
    content: &ImagePlane,
    style_ref: &StyleReference,
    lambda_i: f32,
    content_weight: f32,
) -> Result<LossBreakdown> {
    check_weights(lambda_i, content_weight)?;
    let t = vgg.extract(output)?;
    let c = vgg.extract(content)?;
    Ok(LossBreakdown::new(
        content_loss(&t, &c)?,
        style_loss(&t, style_ref)?,
        content_weight,
        lambda_i,
    ))
}

/// Loss and its gradient with respect to the output image tensor, given
/// precomputed content features.
pub fn total_loss_grad(
    vgg: &Vgg19,
    output: &Tensor,
    content: &PerceptualFeatures,
    style_ref: &StyleReference,
    lambda_i: f32,
    content_weight: f32,
) -> Result<(LossBreakdown, Tensor)> {
    check_weights(lambda_i, content_weight)?;
    check_reference(style_ref)?;
    let (taps, trace) = vgg.forward_trace(output)?;
    let target = PerceptualFeatures { layers: taps };
    let cl = content_loss(&target, content)?;
    let mut sl = 0.0;
    let mut grads: [Option<Tensor>; 6] = Default::default();

    for (&l, r) in STYLE_LAYERS.iter().zip(&style_ref.grams) {
        let f = &target.layers[l];
        let g = gram_named(f, LAYER_NAMES[l]);
        sl += gram_mse(&g, r)?;
        if lambda_i == 0.0 {
            continue;
        }
        // d/dF of mean((G-R)²) = 2k·(2(G-R)/C²)·F, with G = k·F·Fᵀ.
        let c = f.channels();
        let n = f.plane_len();
        let k = 1.0 / (c * n) as f64;
        let scale = (lambda_i as f64 * 4.0 * k / (c * c) as f64) as f32;
        let diff: Vec<f32> = g.data.iter().zip(&r.data).map(|(a, b)| a - b).collect();
        let mut df = Tensor::zeros(c, f.height(), f.width());
        // SAFETY: c×c times c×n into c×n, contiguous row-major buffers.
        unsafe {
            matrixmultiply::sgemm(
                c,
                c,
                n,
                scale,
                diff.as_ptr(),
                c as isize,
                1,
                f.data().as_ptr(),
                n as isize,
                1,
                0.0,
                df.data_mut().as_mut_ptr(),
                n as isize,
                1,
            );
        }
        grads[l] = Some(df);
    }

    if content_weight != 0.0 {
        let (a, b) = (target.content(), content.content());
        let s = 2.0 * content_weight / a.data().len() as f32;
        let mut d = a.clone();
        d.data_mut().iter_mut().zip(b.data()).for_each(|(x, y)| *x = s * (*x - y));
        grads[CONTENT_LAYER] = Some(match grads[CONTENT_LAYER].take() {
            Some(mut g) => {
                g.add_assign(&d);
                g
            }
            None => d,
        });
    }

    let breakdown = LossBreakdown::new(cl, sl, content_weight, lambda_i);
    let grad = if grads.iter().all(Option::is_none) {
        Tensor::zeros(3, output.height(), output.width())
    } else {
        vgg.backward(&trace, grads)?
    };
    Ok((breakdown, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth;

    fn naive_gram(f: &Tensor) -> Vec<f64> {
        let (c, n) = (f.channels(), f.plane_len());
        let mut g = vec![0.0; c * c];
        for i in 0..c {
            for j in 0..c {
                let mut s = 0.0f64;
                for p in 0..n {
                    s += f.plane(i)[p] as f64 * f.plane(j)[p] as f64;
                }
                g[i * c + j] = s / (c * n) as f64;
            }
        }
        g
    }

    #[test]
    fn gram_two_channel_example() {
        let f = Tensor::from_vec(2, 1, 1, vec![3.0, 4.0]).unwrap();
        assert_eq!(gram(&f).data, vec![4.5, 6.0, 6.0, 8.0]);
        assert!(gram(&Tensor::zeros(3, 2, 2)).data.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn gram_matches_double_loop() {
        let f = Tensor::from_fn(3, 4, 4, |c, y, x| ((c * 31 + y * 7 + x * 3) % 11) as f32 * 0.37 - 1.2);
        let g = gram(&f);
        for (a, b) in g.data.iter().zip(naive_gram(&f)) {
            assert!((*a as f64 - b).abs() < 1e-6);
        }
    }

    #[test]
    fn sixteen_times_when_doubled() {
        let f = Tensor::from_fn(4, 3, 5, |c, y, x| (c + y * x) as f32 * 0.1);
        let zero = GramMatrix {
            channels: 4,
            data: vec![0.0; 16],
            layer: String::new(),
        };
        let base = gram_mse(&gram(&f), &zero).unwrap();
        let mut f2 = f.clone();
        f2.scale(2.0);
        let doubled = gram_mse(&gram(&f2), &zero).unwrap();
        assert!((doubled / base - 16.0).abs() < 1e-9);
    }

    #[test]
    fn self_distance_and_extents() {
        let vgg = Vgg19::random(1);
        let img = synth::brush_strokes(64, 64, 1);
        let f = vgg.extract(&img).unwrap();
        let extents: Vec<_> = f.layers.iter().map(|t| t.extent()).collect();
        assert_eq!(extents, vec![(64, 64), (32, 32), (16, 16), (8, 8), (8, 8), (4, 4)]);
        let r = StyleReference::from_features(&f);
        assert!(style_loss(&f, &r).unwrap() < 1e-8);
        assert_eq!(content_loss(&f, &f).unwrap(), 0.0);
    }

    #[test]
    fn black_image_is_finite() {
        let vgg = Vgg19::random(2);
        let f = vgg.extract(&ImagePlane::new(32, 32)).unwrap();
        assert!(f.layers.iter().all(Tensor::is_finite));
    }

    #[test]
    fn reference_layer_mismatch_is_config_error() {
        let vgg = Vgg19::random(3);
        let f = vgg.extract(&synth::scene(32, 32, 3)).unwrap();
        let mut r = StyleReference::from_features(&f);
        r.grams.pop();
        assert!(matches!(style_loss(&f, &r), Err(Error::Config(_))));
    }

    #[test]
    fn missing_weights_file_is_config_error() {
        assert!(matches!(Vgg19::load("/nonexistent/vgg19.safetensors"), Err(Error::Config(_))));
    }
}
