//! The adjustable two-branch stylization network.
//!
//! The encoder runs a light stride-1 branch on the full-resolution content
//! and a fast-style-transfer branch on the content shrunk by the stroke size
//! `λS`; the latter is resized back up and both are concatenated. The
//! decoder merges those features into an RGB image. Every normalization in
//! the dynamic branch and the decoder is a CIN layer whose scales and shifts
//! come from an affine function of the style intensity `λI`.

mod cin;
mod forward;
mod weights;

use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};

pub use cin::{CinLayout, CinParamSet, IntensityRegressor};
pub(crate) use cin::CinGrad;
pub(crate) use forward::{backward_train, forward_train};
pub use weights::{ArchConfig, ConvSlots, NetGrads, NetParams, NetWeights};

use crate::error::{Error, Result};
use crate::ops::conv::reflect_index;
use crate::ops::Resize;
use crate::params::{check_intensity, check_stroke_size, StrokeParams};
use crate::pipeline::rotation::{crop_unrotate, rotate_pad};
use crate::plane::ImagePlane;
use crate::tensor::{FeatureTensor, Tensor};

/// Smallest accepted content side, in pixels.
pub const MIN_SIDE: usize = 16;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelMeta {
    pub style_name: String,
    pub arch: ArchConfig,
    /// Crop size used during training (pixels per side).
    pub training_resolution: usize,
    /// Stroke sizes cycled during training.
    pub trained_factors: Vec<f32>,
    #[serde(default)]
    pub training: serde_json::Value,
}

impl ModelMeta {
    pub fn untrained(style_name: impl Into<String>, arch: ArchConfig) -> Self {
        Self {
            style_name: style_name.into(),
            arch,
            training_resolution: 0,
            trained_factors: Vec::new(),
            training: serde_json::Value::Null,
        }
    }
}

/// Trained weights for one style. Immutable once constructed; safe to share
/// across threads for concurrent inference.
#[derive(Debug)]
pub struct StyleModel {
    meta: ModelMeta,
    weights: NetWeights,
    regressor: IntensityRegressor,
    layout: CinLayout,
    style_image: Option<ImagePlane>,
    encode_calls: AtomicU64,
}

impl Clone for StyleModel {
    fn clone(&self) -> Self {
        Self {
            meta: self.meta.clone(),
            weights: self.weights.clone(),
            regressor: self.regressor.clone(),
            layout: self.layout.clone(),
            style_image: self.style_image.clone(),
            encode_calls: AtomicU64::new(0),
        }
    }
}

impl StyleModel {
    pub fn new(
        meta: ModelMeta,
        weights: NetWeights,
        regressor: IntensityRegressor,
        style_image: Option<ImagePlane>,
    ) -> Result<Self> {
        let expected = NetWeights::zeros(&meta.arch);
        if expected.layers().len() != weights.layers().len() {
            return Err(Error::Config("layer count does not match the architecture".into()));
        }
        for ((name, want), (_, got)) in expected.layers().iter().zip(weights.layers()) {
            if want.weight.len() != got.weight.len()
                || want.bias.len() != got.bias.len()
                || want.in_channels != got.in_channels
                || want.out_channels != got.out_channels
                || want.kernel != got.kernel
                || want.stride != got.stride
            {
                return Err(Error::Config(format!("layer {name} does not match the architecture")));
            }
        }
        let layout = meta.arch.cin_layout();
        if regressor.weight.len() != layout.param_count() || regressor.bias.len() != layout.param_count() {
            return Err(Error::Config(format!(
                "intensity regressor has {} entries, architecture needs {}",
                regressor.weight.len(),
                layout.param_count()
            )));
        }
        Ok(Self {
            meta,
            weights,
            regressor,
            layout,
            style_image,
            encode_calls: AtomicU64::new(0),
        })
    }

    /// Freshly initialized weights with an identity intensity regressor.
    pub fn initialized(meta: ModelMeta, seed: u64) -> Self {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let weights = NetWeights::init(&meta.arch, &mut rng);
        let layout = meta.arch.cin_layout();
        let regressor = IntensityRegressor::identity(&layout);
        Self::new(meta, weights, regressor, None).expect("shapes derived from the architecture")
    }

    pub fn meta(&self) -> &ModelMeta {
        &self.meta
    }

    pub fn arch(&self) -> &ArchConfig {
        &self.meta.arch
    }

    pub fn weights(&self) -> &NetWeights {
        &self.weights
    }

    pub fn regressor(&self) -> &IntensityRegressor {
        &self.regressor
    }

    pub fn cin_layout(&self) -> &CinLayout {
        &self.layout
    }

    pub fn style_image(&self) -> Option<&ImagePlane> {
        self.style_image.as_ref()
    }

    pub fn with_style_image(mut self, image: ImagePlane) -> Self {
        self.style_image = Some(image);
        self
    }

    /// Number of encoder passes run so far (instrumentation).
    pub fn encode_calls(&self) -> u64 {
        self.encode_calls.load(Ordering::Relaxed)
    }

    /// `Φ = W·λI + b`, split into per-layer `(gamma, beta)` pairs.
    pub fn intensity_to_cin_params(&self, lambda_i: f32) -> Result<CinParamSet> {
        if let Some(v) = check_intensity(lambda_i) {
            return Err(Error::Parameter(vec![v]));
        }
        self.regressor.params(&self.layout, lambda_i)
    }

    /// Runs both encoder branches and returns features at the content's
    /// extent.
    pub fn encode(&self, content: &ImagePlane, lambda_s: f32, lambda_i: f32) -> Result<FeatureTensor> {
        Ok(self.encode_parts(content, lambda_s, lambda_i)?.assemble())
    }

    /// Like [`StyleModel::encode`] but keeps the dynamic-branch output at its
    /// own resolution, which is much smaller for large stroke sizes.
    pub fn encode_parts(&self, content: &ImagePlane, lambda_s: f32, lambda_i: f32) -> Result<EncodedParts> {
        if let Some(v) = check_stroke_size(lambda_s) {
            return Err(Error::Parameter(vec![v]));
        }
        let (h, w) = content.extent();
        if h < MIN_SIDE || w < MIN_SIDE {
            return Err(Error::Input(format!(
                "content is {h}x{w}; both sides must be at least {MIN_SIDE}"
            )));
        }
        let cin = self.intensity_to_cin_params(lambda_i)?;
        self.encode_calls.fetch_add(1, Ordering::Relaxed);

        let x = pad_to_multiple(&content.to_tensor(), 4);
        let (high_res, dynamic) = forward::encode_parts(&self.weights, &self.meta.arch, &x, lambda_s, &cin)?;
        Ok(EncodedParts {
            high_res,
            dynamic,
            extent: (h, w),
        })
    }

    pub fn decode(&self, features: &FeatureTensor, lambda_i: f32) -> Result<ImagePlane> {
        let cin = self.intensity_to_cin_params(lambda_i)?;
        let out = forward::decode_tensor(&self.weights, &self.meta.arch, &features.data, &cin)?;
        let mut img = ImagePlane::from_tensor(&out)?;
        img.clamp_unit();
        Ok(img)
    }

    /// Global transfer: rotate and pad by `τ`, encode, decode, then undo the
    /// rotation and crop to the original extent. `τ = 0` skips the geometry.
    pub fn stylize(&self, content: &ImagePlane, params: &StrokeParams) -> Result<ImagePlane> {
        let params = StrokeParams::new(params.lambda_s, params.lambda_i, params.tau)?;
        if params.tau == 0.0 {
            let f = self.encode(content, params.lambda_s, params.lambda_i)?;
            return self.decode(&f, params.lambda_i);
        }
        let (rotated, frame) = rotate_pad(content, params.tau);
        let f = self.encode(&rotated, params.lambda_s, params.lambda_i)?;
        let out = self.decode(&f, params.lambda_i)?;
        crop_unrotate(&out, &frame)
    }
}

/// Encoder output before the dynamic branch is resized to full resolution.
#[derive(Debug, Clone)]
pub struct EncodedParts {
    /// High-resolution branch output at the padded extent.
    high_res: Tensor,
    /// Dynamic branch output at its working resolution.
    dynamic: Tensor,
    extent: (usize, usize),
}

impl EncodedParts {
    pub fn extent(&self) -> (usize, usize) {
        self.extent
    }

    /// High-resolution features cropped to the content extent.
    pub fn high_res(&self) -> Tensor {
        crop_tensor(&self.high_res, self.extent.0, self.extent.1)
    }

    /// Dynamic features resized to the padded extent and cropped.
    pub fn dynamic_full(&self) -> Tensor {
        let d = Resize::bilinear(self.dynamic.extent(), self.high_res.extent(), false).apply(&self.dynamic);
        crop_tensor(&d, self.extent.0, self.extent.1)
    }

    /// Bytes held by this value.
    pub fn footprint(&self) -> usize {
        4 * (self.high_res.data().len() + self.dynamic.data().len())
    }

    pub fn assemble(&self) -> FeatureTensor {
        let f = Tensor::concat(&[&self.high_res(), &self.dynamic_full()]).expect("equal extents");
        FeatureTensor::new(f)
    }
}

/// Reflection-pads bottom and right so both sides are multiples of `m`.
pub(crate) fn pad_to_multiple(x: &Tensor, m: usize) -> Tensor {
    let (h, w) = x.extent();
    let (ph, pw) = (h.div_ceil(m) * m, w.div_ceil(m) * m);
    if (ph, pw) == (h, w) {
        return x.clone();
    }
    Tensor::from_fn(x.channels(), ph, pw, |c, y, xx| {
        x.at(c, reflect_index(y as isize, h), reflect_index(xx as isize, w))
    })
}

pub(crate) fn crop_tensor(x: &Tensor, h: usize, w: usize) -> Tensor {
    if x.extent() == (h, w) {
        return x.clone();
    }
    Tensor::from_fn(x.channels(), h, w, |c, y, xx| x.at(c, y, xx))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth;

    fn tiny_model() -> StyleModel {
        StyleModel::initialized(ModelMeta::untrained("tiny", ArchConfig::tiny()), 7)
    }

    #[test]
    fn encode_shape_contract() {
        let m = tiny_model();
        let img = synth::smooth_photo(64, 64, 1);
        let f = m.encode(&img, 2.0, 1.0).unwrap();
        assert_eq!(f.extent(), (64, 64));
        assert_eq!(f.channels(), m.arch().feature_channels());
    }

    #[test]
    fn non_multiple_of_four_keeps_extent() {
        let m = tiny_model();
        let img = synth::smooth_photo(37, 50, 2);
        for s in [1.0, 1.5, 3.0, 8.0] {
            let f = m.encode(&img, s, 0.5).unwrap();
            assert_eq!(f.extent(), (37, 50));
            let out = m.decode(&f, 0.5).unwrap();
            assert_eq!(out.extent(), (37, 50));
            assert!(out.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn rejects_bad_inputs() {
        let m = tiny_model();
        let img = synth::smooth_photo(32, 32, 3);
        assert!(matches!(m.encode(&img, 0.5, 1.0), Err(Error::Parameter(_))));
        assert!(matches!(m.encode(&img, 9.0, 1.0), Err(Error::Parameter(_))));
        assert!(matches!(m.encode(&img, 2.0, 4.5), Err(Error::Parameter(_))));
        let small = synth::smooth_photo(15, 32, 3);
        assert!(matches!(m.encode(&small, 2.0, 1.0), Err(Error::Input(_))));
        let wrong = FeatureTensor::new(Tensor::zeros(3, 16, 16));
        assert!(matches!(m.decode(&wrong, 1.0), Err(Error::Shape(_))));
    }

    #[test]
    fn unit_stroke_size_skips_resampling() {
        let m = tiny_model();
        let img = synth::smooth_photo(48, 48, 4);
        let cin = m.intensity_to_cin_params(1.0).unwrap();
        let x = img.to_tensor();
        let direct = {
            let hi = forward::high_res_branch(&m.weights, &x).unwrap();
            let d = forward::dynamic_branch(&m.weights, m.arch(), &x, &cin).unwrap();
            Tensor::concat(&[&hi, &d]).unwrap()
        };
        let f = m.encode(&img, 1.0, 1.0).unwrap();
        assert!(f.data.max_abs_diff(&direct) <= 1e-6);
    }

    #[test]
    fn inference_is_deterministic() {
        let m = tiny_model();
        let img = synth::smooth_photo(40, 40, 5);
        let p = StrokeParams::new(2.0, 1.0, 30.0).unwrap();
        assert_eq!(m.stylize(&img, &p).unwrap(), m.stylize(&img, &p).unwrap());
    }

    #[test]
    fn encode_counter_tracks_calls() {
        let m = tiny_model();
        let img = synth::smooth_photo(32, 32, 6);
        m.encode(&img, 1.0, 1.0).unwrap();
        m.encode(&img, 2.0, 1.0).unwrap();
        assert_eq!(m.encode_calls(), 2);
    }

    #[test]
    fn zero_rotation_equals_plain_path() {
        let m = tiny_model();
        let img = synth::smooth_photo(32, 48, 7);
        let p = StrokeParams::new(2.0, 0.7, 0.0).unwrap();
        let plain = m.decode(&m.encode(&img, 2.0, 0.7).unwrap(), 0.7).unwrap();
        assert_eq!(m.stylize(&img, &p).unwrap(), plain);
    }

    #[test]
    fn mismatched_weights_are_rejected() {
        let meta = ModelMeta::untrained("x", ArchConfig::tiny());
        let weights = NetWeights::zeros(&ArchConfig::default());
        let reg = IntensityRegressor::identity(&ArchConfig::tiny().cin_layout());
        assert!(matches!(StyleModel::new(meta, weights, reg, None), Err(Error::Config(_))));
    }

    /// `L = Σ R ⊙ out` for a fixed random `R`. For every layer, the
    /// directional derivative along that layer's analytic gradient must
    /// equal the gradient's norm. Single-coordinate differences are too
    /// noisy in f32 through instance norm and ReLU kinks.
    #[test]
    fn backward_matches_finite_differences() {
        use rand::{Rng, SeedableRng};
        let arch = ArchConfig::tiny();
        let m = StyleModel::initialized(ModelMeta::untrained("t", arch.clone()), 5);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let mut regressor = m.regressor().clone();
        regressor.weight.iter_mut().for_each(|w| *w = rng.gen_range(-0.3..0.3));
        let x = synth::scene(48, 48, 4).to_tensor();
        let r = Tensor::from_fn(3, 48, 48, |_, _, _| rng.gen_range(-1.0..1.0));
        let (lambda_s, lambda_i) = (2.0, 0.6);
        let layout = arch.cin_layout();

        let loss = |w: &NetWeights, reg: &IntensityRegressor| -> f64 {
            let cin = reg.params(&layout, lambda_i).unwrap();
            let out = forward_train(w, &arch, &x, lambda_s, &cin).unwrap();
            out.output().data().iter().zip(r.data()).map(|(a, b)| *a as f64 * *b as f64).sum()
        };
        let cin = regressor.params(&layout, lambda_i).unwrap();
        let trace = forward_train(m.weights(), &arch, &x, lambda_s, &cin).unwrap();
        let mut grads = m.weights().zero_grads();
        let mut cg = CinGrad::zeros(&layout);
        backward_train(m.weights(), &arch, &trace, &cin, r.clone(), &mut grads, &mut cg).unwrap();

        // Larger steps leave the locally linear regime of the tiny network;
        // the ratio converges to 1 as h shrinks.
        let h = 1e-4f32;
        let check = |name: &str, g: &[f32], perturb: &dyn Fn(&[f32]) -> f64| {
            let norm = g.iter().map(|v| (*v as f64).powi(2)).sum::<f64>().sqrt();
            let d: Vec<f32> = g.iter().map(|v| (*v as f64 / norm) as f32 * h).collect();
            let neg: Vec<f32> = d.iter().map(|v| -v).collect();
            let numeric = (perturb(&d) - perturb(&neg)) / (2.0 * h as f64);
            let rel = (numeric - norm).abs() / norm;
            assert!(rel < 3e-2, "{name}: directional {numeric} vs norm {norm}");
        };
        let grad_layers = grads.layers();
        for (l, (name, g)) in grad_layers.iter().enumerate() {
            check(name, &g.weight, &|d| {
                let mut w = m.weights().clone();
                w.layers_mut()[l].weight.iter_mut().zip(d).for_each(|(a, b)| *a += b);
                loss(&w, &regressor)
            });
        }
        let d_reg: Vec<f32> = cg.flat.iter().map(|g| g * lambda_i).collect();
        check("regressor.weight", &d_reg, &|d| {
            let mut reg = regressor.clone();
            reg.weight.iter_mut().zip(d).for_each(|(a, b)| *a += b);
            loss(m.weights(), &reg)
        });
        check("regressor.bias", &cg.flat, &|d| {
            let mut reg = regressor.clone();
            reg.bias.iter_mut().zip(d).for_each(|(a, b)| *a += b);
            loss(m.weights(), &reg)
        });
    }
}
