//! Training loop: perceptual losses, cycled stroke sizes, per-batch style
//! intensities and Adam.

use std::path::{Path, PathBuf};
use std::time::Instant;

use image::imageops::FilterType;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::save_checkpoint;
use crate::error::{Error, Result, Violation};
use crate::loss::{total_loss_grad, ExtractorSource, PerceptualFeatures, StyleReference, Vgg19};
use crate::network::{
    backward_train, forward_train, ArchConfig, CinGrad, IntensityRegressor, ModelMeta, NetGrads, NetWeights,
    StyleModel,
};
use crate::plane::ImagePlane;

const IMAGE_EXTENSIONS: [&str; 4] = ["png", "jpg", "jpeg", "bmp"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub style_image_path: PathBuf,
    pub dataset_dir: PathBuf,
    pub epochs: usize,
    pub crop_size: usize,
    pub batch_size: usize,
    pub learning_rate: f32,
    pub downsample_cycle: Vec<f32>,
    pub intensity_range: (f32, f32),
    pub seed: u64,
    pub checkpoint_dir: PathBuf,
    pub checkpoint_every: usize,
    pub content_weight: f32,
    pub arch: ArchConfig,
    /// `None` means "from the environment"; see [`ExtractorSource::from_env`].
    pub extractor: Option<ExtractorSource>,
    /// Defaults to the style image's file stem.
    pub style_name: Option<String>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            style_image_path: PathBuf::new(),
            dataset_dir: PathBuf::new(),
            epochs: 2,
            crop_size: 256,
            batch_size: 4,
            learning_rate: 1e-3,
            downsample_cycle: vec![2.0, 4.0],
            intensity_range: (0.0, 1.0),
            seed: 0,
            checkpoint_dir: PathBuf::from("checkpoints"),
            checkpoint_every: 500,
            content_weight: 1.0,
            arch: ArchConfig::default(),
            extractor: None,
            style_name: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let mut v = Vec::new();
        if self.crop_size == 0 || self.crop_size % 4 != 0 {
            v.push(Violation::new("crop_size", "must be a positive multiple of 4"));
        }
        if self.crop_size < crate::network::MIN_SIDE {
            v.push(Violation::new("crop_size", "must be at least 16"));
        }
        if self.batch_size == 0 {
            v.push(Violation::new("batch_size", "must be at least 1"));
        }
        if self.epochs == 0 {
            v.push(Violation::new("epochs", "must be at least 1"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            v.push(Violation::new("learning_rate", "must be positive"));
        }
        if self.downsample_cycle.is_empty() {
            v.push(Violation::new("downsample_cycle", "needs at least one factor"));
        }
        if self.downsample_cycle.iter().any(|f| !(*f >= 1.0 && *f <= 8.0)) {
            v.push(Violation::new("downsample_cycle", "factors must lie in [1, 8]"));
        }
        let (lo, hi) = self.intensity_range;
        if !(lo >= 0.0 && hi >= lo && hi <= 4.0) {
            v.push(Violation::new("intensity_range", "needs 0 <= lo <= hi <= 4"));
        }
        if !(self.content_weight >= 0.0 && self.content_weight.is_finite()) {
            v.push(Violation::new("content_weight", "must be finite and non-negative"));
        }
        if self.checkpoint_every == 0 {
            v.push(Violation::new("checkpoint_every", "must be at least 1"));
        }
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::Parameter(v))
        }
    }

    fn style_name(&self) -> String {
        self.style_name.clone().unwrap_or_else(|| {
            self.style_image_path
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| "style".into())
        })
    }
}

/// One optimizer step, as logged.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub style_loss: f64,
    pub content_loss: f64,
    pub lambda_i: f32,
    pub lambda_s: f32,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub steps: Vec<StepRecord>,
    pub final_checkpoint: PathBuf,
}

impl TrainReport {
    /// Mean style loss over the first and last `fraction` of steps.
    pub fn style_loss_ends(&self, fraction: f64) -> (f64, f64) {
        let n = self.steps.len();
        let k = ((n as f64 * fraction).ceil() as usize).clamp(1, n.max(1));
        let mean = |s: &[StepRecord]| s.iter().map(|r| r.style_loss).sum::<f64>() / s.len().max(1) as f64;
        (mean(&self.steps[..k.min(n)]), mean(&self.steps[n.saturating_sub(k)..]))
    }
}

/// Image files of a training corpus. Decoded crops are not cached.
#[derive(Debug, Clone)]
pub struct Corpus {
    files: Vec<PathBuf>,
}

impl Corpus {
    pub fn open(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let entries = std::fs::read_dir(dir).map_err(|e| Error::Data(format!("cannot list {}: {e}", dir.display())))?;
        let mut files: Vec<PathBuf> = entries
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| {
                p.extension()
                    .and_then(|e| e.to_str())
                    .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
            })
            .collect();
        files.sort();
        if files.is_empty() {
            return Err(Error::Data(format!("no images in {}", dir.display())));
        }
        Ok(Self { files })
    }

    pub fn len(&self) -> usize {
        self.files.len()
    }

    pub fn is_empty(&self) -> bool {
        self.files.is_empty()
    }

    /// Loads one file, scales it so the short side equals `crop`, and takes
    /// a random `crop×crop` window.
    fn sample(&self, index: usize, crop: usize, rng: &mut ChaCha8Rng) -> Result<ImagePlane> {
        let path = &self.files[index];
        let img = ImagePlane::load(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        Ok(random_crop(&scale_short_side(&img, crop), crop, rng))
    }

    /// `batch` samples drawn with replacement.
    pub fn batch(&self, crop: usize, batch: usize, rng: &mut ChaCha8Rng) -> Result<Vec<ImagePlane>> {
        (0..batch)
            .map(|_| {
                let i = rng.gen_range(0..self.files.len());
                self.sample(i, crop, rng)
            })
            .collect()
    }
}

fn scale_short_side(img: &ImagePlane, target: usize) -> ImagePlane {
    let (h, w) = img.extent();
    let s = target as f64 / h.min(w) as f64;
    let (nh, nw) = (
        ((h as f64 * s).round() as usize).max(target),
        ((w as f64 * s).round() as usize).max(target),
    );
    img.resize(nh, nw, FilterType::Triangle)
}

fn random_crop(img: &ImagePlane, crop: usize, rng: &mut ChaCha8Rng) -> ImagePlane {
    let (h, w) = img.extent();
    let top = rng.gen_range(0..=h - crop);
    let left = rng.gen_range(0..=w - crop);
    img.crop(top, left, crop, crop).expect("crop inside image")
}

/// Draws a batch of random crops from the images in `dataset_dir`.
pub fn load_batch(dataset_dir: impl AsRef<Path>, crop_size: usize, batch_size: usize, rng: &mut ChaCha8Rng) -> Result<Vec<ImagePlane>> {
    Corpus::open(dataset_dir)?.batch(crop_size, batch_size, rng)
}

/// Adam over a fixed list of flat parameter buffers.
#[derive(Debug, Clone)]
pub struct Adam {
    lr: f32,
    beta1: f32,
    beta2: f32,
    eps: f32,
    t: i32,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl Adam {
    pub fn new(lr: f32, sizes: &[usize]) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn step(&mut self, params: &mut [&mut Vec<f32>], grads: &[&[f32]]) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for (k, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for i in 0..p.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let mh = m[i] / c1;
                let vh = v[i] / c2;
                p[i] -= self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
    }
}

/// Mutable training state: the model parameters and the optimizer.
struct Trainer {
    meta: ModelMeta,
    weights: NetWeights,
    regressor: IntensityRegressor,
    adam: Adam,
    vgg: Vgg19,
    style_ref: StyleReference,
    style_image: ImagePlane,
}

impl Trainer {
    fn param_buffers(&mut self) -> Vec<&mut Vec<f32>> {
        let mut out = Vec::new();
        for conv in self.weights.layers_mut() {
            out.push(&mut conv.weight);
            out.push(&mut conv.bias);
        }
        out.push(&mut self.regressor.weight);
        out.push(&mut self.regressor.bias);
        out
    }

    fn model(&self) -> Result<StyleModel> {
        StyleModel::new(
            self.meta.clone(),
            self.weights.clone(),
            self.regressor.clone(),
            Some(self.style_image.clone()),
        )
    }

    /// One optimizer step over a batch; returns mean (style, content) loss.
    fn step(&mut self, batch: &[ImagePlane], lambda_s: f32, lambda_i: f32, content_weight: f32) -> Result<(f64, f64)> {
        let layout = self.meta.arch.cin_layout();
        let cin = self.regressor.params(&layout, lambda_i)?;
        let mut grads: NetGrads = self.weights.zero_grads();
        let mut cin_grad = CinGrad::zeros(&layout);
        let (mut style, mut content) = (0.0, 0.0);
        let inv = 1.0 / batch.len() as f32;
        for img in batch {
            let x = img.to_tensor();
            let content_features = PerceptualFeatures {
                layers: self.vgg.extract_tensor(&x)?,
            };
            let trace = forward_train(&self.weights, &self.meta.arch, &x, lambda_s, &cin)?;
            let (loss, mut g) =
                total_loss_grad(&self.vgg, trace.output(), &content_features, &self.style_ref, lambda_i, content_weight)?;
            style += loss.style;
            content += loss.content;
            if !loss.total.is_finite() {
                return Err(Error::NonFiniteLoss {
                    step: 0,
                    lambda_i,
                    lambda_s,
                });
            }
            g.scale(inv);
            backward_train(&self.weights, &self.meta.arch, &trace, &cin, g, &mut grads, &mut cin_grad)?;
        }

        // Φ = W·λI + b, so dW = λI·dΦ and db = dΦ.
        let d_reg_w: Vec<f32> = cin_grad.flat.iter().map(|g| g * lambda_i).collect();
        let mut grad_slices: Vec<&[f32]> = Vec::new();
        let grad_layers = grads.layers();
        for (_, g) in &grad_layers {
            grad_slices.push(&g.weight);
            grad_slices.push(&g.bias);
        }
        grad_slices.push(&d_reg_w);
        grad_slices.push(&cin_grad.flat);
        if grad_slices.iter().any(|g| g.iter().any(|v| !v.is_finite())) {
            return Err(Error::NonFiniteLoss {
                step: 0,
                lambda_i,
                lambda_s,
            });
        }
        let mut adam = std::mem::replace(&mut self.adam, Adam::new(0.0, &[]));
        adam.step(&mut self.param_buffers(), &grad_slices);
        self.adam = adam;
        let n = batch.len() as f64;
        Ok((style / n, content / n))
    }
}

/// Resolves the extractor: explicit choice, then the environment.
pub fn resolve_extractor(choice: Option<&ExtractorSource>) -> Result<Vgg19> {
    match choice.cloned().or_else(ExtractorSource::from_env) {
        Some(src) => src.load(),
        None => Err(Error::Config(format!(
            "no extractor weights: set {} to a VGG-19 safetensors file (see scripts/fetch_vgg19.py) or choose the random extractor explicitly",
            crate::loss::WEIGHTS_ENV
        ))),
    }
}

/// Number of optimizer steps `config` runs on a corpus of `images` files.
/// Stroke size used at zero-based `step`: the cycle repeats per batch.
pub fn cycle_factor(cycle: &[f32], step: usize) -> f32 {
    cycle[step % cycle.len()]
}

pub fn total_steps(config: &TrainConfig, images: usize) -> usize {
    config.epochs * images.div_ceil(config.batch_size)
}

pub fn train(config: &TrainConfig) -> Result<(StyleModel, TrainReport)> {
    train_with(config, |_| {})
}

/// Runs training, calling `on_step` after every optimizer step.
pub fn train_with(config: &TrainConfig, mut on_step: impl FnMut(&StepRecord)) -> Result<(StyleModel, TrainReport)> {
    config.validate()?;
    let corpus = Corpus::open(&config.dataset_dir)?;
    let style_image = ImagePlane::load(&config.style_image_path)?;
    let vgg = resolve_extractor(config.extractor.as_ref())?;
    let style_ref = StyleReference::from_image(&vgg, &style_image)?;

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut meta = ModelMeta::untrained(config.style_name(), config.arch.clone());
    meta.training_resolution = config.crop_size;
    meta.trained_factors = config.downsample_cycle.clone();
    meta.training = serde_json::json!({
        "epochs": config.epochs,
        "batch_size": config.batch_size,
        "learning_rate": config.learning_rate,
        "intensity_range": [config.intensity_range.0, config.intensity_range.1],
        "content_weight": config.content_weight,
        "seed": config.seed,
        "extractor": vgg.source(),
        "images": corpus.len(),
    });
    let init = StyleModel::initialized(meta.clone(), rng.gen());
    let weights = init.weights().clone();
    let regressor = init.regressor().clone();
    let mut sizes: Vec<usize> = weights
        .layers()
        .iter()
        .flat_map(|(_, c)| [c.weight.len(), c.bias.len()])
        .collect();
    sizes.extend([regressor.weight.len(), regressor.bias.len()]);

    let mut trainer = Trainer {
        meta,
        weights,
        regressor,
        adam: Adam::new(config.learning_rate, &sizes),
        vgg,
        style_ref,
        style_image,
    };

    let steps = total_steps(config, corpus.len());
    let started = Instant::now();
    let mut records = Vec::with_capacity(steps);
    let name = config.style_name();
    // Epoch-wise shuffled order; the last batch of an epoch may be short.
    let mut order: Vec<usize> = Vec::new();
    for step in 0..steps {
        if order.is_empty() {
            order = (0..corpus.len()).collect();
            order.shuffle(&mut rng);
            order.reverse();
        }
        let take = config.batch_size.min(order.len());
        let idx: Vec<usize> = (0..take).filter_map(|_| order.pop()).collect();
        let batch = idx
            .iter()
            .map(|&i| corpus.sample(i, config.crop_size, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let lambda_s = cycle_factor(&config.downsample_cycle, step);
        let (lo, hi) = config.intensity_range;
        let lambda_i = if hi > lo { rng.gen_range(lo..hi) } else { lo };
        let (style, content) = trainer
            .step(&batch, lambda_s, lambda_i, config.content_weight)
            .map_err(|e| match e {
                Error::NonFiniteLoss { lambda_i, lambda_s, .. } => Error::NonFiniteLoss {
                    step: step + 1,
                    lambda_i,
                    lambda_s,
                },
                other => other,
            })?;
        let rec = StepRecord {
            step: step + 1,
            style_loss: style,
            content_loss: content,
            lambda_i,
            lambda_s,
            seconds: started.elapsed().as_secs_f64(),
        };
        log::debug!("step {} style {:.4e} content {:.4e}", rec.step, style, content);
        on_step(&rec);
        records.push(rec);
        if (step + 1) % config.checkpoint_every == 0 && step + 1 < steps {
            let path = config.checkpoint_dir.join(format!("{name}-step{:06}.safetensors", step + 1));
            save_checkpoint(&trainer.model()?, path)?;
        }
    }

    let model = trainer.model()?;
    let final_checkpoint = config.checkpoint_dir.join(format!("{name}.safetensors"));
    save_checkpoint(&model, &final_checkpoint)?;
    Ok((
        model,
        TrainReport {
            steps: records,
            final_checkpoint,
        },
    ))
}
