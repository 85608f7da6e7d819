//! Stroke-level precomputation and the two blending paths.
//!
//! Each level's encoder output is kept as [`EncodedParts`]. The
//! high-resolution branch does not depend on the stroke size, so it is
//! stored once and only the (much smaller) dynamic-branch outputs are kept
//! per level. Since mask weights sum to one at every pixel,
//! `Σ m_ℓ·[hi, d_ℓ] = [hi, Σ m_ℓ·d_ℓ]`, and the blend below computes the
//! right-hand side.

use serde::{Deserialize, Serialize};

use super::mask::LevelMask;
use super::rotation::{crop_unrotate, rotate_pad, rotate_pad_tensor, RotationFrame};
use crate::error::{Error, Result, Violation};
use crate::network::{EncodedParts, StyleModel};
use crate::params::{check_intensity, check_stroke_size, normalize_degrees};
use crate::plane::ImagePlane;
use crate::tensor::{FeatureTensor, Tensor};

/// Default ceiling on the memory a precomputation may hold.
pub const DEFAULT_MEMORY_BUDGET: usize = 3 << 30;

/// Ten stroke sizes spaced geometrically over `[1, 4]`.
pub fn default_levels() -> Vec<f32> {
    (0..10).map(|i| 4f32.powf(i as f32 / 9.0)).collect()
}

/// Identifies the inputs a feature set was computed from.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FeatureKey {
    pub content_hash: String,
    lambda_i: u32,
    tau: u32,
    levels: Vec<u32>,
}

impl FeatureKey {
    pub fn new(content_hash: impl Into<String>, lambda_i: f32, tau: f32, levels: &[f32]) -> Self {
        Self {
            content_hash: content_hash.into(),
            lambda_i: lambda_i.to_bits(),
            tau: normalize_degrees(tau).to_bits(),
            levels: levels.iter().map(|v| v.to_bits()).collect(),
        }
    }
}

/// Per-level encoder outputs in the rotated, padded frame.
#[derive(Debug, Clone)]
pub struct StrokeFeatureSet {
    level_values: Vec<f32>,
    parts: Vec<EncodedParts>,
    frame: RotationFrame,
    lambda_i: f32,
    key: FeatureKey,
}

impl StrokeFeatureSet {
    pub fn level_values(&self) -> &[f32] {
        &self.level_values
    }

    pub fn len(&self) -> usize {
        self.parts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.parts.is_empty()
    }

    pub fn frame(&self) -> &RotationFrame {
        &self.frame
    }

    pub fn lambda_i(&self) -> f32 {
        self.lambda_i
    }

    pub fn key(&self) -> &FeatureKey {
        &self.key
    }

    /// Full feature tensor `f_ℓ` of one level, at the padded extent.
    pub fn feature(&self, level: usize) -> FeatureTensor {
        let mut f = self.parts[level].assemble();
        f.level_tag = Some(level);
        f
    }

    /// Bytes held by the stored features.
    pub fn footprint(&self) -> usize {
        self.parts.iter().map(EncodedParts::footprint).sum()
    }
}

/// Decoded per-level images at the original extent and their current blend.
#[derive(Debug, Clone, PartialEq)]
pub struct PreviewSet {
    pub images: Vec<ImagePlane>,
    pub blended: ImagePlane,
}

impl PreviewSet {
    /// Reblends `blended` from the per-level images.
    pub fn reblend(&mut self, mask: &LevelMask) -> Result<()> {
        self.blended = blend_image_space(self, mask)?;
        Ok(())
    }
}

fn validate_levels(level_values: &[f32]) -> Result<()> {
    let mut violations = Vec::new();
    if level_values.is_empty() {
        violations.push(Violation::new("level_values", "at least one level is required"));
    }
    for (i, &v) in level_values.iter().enumerate() {
        if let Some(mut bad) = check_stroke_size(v) {
            bad.field = format!("level_values[{i}]");
            violations.push(bad);
        }
    }
    if level_values.windows(2).any(|w| w[1] <= w[0]) {
        violations.push(Violation::new("level_values", "levels must be strictly increasing"));
    }
    if violations.is_empty() {
        Ok(())
    } else {
        Err(Error::Parameter(violations))
    }
}

/// Peak bytes [`precompute_levels`] needs for `levels` stroke sizes on a
/// canvas of `extent` pixels.
pub fn estimate_memory(model: &StyleModel, extent: (usize, usize), level_values: &[f32]) -> usize {
    let arch = model.arch();
    let (h, w) = (extent.0.div_ceil(4) * 4, extent.1.div_ceil(4) * 4);
    let px = (h * w) as f64;
    let hi = arch.hi_channels[2] as f64 * px;
    let dynamic: f64 = level_values
        .iter()
        .map(|s| arch.dyn_out_channels as f64 * px / (*s as f64).max(1.0).powi(2))
        .sum();
    let previews = 3.0 * (extent.0 * extent.1) as f64 * level_values.len() as f64;
    // One assembled feature map plus the widest decoder activations.
    let transient = (arch.feature_channels() + 3 * arch.decoder_channels) as f64 * px;
    (4.0 * (hi + dynamic + previews + transient)) as usize
}

/// [`precompute_levels_with_budget`] with [`DEFAULT_MEMORY_BUDGET`].
pub fn precompute_levels(
    model: &StyleModel,
    content: &ImagePlane,
    level_values: &[f32],
    lambda_i: f32,
    tau: f32,
) -> Result<(StrokeFeatureSet, PreviewSet)> {
    precompute_levels_with_budget(model, content, level_values, lambda_i, tau, DEFAULT_MEMORY_BUDGET)
}

/// Rotates and pads the content once, encodes it once per stroke size, and
/// decodes every level into an un-rotated preview.
pub fn precompute_levels_with_budget(
    model: &StyleModel,
    content: &ImagePlane,
    level_values: &[f32],
    lambda_i: f32,
    tau: f32,
    budget: usize,
) -> Result<(StrokeFeatureSet, PreviewSet)> {
    validate_levels(level_values)?;
    if let Some(v) = check_intensity(lambda_i) {
        return Err(Error::Parameter(vec![v]));
    }
    if !tau.is_finite() {
        return Err(Error::parameter("tau", "must be a finite angle"));
    }
    let frame = RotationFrame::new(tau, content.extent());
    let needed = estimate_memory(model, frame.padded_extent, level_values);
    if needed > budget {
        return Err(Error::Resource(format!(
            "{} levels at {}x{} need about {} MiB, over the {} MiB budget",
            level_values.len(),
            frame.padded_extent.0,
            frame.padded_extent.1,
            needed >> 20,
            budget >> 20
        )));
    }

    let (canvas, frame) = rotate_pad(content, tau);
    let mut parts = Vec::with_capacity(level_values.len());
    let mut images = Vec::with_capacity(level_values.len());
    for &s in level_values {
        let p = model.encode_parts(&canvas, s, lambda_i)?;
        let decoded = model.decode(&p.assemble(), lambda_i)?;
        images.push(crop_unrotate(&decoded, &frame)?);
        parts.push(p);
    }
    let key = FeatureKey::new(content.content_hash(), lambda_i, tau, level_values);
    let blended = images[0].clone();
    let fs = StrokeFeatureSet {
        level_values: level_values.to_vec(),
        parts,
        frame,
        lambda_i,
        key,
    };
    Ok((fs, PreviewSet { images, blended }))
}

/// `I_P = Σ_ℓ m_ℓ ⊙ I_ℓ`, per pixel.
pub fn blend_image_space(previews: &PreviewSet, mask: &LevelMask) -> Result<ImagePlane> {
    let first = previews
        .images
        .first()
        .ok_or_else(|| Error::Shape("preview set is empty".into()))?;
    if mask.levels() != previews.images.len() {
        return Err(Error::Shape(format!(
            "mask has {} levels, preview set has {}",
            mask.levels(),
            previews.images.len()
        )));
    }
    let (h, w) = first.extent();
    if mask.extent() != (h, w) {
        return Err(Error::Shape(format!(
            "mask is {}x{}, previews are {h}x{w}",
            mask.extent().0,
            mask.extent().1
        )));
    }
    let mut out = ImagePlane::new(h, w);
    for (l, img) in previews.images.iter().enumerate() {
        let m = mask.plane(l);
        for (i, (o, v)) in out.data_mut().chunks_exact_mut(3).zip(img.data().chunks_exact(3)).enumerate() {
            let wgt = m[i];
            if wgt == 0.0 {
                continue;
            }
            for c in 0..3 {
                o[c] += wgt * v[c];
            }
        }
    }
    Ok(out)
}

/// Transforms a mask given in original coordinates into the feature frame
/// and renormalizes it.
pub fn rotate_mask(mask: &LevelMask, frame: &RotationFrame) -> Result<LevelMask> {
    if mask.extent() != frame.original_extent {
        return Err(Error::Shape(format!(
            "mask is {}x{}, content is {}x{}",
            mask.extent().0,
            mask.extent().1,
            frame.original_extent.0,
            frame.original_extent.1
        )));
    }
    if frame.is_identity() {
        return Ok(mask.clone());
    }
    let (rotated, _) = rotate_pad_tensor(mask.weights(), frame.tau);
    LevelMask::from_weights(rotated)
}

/// Blends the stored features with the mask and decodes once.
pub fn blend_feature_space(model: &StyleModel, fs: &StrokeFeatureSet, mask: &LevelMask) -> Result<ImagePlane> {
    if mask.levels() != fs.len() {
        return Err(Error::Shape(format!(
            "mask has {} levels, feature set has {}",
            mask.levels(),
            fs.len()
        )));
    }
    let m = rotate_mask(mask, &fs.frame)?;
    let first = &fs.parts[0];
    let (h, w) = first.extent();
    if m.extent() != (h, w) {
        return Err(Error::Shape("mask and feature frame disagree".into()));
    }
    let n = h * w;
    let mut dynamic: Option<Tensor> = None;
    for (l, part) in fs.parts.iter().enumerate() {
        let weights = m.plane(l);
        if weights.iter().all(|&v| v == 0.0) {
            continue;
        }
        let d = part.dynamic_full();
        let acc = dynamic.get_or_insert_with(|| Tensor::zeros(d.channels(), h, w));
        for (acc_c, d_c) in acc.data_mut().chunks_exact_mut(n).zip(d.data().chunks_exact(n)) {
            for ((a, v), wgt) in acc_c.iter_mut().zip(d_c).zip(weights) {
                *a += wgt * v;
            }
        }
    }
    let dynamic = dynamic.expect("normalized mask has a non-zero level");
    let features = FeatureTensor::new(Tensor::concat(&[&first.high_res(), &dynamic])?);
    drop(dynamic);
    let out = model.decode(&features, fs.lambda_i)?;
    crop_unrotate(&out, &fs.frame)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BlendMode {
    Preview,
    Final,
}

/// A complete local-edit description.
#[derive(Debug, Clone)]
pub struct LocalEdit {
    pub level_values: Vec<f32>,
    pub lambda_i: f32,
    pub tau: f32,
    pub mask: LevelMask,
}

/// Precomputes the levels and blends them in the requested mode.
pub fn render_local_edit(model: &StyleModel, content: &ImagePlane, edit: &LocalEdit, mode: BlendMode) -> Result<ImagePlane> {
    if edit.mask.levels() != edit.level_values.len() {
        return Err(Error::Shape(format!(
            "mask has {} levels, edit lists {}",
            edit.mask.levels(),
            edit.level_values.len()
        )));
    }
    if edit.mask.extent() != content.extent() {
        return Err(Error::Shape(format!(
            "mask is {}x{}, content is {}x{}",
            edit.mask.extent().0,
            edit.mask.extent().1,
            content.height(),
            content.width()
        )));
    }
    let (fs, previews) = precompute_levels(model, content, &edit.level_values, edit.lambda_i, edit.tau)?;
    match mode {
        BlendMode::Preview => blend_image_space(&previews, &edit.mask),
        BlendMode::Final => blend_feature_space(model, &fs, &edit.mask),
    }
}
