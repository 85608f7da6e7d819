//! Conditional instance normalization parameters and their affine
//! dependence on style intensity.

use crate::error::{Error, Result};

/// Channel count of every CIN layer, in network order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CinLayout {
    names: Vec<String>,
    channels: Vec<usize>,
    offsets: Vec<usize>,
    total: usize,
}

impl CinLayout {
    pub fn new(layers: Vec<(String, usize)>) -> Self {
        let mut offsets = Vec::with_capacity(layers.len());
        let mut total = 0;
        for (_, c) in &layers {
            offsets.push(total);
            total += 2 * c;
        }
        let (names, channels) = layers.into_iter().unzip();
        Self {
            names,
            channels,
            offsets,
            total,
        }
    }

    pub fn len(&self) -> usize {
        self.channels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.channels.is_empty()
    }

    /// Total scalar count: `Σ 2·C_ℓ`.
    pub fn param_count(&self) -> usize {
        self.total
    }

    pub fn channels(&self, layer: usize) -> usize {
        self.channels[layer]
    }

    pub fn name(&self, layer: usize) -> &str {
        &self.names[layer]
    }

    /// Range of layer `ℓ`'s `[gamma.., beta..]` block in the flat vector.
    pub fn block(&self, layer: usize) -> std::ops::Range<usize> {
        self.offsets[layer]..self.offsets[layer] + 2 * self.channels[layer]
    }
}

/// Per-layer `(gamma, beta)` pairs, stored flat as `[γ_0, β_0, γ_1, β_1, …]`.
#[derive(Debug, Clone, PartialEq)]
pub struct CinParamSet {
    layout: CinLayout,
    flat: Vec<f32>,
}

impl CinParamSet {
    pub fn from_flat(layout: CinLayout, flat: Vec<f32>) -> Result<Self> {
        if flat.len() != layout.param_count() {
            return Err(Error::Config(format!(
                "CIN parameter vector has {} entries, layout needs {}",
                flat.len(),
                layout.param_count()
            )));
        }
        Ok(Self { layout, flat })
    }

    pub fn layout(&self) -> &CinLayout {
        &self.layout
    }

    pub fn flat(&self) -> &[f32] {
        &self.flat
    }

    pub fn gamma(&self, layer: usize) -> &[f32] {
        let r = self.layout.block(layer);
        &self.flat[r.start..r.start + self.layout.channels(layer)]
    }

    pub fn beta(&self, layer: usize) -> &[f32] {
        let r = self.layout.block(layer);
        &self.flat[r.start + self.layout.channels(layer)..r.end]
    }
}

/// Accumulates gradients with respect to a [`CinParamSet`].
#[derive(Debug, Clone)]
pub(crate) struct CinGrad {
    layout: CinLayout,
    pub(crate) flat: Vec<f32>,
}

impl CinGrad {
    pub(crate) fn zeros(layout: &CinLayout) -> Self {
        Self {
            layout: layout.clone(),
            flat: vec![0.0; layout.param_count()],
        }
    }

    pub(crate) fn add(&mut self, layer: usize, d_gamma: &[f32], d_beta: &[f32]) {
        let r = self.layout.block(layer);
        let c = self.layout.channels(layer);
        let block = &mut self.flat[r];
        block[..c].iter_mut().zip(d_gamma).for_each(|(a, b)| *a += b);
        block[c..].iter_mut().zip(d_beta).for_each(|(a, b)| *a += b);
    }
}

/// `Φ = W·λ_I + b`: one fully-connected layer from the scalar intensity to
/// every CIN scale and shift.
#[derive(Debug, Clone, PartialEq)]
pub struct IntensityRegressor {
    pub weight: Vec<f32>,
    pub bias: Vec<f32>,
}

impl IntensityRegressor {
    /// Zero slope, with the intercept at the identity normalization
    /// (unit scales, zero shifts).
    pub fn identity(layout: &CinLayout) -> Self {
        let mut bias = vec![0.0; layout.param_count()];
        for l in 0..layout.len() {
            let r = layout.block(l);
            bias[r.start..r.start + layout.channels(l)].fill(1.0);
        }
        Self {
            weight: vec![0.0; layout.param_count()],
            bias,
        }
    }

    pub fn params(&self, layout: &CinLayout, lambda_i: f32) -> Result<CinParamSet> {
        if self.weight.len() != layout.param_count() || self.bias.len() != layout.param_count() {
            return Err(Error::Config(format!(
                "intensity regressor has {}/{} entries, architecture needs {}",
                self.weight.len(),
                self.bias.len(),
                layout.param_count()
            )));
        }
        let flat = self
            .weight
            .iter()
            .zip(&self.bias)
            .map(|(w, b)| w * lambda_i + b)
            .collect();
        CinParamSet::from_flat(layout.clone(), flat)
    }
}
