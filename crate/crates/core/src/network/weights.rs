//! Layer inventory of the two-branch network and named access to its arrays.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::cin::CinLayout;
use crate::ops::{Conv2d, ConvGrad, Padding};

/// Channel configuration. Kernel sizes and strides are fixed by the topology.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchConfig {
    /// High-resolution branch: 9×9, 3×3, 3×3, all stride 1.
    pub hi_channels: [usize; 3],
    /// Dynamic branch entry: 9×9 stride 1, then two 3×3 stride 2.
    pub dyn_channels: [usize; 3],
    pub residual_blocks: usize,
    /// Output width of the dynamic branch's two upsampling convolutions.
    pub dyn_out_channels: usize,
    /// Width of the full-resolution decoder.
    pub decoder_channels: usize,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self {
            hi_channels: [16, 32, 32],
            dyn_channels: [32, 64, 128],
            residual_blocks: 5,
            dyn_out_channels: 64,
            decoder_channels: 32,
        }
    }
}

impl ArchConfig {
    /// A narrow variant for fast tests.
    pub fn tiny() -> Self {
        Self {
            hi_channels: [4, 6, 6],
            dyn_channels: [6, 8, 8],
            residual_blocks: 1,
            dyn_out_channels: 6,
            decoder_channels: 6,
        }
    }

    pub fn feature_channels(&self) -> usize {
        self.hi_channels[2] + self.dyn_out_channels
    }

    /// CIN layers in forward order: dynamic entry convs, residual blocks,
    /// upsampling convs, then decoder merge, residual block and body conv.
    pub fn cin_layout(&self) -> CinLayout {
        let mut layers = Vec::new();
        for (i, c) in self.dyn_channels.iter().enumerate() {
            layers.push((format!("encoder.dyn.in.{i}"), *c));
        }
        for r in 0..self.residual_blocks {
            layers.push((format!("encoder.dyn.res.{r}.conv1"), self.dyn_channels[2]));
            layers.push((format!("encoder.dyn.res.{r}.conv2"), self.dyn_channels[2]));
        }
        layers.push(("encoder.dyn.up.0".into(), self.dyn_out_channels));
        layers.push(("encoder.dyn.up.1".into(), self.dyn_out_channels));
        layers.push(("decoder.merge".into(), self.decoder_channels));
        layers.push(("decoder.res.conv1".into(), self.decoder_channels));
        layers.push(("decoder.res.conv2".into(), self.decoder_channels));
        layers.push(("decoder.conv".into(), self.decoder_channels));
        CinLayout::new(layers)
    }
}

/// Indices into the CIN layout, matching [`ArchConfig::cin_layout`].
pub(crate) struct CinIndex {
    pub dyn_in: usize,
    pub dyn_res: usize,
    pub dyn_up: usize,
    pub dec_merge: usize,
    pub dec_res: usize,
    pub dec_conv: usize,
}

impl CinIndex {
    pub fn new(arch: &ArchConfig) -> Self {
        let dyn_res = 3;
        let dyn_up = dyn_res + 2 * arch.residual_blocks;
        Self {
            dyn_in: 0,
            dyn_res,
            dyn_up,
            dec_merge: dyn_up + 2,
            dec_res: dyn_up + 3,
            dec_conv: dyn_up + 5,
        }
    }
}

/// Something holding a weight and bias array: a layer or its gradient.
pub trait ConvSlots {
    fn weight(&self) -> &[f32];
    fn bias(&self) -> &[f32];
    fn weight_mut(&mut self) -> &mut Vec<f32>;
    fn bias_mut(&mut self) -> &mut Vec<f32>;
}

impl ConvSlots for Conv2d {
    fn weight(&self) -> &[f32] {
        &self.weight
    }
    fn bias(&self) -> &[f32] {
        &self.bias
    }
    fn weight_mut(&mut self) -> &mut Vec<f32> {
        &mut self.weight
    }
    fn bias_mut(&mut self) -> &mut Vec<f32> {
        &mut self.bias
    }
}

impl ConvSlots for ConvGrad {
    fn weight(&self) -> &[f32] {
        &self.weight
    }
    fn bias(&self) -> &[f32] {
        &self.bias
    }
    fn weight_mut(&mut self) -> &mut Vec<f32> {
        &mut self.weight
    }
    fn bias_mut(&mut self) -> &mut Vec<f32> {
        &mut self.bias
    }
}

/// Every convolution of the network. Instantiated with [`Conv2d`] for the
/// model and with [`ConvGrad`] for gradient accumulation.
#[derive(Debug, Clone, PartialEq)]
pub struct NetParams<C> {
    pub hi: Vec<C>,
    pub dyn_in: Vec<C>,
    pub dyn_res: Vec<[C; 2]>,
    pub dyn_up: Vec<C>,
    pub merge: C,
    pub dec_res: [C; 2],
    pub dec_conv: C,
    pub dec_out: C,
}

pub type NetWeights = NetParams<Conv2d>;
pub type NetGrads = NetParams<ConvGrad>;

impl<C> NetParams<C> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(String, &'a C)) {
        for (i, c) in self.hi.iter().enumerate() {
            f(format!("encoder.hi.{i}"), c);
        }
        for (i, c) in self.dyn_in.iter().enumerate() {
            f(format!("encoder.dyn.in.{i}"), c);
        }
        for (i, [a, b]) in self.dyn_res.iter().enumerate() {
            f(format!("encoder.dyn.res.{i}.conv1"), a);
            f(format!("encoder.dyn.res.{i}.conv2"), b);
        }
        for (i, c) in self.dyn_up.iter().enumerate() {
            f(format!("encoder.dyn.up.{i}"), c);
        }
        f("decoder.merge".into(), &self.merge);
        f("decoder.res.conv1".into(), &self.dec_res[0]);
        f("decoder.res.conv2".into(), &self.dec_res[1]);
        f("decoder.conv".into(), &self.dec_conv);
        f("decoder.out".into(), &self.dec_out);
    }

    /// Layers with their checkpoint name prefixes, in a fixed order.
    pub fn layers(&self) -> Vec<(String, &C)> {
        let mut out = Vec::new();
        self.visit(&mut |n, c| out.push((n, c)));
        out
    }

    pub fn layers_mut(&mut self) -> Vec<&mut C> {
        let mut out: Vec<&mut C> = Vec::new();
        out.extend(self.hi.iter_mut());
        out.extend(self.dyn_in.iter_mut());
        for pair in self.dyn_res.iter_mut() {
            out.extend(pair.iter_mut());
        }
        out.extend(self.dyn_up.iter_mut());
        out.push(&mut self.merge);
        out.extend(self.dec_res.iter_mut());
        out.push(&mut self.dec_conv);
        out.push(&mut self.dec_out);
        out
    }

    pub fn map<D>(&self, f: impl Fn(&C) -> D) -> NetParams<D> {
        NetParams {
            hi: self.hi.iter().map(&f).collect(),
            dyn_in: self.dyn_in.iter().map(&f).collect(),
            dyn_res: self.dyn_res.iter().map(|[a, b]| [f(a), f(b)]).collect(),
            dyn_up: self.dyn_up.iter().map(&f).collect(),
            merge: f(&self.merge),
            dec_res: [f(&self.dec_res[0]), f(&self.dec_res[1])],
            dec_conv: f(&self.dec_conv),
            dec_out: f(&self.dec_out),
        }
    }
}

impl NetWeights {
    /// Zero-filled layers with the shapes implied by `arch`.
    pub fn zeros(arch: &ArchConfig) -> Self {
        let conv = |i, o, k, s| Conv2d::zeros(i, o, k, s, Padding::Reflect);
        let [h0, h1, h2] = arch.hi_channels;
        let [d0, d1, d2] = arch.dyn_channels;
        let up = arch.dyn_out_channels;
        let dc = arch.decoder_channels;
        Self {
            hi: vec![conv(3, h0, 9, 1), conv(h0, h1, 3, 1), conv(h1, h2, 3, 1)],
            dyn_in: vec![conv(3, d0, 9, 1), conv(d0, d1, 3, 2), conv(d1, d2, 3, 2)],
            dyn_res: (0..arch.residual_blocks)
                .map(|_| [conv(d2, d2, 3, 1), conv(d2, d2, 3, 1)])
                .collect(),
            dyn_up: vec![conv(d2, up, 3, 1), conv(up, up, 3, 1)],
            merge: conv(arch.feature_channels(), dc, 1, 1),
            dec_res: [conv(dc, dc, 3, 1), conv(dc, dc, 3, 1)],
            dec_conv: conv(dc, dc, 3, 1),
            dec_out: conv(dc, 3, 9, 1),
        }
    }

    /// Uniform `±1/sqrt(fan_in)` initialization for weights and biases.
    pub fn init(arch: &ArchConfig, rng: &mut impl Rng) -> Self {
        let mut w = Self::zeros(arch);
        for conv in w.layers_mut() {
            let fan_in = (conv.in_channels * conv.kernel * conv.kernel) as f32;
            let bound = 1.0 / fan_in.sqrt();
            conv.weight.iter_mut().for_each(|v| *v = rng.gen_range(-bound..bound));
            conv.bias.iter_mut().for_each(|v| *v = rng.gen_range(-bound..bound));
        }
        w
    }

    pub fn zero_grads(&self) -> NetGrads {
        self.map(ConvGrad::zeros_like)
    }
}
