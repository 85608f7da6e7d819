//! VGG-19 feature extractor, truncated after `conv5_1`.

use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use safetensors::{Dtype, SafeTensors};

use crate::error::{Error, Result};
use crate::ops::act::{maxpool2, maxpool2_backward, relu_backward, relu_inplace};
use crate::ops::{Conv2d, Padding};
use crate::plane::ImagePlane;
use crate::tensor::Tensor;

/// Environment variable naming the extractor weights file.
pub const WEIGHTS_ENV: &str = "BRUSHWORK_VGG19";

/// Per-channel normalization the pretrained weights expect (RGB, unit range).
pub const IMAGENET_MEAN: [f32; 3] = [0.485, 0.456, 0.406];
pub const IMAGENET_STD: [f32; 3] = [0.229, 0.224, 0.225];

/// Layer names as returned by [`Vgg19::extract`], in network order.
pub const LAYER_NAMES: [&str; 6] = ["relu1_1", "relu2_1", "relu3_1", "relu4_1", "relu4_2", "relu5_1"];

// (in, out, index in torchvision's `features`, tap slot, pool after)
const CONVS: [(usize, usize, usize, Option<usize>, bool); 13] = [
    (3, 64, 0, Some(0), false),
    (64, 64, 2, None, true),
    (64, 128, 5, Some(1), false),
    (128, 128, 7, None, true),
    (128, 256, 10, Some(2), false),
    (256, 256, 12, None, false),
    (256, 256, 14, None, false),
    (256, 256, 16, None, true),
    (256, 512, 19, Some(3), false),
    (512, 512, 21, Some(4), false),
    (512, 512, 23, None, false),
    (512, 512, 25, None, true),
    (512, 512, 28, Some(5), false),
];

/// Where extractor weights come from.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExtractorSource {
    /// A safetensors file with torchvision's `features.N.weight` names.
    Pretrained(PathBuf),
    /// He-initialized random weights. No download needed, but the losses
    /// no longer measure ImageNet-perceptual similarity.
    Random { seed: u64 },
}

impl ExtractorSource {
    /// The pretrained file named by [`WEIGHTS_ENV`], if set.
    pub fn from_env() -> Option<Self> {
        std::env::var_os(WEIGHTS_ENV)
            .filter(|v| !v.is_empty())
            .map(|p| Self::Pretrained(PathBuf::from(p)))
    }

    pub fn load(&self) -> Result<Vgg19> {
        match self {
            Self::Pretrained(p) => Vgg19::load(p),
            Self::Random { seed } => Ok(Vgg19::random(*seed)),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Vgg19 {
    convs: Vec<Conv2d>,
    source: ExtractorSource,
}

/// Activations retained for the backward pass.
pub(crate) struct VggTrace {
    /// Input of every conv (after normalization or pooling).
    inputs: Vec<Tensor>,
    /// ReLU output of every conv.
    outputs: Vec<Tensor>,
    pools: Vec<(Vec<u32>, (usize, usize))>,
}

impl Vgg19 {
    pub fn random(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let convs = CONVS
            .iter()
            .map(|&(i, o, _, _, _)| {
                let mut c = Conv2d::zeros(i, o, 3, 1, Padding::Zero);
                let normal = Normal::new(0.0, (2.0 / (i * 9) as f32).sqrt()).expect("positive std");
                c.weight.iter_mut().for_each(|w| *w = normal.sample(&mut rng));
                c
            })
            .collect();
        Self {
            convs,
            source: ExtractorSource::Random { seed },
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path)
            .map_err(|e| Error::Config(format!("cannot read extractor weights {}: {e}", path.display())))?;
        Self::from_safetensors(&bytes).map(|mut v| {
            v.source = ExtractorSource::Pretrained(path.to_path_buf());
            v
        })
    }

    pub fn from_safetensors(bytes: &[u8]) -> Result<Self> {
        let st = SafeTensors::deserialize(bytes).map_err(|e| Error::Config(format!("extractor weights: {e}")))?;
        let read = |name: &str, len: usize| -> Result<Vec<f32>> {
            let t = st
                .tensor(name)
                .map_err(|_| Error::Config(format!("extractor weights lack {name}")))?;
            if t.dtype() != Dtype::F32 {
                return Err(Error::Config(format!("{name} must be F32, found {:?}", t.dtype())));
            }
            let v: Vec<f32> = t
                .data()
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect();
            if v.len() != len {
                return Err(Error::Config(format!("{name} has {} values, expected {len}", v.len())));
            }
            Ok(v)
        };
        let convs = CONVS
            .iter()
            .map(|&(i, o, idx, _, _)| {
                let mut c = Conv2d::zeros(i, o, 3, 1, Padding::Zero);
                c.weight = read(&format!("features.{idx}.weight"), o * i * 9)?;
                c.bias = read(&format!("features.{idx}.bias"), o)?;
                Ok(c)
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            convs,
            source: ExtractorSource::Random { seed: 0 },
        })
    }

    /// Named tensors in torchvision layout, for writing test fixtures.
    pub fn named_tensors(&self) -> Vec<(String, Vec<usize>, &[f32])> {
        let mut out = Vec::new();
        for (c, &(i, o, idx, _, _)) in self.convs.iter().zip(CONVS.iter()) {
            out.push((format!("features.{idx}.weight"), vec![o, i, 3, 3], &c.weight[..]));
            out.push((format!("features.{idx}.bias"), vec![o], &c.bias[..]));
        }
        out
    }

    pub fn source(&self) -> &ExtractorSource {
        &self.source
    }

    fn normalize(image: &Tensor) -> Tensor {
        let mut x = image.clone();
        for c in 0..3 {
            let (m, s) = (IMAGENET_MEAN[c], IMAGENET_STD[c]);
            x.plane_mut(c).iter_mut().for_each(|v| *v = (*v - m) / s);
        }
        x
    }

    /// Forward pass returning the six tapped activations.
    pub fn extract_tensor(&self, image: &Tensor) -> Result<[Tensor; 6]> {
        self.check_input(image)?;
        let mut taps: [Option<Tensor>; 6] = Default::default();
        let mut h = Self::normalize(image);
        for (conv, &(_, _, _, tap, pool)) in self.convs.iter().zip(CONVS.iter()) {
            h = conv.forward(&h)?;
            relu_inplace(&mut h);
            if let Some(t) = tap {
                taps[t] = Some(h.clone());
            }
            if t_is_last(tap) {
                break;
            }
            if pool {
                h = maxpool2(&h).0;
            }
        }
        Ok(taps.map(|t| t.expect("every tap visited")))
    }

    pub(crate) fn forward_trace(&self, image: &Tensor) -> Result<([Tensor; 6], VggTrace)> {
        self.check_input(image)?;
        let mut taps: [Option<Tensor>; 6] = Default::default();
        let mut trace = VggTrace {
            inputs: Vec::with_capacity(self.convs.len()),
            outputs: Vec::with_capacity(self.convs.len()),
            pools: Vec::new(),
        };
        let mut h = Self::normalize(image);
        for (conv, &(_, _, _, tap, pool)) in self.convs.iter().zip(CONVS.iter()) {
            let mut y = conv.forward(&h)?;
            relu_inplace(&mut y);
            trace.inputs.push(h);
            if let Some(t) = tap {
                taps[t] = Some(y.clone());
            }
            h = if pool && !t_is_last(tap) {
                let (p, idx) = maxpool2(&y);
                trace.pools.push((idx, y.extent()));
                p
            } else {
                y.clone()
            };
            trace.outputs.push(y);
        }
        Ok((taps.map(|t| t.expect("every tap visited")), trace))
    }

    /// Backpropagates gradients given at the taps down to the unit-range
    /// input image.
    pub(crate) fn backward(&self, trace: &VggTrace, tap_grads: [Option<Tensor>; 6]) -> Result<Tensor> {
        let mut tap_grads = tap_grads;
        let mut g: Option<Tensor> = None;
        let mut pool_idx = trace.pools.len();
        for (k, (conv, &(_, _, _, tap, pool))) in self.convs.iter().zip(CONVS.iter()).enumerate().rev() {
            // Gradient flowing into this conv's relu output from above.
            if pool && !t_is_last(tap) {
                if let Some(up) = g.take() {
                    pool_idx -= 1;
                    let (idx, extent) = &trace.pools[pool_idx];
                    g = Some(maxpool2_backward(&up, idx, *extent));
                } else {
                    pool_idx -= 1;
                }
            }
            if let Some(t) = tap {
                if let Some(tg) = tap_grads[t].take() {
                    match g.as_mut() {
                        Some(acc) => acc.add_assign(&tg),
                        None => g = Some(tg),
                    }
                }
            }
            let Some(mut gy) = g.take() else { continue };
            relu_backward(&trace.outputs[k], &mut gy);
            g = conv.backward(&trace.inputs[k], &gy, None, true)?;
        }
        let mut g = g.ok_or_else(|| Error::Shape("no gradient reached the extractor input".into()))?;
        for (c, s) in IMAGENET_STD.iter().enumerate() {
            g.plane_mut(c).iter_mut().for_each(|v| *v /= s);
        }
        Ok(g)
    }

    fn check_input(&self, image: &Tensor) -> Result<()> {
        if image.channels() != 3 {
            return Err(Error::Shape(format!("extractor expects RGB, got {}", image.shape_str())));
        }
        let (h, w) = image.extent();
        if h < 16 || w < 16 {
            return Err(Error::Input(format!("extractor input {h}x{w} is below 16x16")));
        }
        Ok(())
    }

    pub fn extract(&self, image: &ImagePlane) -> Result<super::PerceptualFeatures> {
        Ok(super::PerceptualFeatures {
            layers: self.extract_tensor(&image.to_tensor())?,
        })
    }
}

fn t_is_last(tap: Option<usize>) -> bool {
    tap == Some(5)
}
