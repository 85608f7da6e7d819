//! Inference and training passes through the two-branch network.
//!
//! The training pass keeps every activation the backward pass needs; the
//! inference pass drops intermediates as soon as they are consumed.

use super::cin::{CinGrad, CinParamSet};
use super::weights::{ArchConfig, CinIndex, NetGrads, NetWeights};
use crate::error::{Error, Result};
use crate::ops::act::{relu_backward, relu_inplace, sigmoid_backward, sigmoid_inplace};
use crate::ops::{
    cin_backward, cin_forward, cin_forward_cached, scaled_extent, upsample_nearest2,
    upsample_nearest2_backward, CinCache, Conv2d, ConvGrad, Resize,
};
use crate::tensor::Tensor;

// ---------------------------------------------------------------- inference

fn conv_cin_relu(conv: &Conv2d, x: &Tensor, cin: &CinParamSet, layer: usize) -> Result<Tensor> {
    let y = conv.forward(x)?;
    let mut y = cin_forward(&y, cin.gamma(layer), cin.beta(layer))?;
    relu_inplace(&mut y);
    Ok(y)
}

fn conv_relu(conv: &Conv2d, x: &Tensor) -> Result<Tensor> {
    let mut y = conv.forward(x)?;
    relu_inplace(&mut y);
    Ok(y)
}

fn residual(pair: &[Conv2d; 2], x: Tensor, cin: &CinParamSet, layer: usize) -> Result<Tensor> {
    let h = conv_cin_relu(&pair[0], &x, cin, layer)?;
    let h = pair[1].forward(&h)?;
    let mut y = cin_forward(&h, cin.gamma(layer + 1), cin.beta(layer + 1))?;
    y.add_assign(&x);
    Ok(y)
}

pub(crate) fn high_res_branch(w: &NetWeights, x: &Tensor) -> Result<Tensor> {
    let mut h = conv_relu(&w.hi[0], x)?;
    for conv in &w.hi[1..] {
        h = conv_relu(conv, &h)?;
    }
    Ok(h)
}

pub(crate) fn dynamic_branch(w: &NetWeights, arch: &ArchConfig, x: &Tensor, cin: &CinParamSet) -> Result<Tensor> {
    let idx = CinIndex::new(arch);
    let mut h = conv_cin_relu(&w.dyn_in[0], x, cin, idx.dyn_in)?;
    for (i, conv) in w.dyn_in.iter().enumerate().skip(1) {
        h = conv_cin_relu(conv, &h, cin, idx.dyn_in + i)?;
    }
    for (r, pair) in w.dyn_res.iter().enumerate() {
        h = residual(pair, h, cin, idx.dyn_res + 2 * r)?;
    }
    for (i, conv) in w.dyn_up.iter().enumerate() {
        h = conv_cin_relu(conv, &upsample_nearest2(&h), cin, idx.dyn_up + i)?;
    }
    Ok(h)
}

/// Runs both branches on an image tensor whose extent is already a multiple
/// of four. Returns the high-resolution features and the dynamic-branch
/// output at the branch's own (shrunk) resolution.
pub(crate) fn encode_parts(
    w: &NetWeights,
    arch: &ArchConfig,
    x: &Tensor,
    lambda_s: f32,
    cin: &CinParamSet,
) -> Result<(Tensor, Tensor)> {
    let full = x.extent();
    let small = Resize::bilinear(full, scaled_extent(full, lambda_s), true).apply(x);
    let d = dynamic_branch(w, arch, &small, cin)?;
    drop(small);
    let hi = high_res_branch(w, x)?;
    Ok((hi, d))
}

pub(crate) fn decode_tensor(w: &NetWeights, arch: &ArchConfig, f: &Tensor, cin: &CinParamSet) -> Result<Tensor> {
    if f.channels() != arch.feature_channels() {
        return Err(Error::Shape(format!(
            "decoder expects {} feature channels, got {}",
            arch.feature_channels(),
            f.channels()
        )));
    }
    let idx = CinIndex::new(arch);
    let h = conv_cin_relu(&w.merge, f, cin, idx.dec_merge)?;
    let h = residual(&w.dec_res, h, cin, idx.dec_res)?;
    let h = conv_cin_relu(&w.dec_conv, &h, cin, idx.dec_conv)?;
    let mut out = w.dec_out.forward(&h)?;
    sigmoid_inplace(&mut out);
    Ok(out)
}

// ----------------------------------------------------------------- training

struct ConvCinReluCache {
    input: Tensor,
    cin: CinCache,
    output: Tensor,
}

fn conv_cin_relu_train(conv: &Conv2d, x: Tensor, cin: &CinParamSet, layer: usize) -> Result<ConvCinReluCache> {
    let y = conv.forward(&x)?;
    let (mut y, cache) = cin_forward_cached(&y, cin.gamma(layer), cin.beta(layer))?;
    relu_inplace(&mut y);
    Ok(ConvCinReluCache {
        input: x,
        cin: cache,
        output: y,
    })
}

#[allow(clippy::too_many_arguments)]
fn conv_cin_relu_backward(
    conv: &Conv2d,
    cache: &ConvCinReluCache,
    mut g: Tensor,
    cin: &CinParamSet,
    layer: usize,
    grad: &mut ConvGrad,
    cin_grad: &mut CinGrad,
    need_input: bool,
) -> Result<Option<Tensor>> {
    relu_backward(&cache.output, &mut g);
    let (g, dg, db) = cin_backward(&cache.cin, cin.gamma(layer), &g);
    cin_grad.add(layer, &dg, &db);
    conv.backward(&cache.input, &g, Some(grad), need_input)
}

struct ResidualCache {
    first: ConvCinReluCache,
    second_cin: CinCache,
}

fn residual_train(pair: &[Conv2d; 2], x: Tensor, cin: &CinParamSet, layer: usize) -> Result<(Tensor, ResidualCache)> {
    let first = conv_cin_relu_train(&pair[0], x, cin, layer)?;
    let h = pair[1].forward(&first.output)?;
    let (mut y, second_cin) = cin_forward_cached(&h, cin.gamma(layer + 1), cin.beta(layer + 1))?;
    y.add_assign(&first.input);
    Ok((y, ResidualCache { first, second_cin }))
}

fn residual_backward(
    pair: &[Conv2d; 2],
    cache: &ResidualCache,
    g: Tensor,
    cin: &CinParamSet,
    layer: usize,
    grads: &mut [ConvGrad; 2],
    cin_grad: &mut CinGrad,
) -> Result<Tensor> {
    let (gh, dg, db) = cin_backward(&cache.second_cin, cin.gamma(layer + 1), &g);
    cin_grad.add(layer + 1, &dg, &db);
    let [g0, g1] = grads;
    let gh = pair[1]
        .backward(&cache.first.output, &gh, Some(g1), true)?
        .expect("input grad requested");
    let mut gx = conv_cin_relu_backward(&pair[0], &cache.first, gh, cin, layer, g0, cin_grad, true)?
        .expect("input grad requested");
    gx.add_assign(&g);
    Ok(gx)
}

/// Activations retained by [`forward_train`].
pub(crate) struct TrainTrace {
    hi: Vec<(Tensor, Tensor)>,
    dyn_in: Vec<ConvCinReluCache>,
    dyn_res: Vec<ResidualCache>,
    dyn_up: Vec<ConvCinReluCache>,
    up_resize: Resize,
    hi_channels: usize,
    merge: ConvCinReluCache,
    dec_res: ResidualCache,
    dec_conv: ConvCinReluCache,
    out_input: Tensor,
    output: Tensor,
}

impl TrainTrace {
    pub fn output(&self) -> &Tensor {
        &self.output
    }
}

pub(crate) fn forward_train(
    w: &NetWeights,
    arch: &ArchConfig,
    x: &Tensor,
    lambda_s: f32,
    cin: &CinParamSet,
) -> Result<TrainTrace> {
    let idx = CinIndex::new(arch);
    let full = x.extent();

    let mut hi = Vec::with_capacity(w.hi.len());
    let mut h = x.clone();
    for conv in &w.hi {
        let y = conv_relu(conv, &h)?;
        hi.push((h, y.clone()));
        h = y;
    }
    let hi_out = h;

    let small = Resize::bilinear(full, scaled_extent(full, lambda_s), true).apply(x);
    let mut dyn_in = Vec::with_capacity(w.dyn_in.len());
    let mut h = small;
    for (i, conv) in w.dyn_in.iter().enumerate() {
        let c = conv_cin_relu_train(conv, h, cin, idx.dyn_in + i)?;
        h = c.output.clone();
        dyn_in.push(c);
    }
    let mut dyn_res = Vec::with_capacity(w.dyn_res.len());
    for (r, pair) in w.dyn_res.iter().enumerate() {
        let (y, c) = residual_train(pair, h, cin, idx.dyn_res + 2 * r)?;
        dyn_res.push(c);
        h = y;
    }
    let mut dyn_up = Vec::with_capacity(w.dyn_up.len());
    for (i, conv) in w.dyn_up.iter().enumerate() {
        let c = conv_cin_relu_train(conv, upsample_nearest2(&h), cin, idx.dyn_up + i)?;
        h = c.output.clone();
        dyn_up.push(c);
    }
    let up_resize = Resize::bilinear(h.extent(), full, false);
    let d = up_resize.apply(&h);

    let features = Tensor::concat(&[&hi_out, &d])?;
    let merge = conv_cin_relu_train(&w.merge, features, cin, idx.dec_merge)?;
    let (h, dec_res) = residual_train(&w.dec_res, merge.output.clone(), cin, idx.dec_res)?;
    let dec_conv = conv_cin_relu_train(&w.dec_conv, h, cin, idx.dec_conv)?;
    let out_input = dec_conv.output.clone();
    let mut output = w.dec_out.forward(&out_input)?;
    sigmoid_inplace(&mut output);

    Ok(TrainTrace {
        hi,
        dyn_in,
        dyn_res,
        dyn_up,
        up_resize,
        hi_channels: hi_out.channels(),
        merge,
        dec_res,
        dec_conv,
        out_input,
        output,
    })
}

/// Backpropagates `grad_output` (w.r.t. the sigmoid output) into `grads` and
/// `cin_grad`.
pub(crate) fn backward_train(
    w: &NetWeights,
    arch: &ArchConfig,
    trace: &TrainTrace,
    cin: &CinParamSet,
    mut grad_output: Tensor,
    grads: &mut NetGrads,
    cin_grad: &mut CinGrad,
) -> Result<()> {
    let idx = CinIndex::new(arch);
    sigmoid_backward(&trace.output, &mut grad_output);
    let g = w
        .dec_out
        .backward(&trace.out_input, &grad_output, Some(&mut grads.dec_out), true)?
        .expect("input grad requested");
    let g = conv_cin_relu_backward(&w.dec_conv, &trace.dec_conv, g, cin, idx.dec_conv, &mut grads.dec_conv, cin_grad, true)?
        .expect("input grad requested");
    let g = residual_backward(&w.dec_res, &trace.dec_res, g, cin, idx.dec_res, &mut grads.dec_res, cin_grad)?;
    let g = conv_cin_relu_backward(&w.merge, &trace.merge, g, cin, idx.dec_merge, &mut grads.merge, cin_grad, true)?
        .expect("input grad requested");

    let (g_hi, g_dyn) = g.split_channels(trace.hi_channels);

    let mut g = g_hi;
    for (i, (input, output)) in trace.hi.iter().enumerate().rev() {
        relu_backward(output, &mut g);
        match w.hi[i].backward(input, &g, Some(&mut grads.hi[i]), i > 0)? {
            Some(next) => g = next,
            None => break,
        }
    }

    let mut g = trace.up_resize.adjoint(&g_dyn);
    for (i, cache) in trace.dyn_up.iter().enumerate().rev() {
        let gu = conv_cin_relu_backward(&w.dyn_up[i], cache, g, cin, idx.dyn_up + i, &mut grads.dyn_up[i], cin_grad, true)?
            .expect("input grad requested");
        g = upsample_nearest2_backward(&gu);
    }
    for (r, cache) in trace.dyn_res.iter().enumerate().rev() {
        g = residual_backward(&w.dyn_res[r], cache, g, cin, idx.dyn_res + 2 * r, &mut grads.dyn_res[r], cin_grad)?;
    }
    for (i, cache) in trace.dyn_in.iter().enumerate().rev() {
        match conv_cin_relu_backward(&w.dyn_in[i], cache, g, cin, idx.dyn_in + i, &mut grads.dyn_in[i], cin_grad, i > 0)? {
            Some(next) => g = next,
            None => break,
        }
    }
    Ok(())
}
