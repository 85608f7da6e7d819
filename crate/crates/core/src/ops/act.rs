use crate::tensor::Tensor;

pub fn relu_inplace(x: &mut Tensor) {
    x.map_inplace(|v| v.max(0.0));
}

/// Masks `grad` by the positive entries of the ReLU *output*.
pub fn relu_backward(output: &Tensor, grad: &mut Tensor) {
    grad.data_mut()
        .iter_mut()
        .zip(output.data())
        .for_each(|(g, y)| {
            if *y <= 0.0 {
                *g = 0.0
            }
        });
}

pub fn sigmoid_inplace(x: &mut Tensor) {
    x.map_inplace(|v| 1.0 / (1.0 + (-v).exp()));
}

pub fn sigmoid_backward(output: &Tensor, grad: &mut Tensor) {
    grad.data_mut()
        .iter_mut()
        .zip(output.data())
        .for_each(|(g, y)| *g *= y * (1.0 - y));
}

/// 2×2 max pooling with stride 2 (odd trailing rows/cols dropped). Returns
/// the pooled map and the flat argmax index of each output.
pub fn maxpool2(x: &Tensor) -> (Tensor, Vec<u32>) {
    let (h, w) = x.extent();
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Tensor::zeros(x.channels(), oh, ow);
    let mut arg = Vec::with_capacity(x.channels() * oh * ow);
    for c in 0..x.channels() {
        let src = x.plane(c);
        let dst = out.plane_mut(c);
        for y in 0..oh {
            for xx in 0..ow {
                let mut best = (2 * y) * w + 2 * xx;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let i = (2 * y + dy) * w + 2 * xx + dx;
                    if src[i] > src[best] {
                        best = i;
                    }
                }
                dst[y * ow + xx] = src[best];
                arg.push(best as u32);
            }
        }
    }
    (out, arg)
}

pub fn maxpool2_backward(grad: &Tensor, argmax: &[u32], input_extent: (usize, usize)) -> Tensor {
    let mut out = Tensor::zeros(grad.channels(), input_extent.0, input_extent.1);
    let n = grad.plane_len();
    for c in 0..grad.channels() {
        let g = grad.plane(c);
        let a = &argmax[c * n..(c + 1) * n];
        let dst = out.plane_mut(c);
        for (gv, &i) in g.iter().zip(a) {
            dst[i as usize] += gv;
        }
    }
    out
}
