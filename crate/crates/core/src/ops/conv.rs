//! 2-D convolution via row-tiled im2col and SGEMM.
//!
//! The im2col buffer is bounded by [`COL_BUDGET`] samples so memory stays flat
//! at megapixel resolutions even for 9×9 kernels.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Upper bound on im2col buffer size, in `f32` samples.
const COL_BUDGET: usize = 1 << 21;

/// Output-channel count up to which stride-1 convolutions skip im2col.
const DIRECT_MAX_OUT: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Padding {
    Zero,
    Reflect,
}

/// Mirror an out-of-range coordinate back into `0..n` (edge sample not repeated).
#[inline]
pub fn reflect_index(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let mut m = i.rem_euclid(period);
    if m >= n as isize {
        m = period - m;
    }
    m as usize
}

#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: Padding,
    /// `out × in × k × k`, row-major.
    pub weight: Vec<f32>,
    pub bias: Vec<f32>,
}

/// Gradient accumulator matching one [`Conv2d`].
#[derive(Debug, Clone, PartialEq)]
pub struct ConvGrad {
    pub weight: Vec<f32>,
    pub bias: Vec<f32>,
}

impl ConvGrad {
    pub fn zeros_like(conv: &Conv2d) -> Self {
        Self {
            weight: vec![0.0; conv.weight.len()],
            bias: vec![0.0; conv.bias.len()],
        }
    }
}

impl Conv2d {
    pub fn zeros(in_channels: usize, out_channels: usize, kernel: usize, stride: usize, padding: Padding) -> Self {
        Self {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
            weight: vec![0.0; out_channels * in_channels * kernel * kernel],
            bias: vec![0.0; out_channels],
        }
    }

    #[inline]
    fn pad(&self) -> usize {
        self.kernel / 2
    }

    #[inline]
    fn k_len(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    pub fn output_extent(&self, h: usize, w: usize) -> (usize, usize) {
        let p = self.pad();
        (
            (h + 2 * p - self.kernel) / self.stride + 1,
            (w + 2 * p - self.kernel) / self.stride + 1,
        )
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        if x.channels() != self.in_channels {
            return Err(Error::Shape(format!(
                "conv expects {} input channels, got {}",
                self.in_channels,
                x.shape_str()
            )));
        }
        Ok(())
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1
    }

    /// Few outputs and a wide kernel: im2col would write `k²·C` samples per
    /// pixel to feed a GEMM only a few rows tall.
    fn prefers_direct(&self) -> bool {
        self.stride == 1 && self.kernel > 1 && self.out_channels <= DIRECT_MAX_OUT
    }

    /// Row-at-a-time direct convolution. Each output row accumulates shifted
    /// copies of padded input rows, all of which stay in L1.
    fn forward_direct(&self, x: &Tensor, out: &mut Tensor) {
        let (h, w) = x.extent();
        let (k, p, m) = (self.kernel, self.pad(), self.out_channels);
        let (oh, ow) = out.extent();
        let plane = oh * ow;
        let mut row = vec![0.0f32; w + 2 * p];
        let mut acc = vec![0.0f32; m * ow];
        for oy in 0..oh {
            acc.fill(0.0);
            for ci in 0..self.in_channels {
                let src = x.plane(ci);
                for ky in 0..k {
                    let Some(iy) = self.map_coord((oy + ky) as isize - p as isize, h) else {
                        continue;
                    };
                    let line = &src[iy * w..(iy + 1) * w];
                    row[p..p + w].copy_from_slice(line);
                    for e in 0..p {
                        let left = self.map_coord(e as isize - p as isize, w);
                        let right = self.map_coord((w + e) as isize, w);
                        row[e] = left.map_or(0.0, |i| line[i]);
                        row[p + w + e] = right.map_or(0.0, |i| line[i]);
                    }
                    for kx in 0..k {
                        let shifted = &row[kx..kx + ow];
                        for co in 0..m {
                            let wv = self.weight[((co * self.in_channels + ci) * k + ky) * k + kx];
                            let dst = &mut acc[co * ow..(co + 1) * ow];
                            for (d, s) in dst.iter_mut().zip(shifted) {
                                *d += wv * s;
                            }
                        }
                    }
                }
            }
            let data = out.data_mut();
            for co in 0..m {
                data[co * plane + oy * ow..co * plane + (oy + 1) * ow].copy_from_slice(&acc[co * ow..(co + 1) * ow]);
            }
        }
    }

    fn rows_per_tile(&self, ow: usize) -> usize {
        (COL_BUDGET / (self.k_len() * ow).max(1)).max(1)
    }

    /// Index maps from output column (per kernel offset) to input column;
    /// `None` marks zero padding.
    fn column_map(&self, w: usize, ow: usize) -> Vec<Vec<Option<usize>>> {
        let p = self.pad() as isize;
        (0..self.kernel)
            .map(|kx| {
                (0..ow)
                    .map(|ox| self.map_coord((ox * self.stride + kx) as isize - p, w))
                    .collect()
            })
            .collect()
    }

    #[inline]
    fn map_coord(&self, i: isize, n: usize) -> Option<usize> {
        if i >= 0 && (i as usize) < n {
            Some(i as usize)
        } else {
            match self.padding {
                Padding::Zero => None,
                Padding::Reflect => Some(reflect_index(i, n)),
            }
        }
    }

    fn im2col(&self, x: &Tensor, oy0: usize, rows: usize, ow: usize, cmap: &[Vec<Option<usize>>], col: &mut [f32]) {
        let (h, w) = x.extent();
        let k = self.kernel;
        let n = rows * ow;
        let p = self.pad() as isize;
        for ci in 0..self.in_channels {
            let plane = x.plane(ci);
            for ky in 0..k {
                for kx in 0..k {
                    let r = (ci * k + ky) * k + kx;
                    let dst = &mut col[r * n..(r + 1) * n];
                    let map = &cmap[kx];
                    for (t, oy) in (oy0..oy0 + rows).enumerate() {
                        let out_row = &mut dst[t * ow..(t + 1) * ow];
                        match self.map_coord((oy * self.stride + ky) as isize - p, h) {
                            None => out_row.fill(0.0),
                            Some(iy) => {
                                let src = &plane[iy * w..(iy + 1) * w];
                                for (o, m) in out_row.iter_mut().zip(map) {
                                    *o = match m {
                                        Some(ix) => src[*ix],
                                        None => 0.0,
                                    };
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    fn col2im_add(&self, col: &[f32], oy0: usize, rows: usize, ow: usize, cmap: &[Vec<Option<usize>>], gx: &mut Tensor) {
        let (h, w) = gx.extent();
        let k = self.kernel;
        let n = rows * ow;
        let p = self.pad() as isize;
        for ci in 0..self.in_channels {
            for ky in 0..k {
                for kx in 0..k {
                    let r = (ci * k + ky) * k + kx;
                    let src = &col[r * n..(r + 1) * n];
                    let map = &cmap[kx];
                    for (t, oy) in (oy0..oy0 + rows).enumerate() {
                        let Some(iy) = self.map_coord((oy * self.stride + ky) as isize - p, h) else {
                            continue;
                        };
                        let plane = gx.plane_mut(ci);
                        let dst = &mut plane[iy * w..(iy + 1) * w];
                        for (v, m) in src[t * ow..(t + 1) * ow].iter().zip(map) {
                            if let Some(ix) = m {
                                dst[*ix] += v;
                            }
                        }
                    }
                }
            }
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.check_input(x)?;
        let (h, w) = x.extent();
        let (oh, ow) = self.output_extent(h, w);
        let m = self.out_channels;
        let kl = self.k_len();
        let mut out = Tensor::zeros(m, oh, ow);
        let plane = oh * ow;

        if self.prefers_direct() {
            self.forward_direct(x, &mut out);
        } else if self.is_pointwise() {
            // SAFETY: all matrices are dense and sized by the shapes above.
            unsafe {
                matrixmultiply::sgemm(
                    m, kl, plane, 1.0,
                    self.weight.as_ptr(), kl as isize, 1,
                    x.data().as_ptr(), plane as isize, 1,
                    0.0,
                    out.data_mut().as_mut_ptr(), plane as isize, 1,
                );
            }
        } else {
            let tile = self.rows_per_tile(ow);
            let cmap = self.column_map(w, ow);
            let mut col = vec![0.0f32; kl * tile.min(oh) * ow];
            let mut oy0 = 0;
            while oy0 < oh {
                let rows = tile.min(oh - oy0);
                let n = rows * ow;
                self.im2col(x, oy0, rows, ow, &cmap, &mut col[..kl * n]);
                // SAFETY: `col` holds kl×n samples; the output window starts at
                // row oy0 and spans n columns of each of the m channel planes.
                unsafe {
                    matrixmultiply::sgemm(
                        m, kl, n, 1.0,
                        self.weight.as_ptr(), kl as isize, 1,
                        col.as_ptr(), n as isize, 1,
                        0.0,
                        out.data_mut().as_mut_ptr().add(oy0 * ow), plane as isize, 1,
                    );
                }
                oy0 += rows;
            }
        }
        for (c, b) in self.bias.iter().enumerate() {
            out.plane_mut(c).iter_mut().for_each(|v| *v += b);
        }
        Ok(out)
    }

    /// Accumulates parameter gradients into `grad` and returns the gradient
    /// with respect to `x` when `need_input_grad` is set.
    pub fn backward(
        &self,
        x: &Tensor,
        grad_out: &Tensor,
        grad: Option<&mut ConvGrad>,
        need_input_grad: bool,
    ) -> Result<Option<Tensor>> {
        self.check_input(x)?;
        let (h, w) = x.extent();
        let (oh, ow) = self.output_extent(h, w);
        if grad_out.channels() != self.out_channels || grad_out.extent() != (oh, ow) {
            return Err(Error::Shape(format!(
                "conv grad {} does not match output {}x{}x{}",
                grad_out.shape_str(),
                self.out_channels,
                oh,
                ow
            )));
        }
        let m = self.out_channels;
        let kl = self.k_len();
        let plane = oh * ow;
        let mut gx = need_input_grad.then(|| Tensor::zeros(self.in_channels, h, w));
        let mut grad = grad;

        if let Some(g) = grad.as_deref_mut() {
            for (c, gb) in g.bias.iter_mut().enumerate() {
                *gb += grad_out.plane(c).iter().map(|&v| v as f64).sum::<f64>() as f32;
            }
        }

        if self.is_pointwise() {
            // SAFETY: dense operands sized by the shapes checked above.
            unsafe {
                if let Some(g) = grad.as_deref_mut() {
                    matrixmultiply::sgemm(
                        m, plane, kl, 1.0,
                        grad_out.data().as_ptr(), plane as isize, 1,
                        x.data().as_ptr(), 1, plane as isize,
                        1.0,
                        g.weight.as_mut_ptr(), kl as isize, 1,
                    );
                }
                if let Some(gx) = gx.as_mut() {
                    matrixmultiply::sgemm(
                        kl, m, plane, 1.0,
                        self.weight.as_ptr(), 1, kl as isize,
                        grad_out.data().as_ptr(), plane as isize, 1,
                        0.0,
                        gx.data_mut().as_mut_ptr(), plane as isize, 1,
                    );
                }
            }
            return Ok(gx);
        }

        let tile = self.rows_per_tile(ow);
        let cmap = self.column_map(w, ow);
        let mut col = vec![0.0f32; kl * tile.min(oh) * ow];
        let mut oy0 = 0;
        while oy0 < oh {
            let rows = tile.min(oh - oy0);
            let n = rows * ow;
            let go = unsafe { grad_out.data().as_ptr().add(oy0 * ow) };
            if let Some(g) = grad.as_deref_mut() {
                self.im2col(x, oy0, rows, ow, &cmap, &mut col[..kl * n]);
                // SAFETY: grad_out window is m rows of n samples with plane stride.
                unsafe {
                    matrixmultiply::sgemm(
                        m, n, kl, 1.0,
                        go, plane as isize, 1,
                        col.as_ptr(), 1, n as isize,
                        1.0,
                        g.weight.as_mut_ptr(), kl as isize, 1,
                    );
                }
            }
            if let Some(gx) = gx.as_mut() {
                // SAFETY: as above; col receives kl×n samples.
                unsafe {
                    matrixmultiply::sgemm(
                        kl, m, n, 1.0,
                        self.weight.as_ptr(), 1, kl as isize,
                        go, plane as isize, 1,
                        0.0,
                        col.as_mut_ptr(), n as isize, 1,
                    );
                }
                self.col2im_add(&col[..kl * n], oy0, rows, ow, &cmap, gx);
            }
            oy0 += rows;
        }
        Ok(gx)
    }
}
