//! Layer descriptions and the per-layer forward/backward kernels.
//!
//! Images are laid out height × width × channels. Convolution weights are
//! `[out_channels, kernel_h, kernel_w, in_channels]`, dense weights are
//! `[in_features, out_features]`. Convolution and pooling use valid
//! (unpadded) windows.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind")]
pub enum LayerSpec {
    Conv2D { out_channels: usize, kernel_h: usize, kernel_w: usize, stride: usize },
    MaxPool2D { window: usize, stride: usize },
    Flatten,
    Dense { out_features: usize },
    ReLU,
    Softmax,
}

impl LayerSpec {
    pub fn conv(out_channels: usize, kernel: usize) -> Self {
        LayerSpec::Conv2D { out_channels, kernel_h: kernel, kernel_w: kernel, stride: 1 }
    }

    pub fn pool(window: usize) -> Self {
        LayerSpec::MaxPool2D { window, stride: window }
    }

    pub fn dense(out_features: usize) -> Self {
        LayerSpec::Dense { out_features }
    }

    pub fn has_params(&self) -> bool {
        matches!(self, LayerSpec::Conv2D { .. } | LayerSpec::Dense { .. })
    }

    pub fn name(&self) -> &'static str {
        match self {
            LayerSpec::Conv2D { .. } => "Conv2D",
            LayerSpec::MaxPool2D { .. } => "MaxPool2D",
            LayerSpec::Flatten => "Flatten",
            LayerSpec::Dense { .. } => "Dense",
            LayerSpec::ReLU => "ReLU",
            LayerSpec::Softmax => "Softmax",
        }
    }

    fn check_dims(&self, index: usize) -> Result<()> {
        let ok = match *self {
            LayerSpec::Conv2D { out_channels, kernel_h, kernel_w, stride } => {
                out_channels >= 1 && kernel_h >= 1 && kernel_w >= 1 && stride >= 1
            }
            LayerSpec::MaxPool2D { window, stride } => window >= 1 && stride >= 1,
            LayerSpec::Dense { out_features } => out_features >= 1,
            _ => true,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::ShapeMismatch {
                layer: index,
                detail: format!("{self:?} has a zero dimension"),
            })
        }
    }

    /// Output shape of this layer for `input`, or a shape error naming `index`.
    pub fn output_shape(&self, input: &[usize], index: usize) -> Result<Vec<usize>> {
        self.check_dims(index)?;
        let mismatch = |detail: String| Error::ShapeMismatch { layer: index, detail };
        match *self {
            LayerSpec::Conv2D { out_channels, kernel_h, kernel_w, stride } => {
                let [h, w, _c] = image_dims(input).ok_or_else(|| {
                    mismatch(format!("Conv2D needs a rank-3 input, got {input:?}"))
                })?;
                if kernel_h > h || kernel_w > w {
                    return Err(mismatch(format!(
                        "Conv2D kernel {kernel_h}x{kernel_w} larger than input {h}x{w}"
                    )));
                }
                Ok(vec![(h - kernel_h) / stride + 1, (w - kernel_w) / stride + 1, out_channels])
            }
            LayerSpec::MaxPool2D { window, stride } => {
                let [h, w, c] = image_dims(input).ok_or_else(|| {
                    mismatch(format!("MaxPool2D needs a rank-3 input, got {input:?}"))
                })?;
                if window > h || window > w {
                    return Err(mismatch(format!("MaxPool2D window {window} larger than input {h}x{w}")));
                }
                Ok(vec![(h - window) / stride + 1, (w - window) / stride + 1, c])
            }
            LayerSpec::Flatten => Ok(vec![input.iter().product()]),
            LayerSpec::Dense { out_features } => {
                if input.len() != 1 {
                    return Err(mismatch(format!("Dense needs a rank-1 input, got {input:?}")));
                }
                Ok(vec![out_features])
            }
            LayerSpec::ReLU => Ok(input.to_vec()),
            LayerSpec::Softmax => {
                if input.len() != 1 {
                    return Err(mismatch(format!("Softmax needs a rank-1 input, got {input:?}")));
                }
                Ok(input.to_vec())
            }
        }
    }

    /// Shapes of (weight, bias) for a parameterized layer.
    pub fn param_shapes(&self, input: &[usize]) -> Option<(Vec<usize>, Vec<usize>)> {
        match *self {
            LayerSpec::Conv2D { out_channels, kernel_h, kernel_w, .. } => {
                let c = input[2];
                Some((vec![out_channels, kernel_h, kernel_w, c], vec![out_channels]))
            }
            LayerSpec::Dense { out_features } => {
                Some((vec![input[0], out_features], vec![out_features]))
            }
            _ => None,
        }
    }
}

fn image_dims(shape: &[usize]) -> Option<[usize; 3]> {
    match shape {
        &[h, w, c] => Some([h, w, c]),
        _ => None,
    }
}

/// Weight and bias of a parameterized layer. Also used for their gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl LayerParams {
    pub fn zeros_like(&self) -> Self {
        LayerParams {
            weight: Tensor::zeros(self.weight.shape()),
            bias: Tensor::zeros(self.bias.shape()),
        }
    }

    pub fn len(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn squared_norm(&self) -> f64 {
        self.weight.squared_norm() + self.bias.squared_norm()
    }

    pub fn is_finite(&self) -> bool {
        self.weight.is_finite() && self.bias.is_finite()
    }

    pub fn values(&self) -> impl Iterator<Item = &f64> {
        self.weight.data().iter().chain(self.bias.data())
    }

    pub fn values_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.weight.data_mut().iter_mut().chain(self.bias.data_mut().iter_mut())
    }
}

pub(crate) struct Conv {
    pub in_h: usize,
    pub in_w: usize,
    pub in_c: usize,
    pub out_h: usize,
    pub out_w: usize,
    pub out_c: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
}

impl Conv {
    pub fn new(spec: &LayerSpec, input: &[usize], output: &[usize]) -> Self {
        let LayerSpec::Conv2D { kernel_h, kernel_w, stride, .. } = *spec else {
            unreachable!("Conv::new on {spec:?}")
        };
        Conv {
            in_h: input[0],
            in_w: input[1],
            in_c: input[2],
            out_h: output[0],
            out_w: output[1],
            out_c: output[2],
            kh: kernel_h,
            kw: kernel_w,
            stride,
        }
    }

    fn patch_len(&self) -> usize {
        self.kh * self.kw * self.in_c
    }

    /// Copy the receptive field of output pixel (oy, ox) into `patch`.
    fn gather(&self, x: &[f64], oy: usize, ox: usize, patch: &mut [f64]) {
        let row = self.kw * self.in_c;
        for ky in 0..self.kh {
            let y = oy * self.stride + ky;
            let start = (y * self.in_w + ox * self.stride) * self.in_c;
            patch[ky * row..(ky + 1) * row].copy_from_slice(&x[start..start + row]);
        }
    }

    /// `[out_c, k]` weights as `[k, out_c]`, so inner loops run over channels.
    fn transposed(&self, w: &[f64]) -> Vec<f64> {
        let (k, oc) = (self.patch_len(), self.out_c);
        let mut wt = vec![0.0; k * oc];
        for o in 0..oc {
            for j in 0..k {
                wt[j * oc + o] = w[o * k + j];
            }
        }
        wt
    }

    pub fn forward(&self, x: &[f64], p: &LayerParams, out: &mut [f64]) {
        let k = self.patch_len();
        let w = p.weight.data();
        let b = p.bias.data();
        let oc = self.out_c;
        let wt = self.transposed(w);
        let mut patch = vec![0.0; k];
        for oy in 0..self.out_h {
            for ox in 0..self.out_w {
                self.gather(x, oy, ox, &mut patch);
                let base = (oy * self.out_w + ox) * oc;
                let dst = &mut out[base..base + oc];
                dst.copy_from_slice(b);
                for (j, &pj) in patch.iter().enumerate() {
                    axpy(pj, &wt[j * oc..(j + 1) * oc], dst);
                }
            }
        }
    }

    /// Accumulates parameter gradients into `grad` (when given) and writes the
    /// input gradient into `dx` (when given).
    pub fn backward(
        &self,
        x: &[f64],
        p: &LayerParams,
        dout: &[f64],
        mut grad: Option<&mut LayerParams>,
        mut dx: Option<&mut [f64]>,
    ) {
        let k = self.patch_len();
        let oc = self.out_c;
        let row = self.kw * self.in_c;
        let wt = self.transposed(p.weight.data());
        // weight gradient accumulated as [k, out_c], folded back at the end
        let mut gwt = grad.as_ref().map(|_| vec![0.0; k * oc]);
        let mut patch = vec![0.0; k];
        let mut dpatch = vec![0.0; k];
        if let Some(d) = dx.as_deref_mut() {
            d.fill(0.0);
        }
        for oy in 0..self.out_h {
            for ox in 0..self.out_w {
                let base = (oy * self.out_w + ox) * oc;
                let g = &dout[base..base + oc];
                if let (Some(grad), Some(gwt)) = (grad.as_deref_mut(), gwt.as_mut()) {
                    self.gather(x, oy, ox, &mut patch);
                    for (j, &pj) in patch.iter().enumerate() {
                        axpy(pj, g, &mut gwt[j * oc..(j + 1) * oc]);
                    }
                    for (b, gi) in grad.bias.data_mut().iter_mut().zip(g) {
                        *b += gi;
                    }
                }
                if let Some(d) = dx.as_deref_mut() {
                    for (j, dj) in dpatch.iter_mut().enumerate() {
                        *dj = dot(&wt[j * oc..(j + 1) * oc], g);
                    }
                    for ky in 0..self.kh {
                        let y = oy * self.stride + ky;
                        let start = (y * self.in_w + ox * self.stride) * self.in_c;
                        let dst = &mut d[start..start + row];
                        for (a, b) in dst.iter_mut().zip(&dpatch[ky * row..(ky + 1) * row]) {
                            *a += b;
                        }
                    }
                }
            }
        }
        if let (Some(grad), Some(gwt)) = (grad, gwt) {
            let gw = grad.weight.data_mut();
            for o in 0..oc {
                for j in 0..k {
                    gw[o * k + j] += gwt[j * oc + o];
                }
            }
        }
        debug_assert_eq!(self.in_h * self.in_w * self.in_c, x.len());
    }
}

pub(crate) struct Pool {
    pub in_w: usize,
    pub c: usize,
    pub out_h: usize,
    pub out_w: usize,
    pub window: usize,
    pub stride: usize,
}

impl Pool {
    pub fn new(spec: &LayerSpec, input: &[usize], output: &[usize]) -> Self {
        let LayerSpec::MaxPool2D { window, stride } = *spec else {
            unreachable!("Pool::new on {spec:?}")
        };
        Pool { in_w: input[1], c: input[2], out_h: output[0], out_w: output[1], window, stride }
    }

    /// Flat input index of the maximum in window (oy, ox, ch); first wins on ties.
    fn argmax(&self, x: &[f64], oy: usize, ox: usize, ch: usize) -> usize {
        let mut best = usize::MAX;
        let mut best_v = f64::NEG_INFINITY;
        for ky in 0..self.window {
            for kx in 0..self.window {
                let y = oy * self.stride + ky;
                let xx = ox * self.stride + kx;
                let idx = (y * self.in_w + xx) * self.c + ch;
                if best == usize::MAX || x[idx] > best_v {
                    best = idx;
                    best_v = x[idx];
                }
            }
        }
        best
    }

    pub fn forward(&self, x: &[f64], out: &mut [f64]) {
        for oy in 0..self.out_h {
            for ox in 0..self.out_w {
                for ch in 0..self.c {
                    out[(oy * self.out_w + ox) * self.c + ch] = x[self.argmax(x, oy, ox, ch)];
                }
            }
        }
    }

    pub fn backward(&self, x: &[f64], dout: &[f64], dx: &mut [f64]) {
        dx.fill(0.0);
        for oy in 0..self.out_h {
            for ox in 0..self.out_w {
                for ch in 0..self.c {
                    let src = self.argmax(x, oy, ox, ch);
                    dx[src] += dout[(oy * self.out_w + ox) * self.c + ch];
                }
            }
        }
    }
}

pub(crate) fn dense_forward(x: &[f64], p: &LayerParams, out: &mut [f64]) {
    let n_out = out.len();
    out.copy_from_slice(p.bias.data());
    let w = p.weight.data();
    for (i, &xi) in x.iter().enumerate() {
        if xi != 0.0 {
            axpy(xi, &w[i * n_out..(i + 1) * n_out], out);
        }
    }
}

pub(crate) fn dense_backward(
    x: &[f64],
    p: &LayerParams,
    dout: &[f64],
    grad: Option<&mut LayerParams>,
    dx: Option<&mut [f64]>,
) {
    let n_out = dout.len();
    if let Some(grad) = grad {
        let gw = grad.weight.data_mut();
        for (i, &xi) in x.iter().enumerate() {
            if xi != 0.0 {
                axpy(xi, dout, &mut gw[i * n_out..(i + 1) * n_out]);
            }
        }
        for (b, g) in grad.bias.data_mut().iter_mut().zip(dout) {
            *b += g;
        }
    }
    if let Some(dx) = dx {
        let w = p.weight.data();
        for (i, d) in dx.iter_mut().enumerate() {
            *d = dot(&w[i * n_out..(i + 1) * n_out], dout);
        }
    }
}

pub(crate) fn softmax(x: &[f64], out: &mut [f64]) {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &v) in out.iter_mut().zip(x) {
        *o = (v - max).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

/// Vector-Jacobian product of softmax at output `y`.
pub(crate) fn softmax_backward(y: &[f64], dout: &[f64], dx: &mut [f64]) {
    let inner = dot(y, dout);
    for ((d, &yi), &gi) in dx.iter_mut().zip(y).zip(dout) {
        *d = yi * (gi - inner);
    }
}

/// Four independent partial sums so the loop vectorises.
#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [0.0; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for j in 0..4 {
            acc[j] += x[j] * y[j];
        }
    }
    let mut tail = 0.0;
    for (x, y) in ra.iter().zip(rb) {
        tail += x * y;
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

#[inline]
fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}
