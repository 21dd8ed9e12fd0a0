//! Primitive layers with hand-written backward passes.
//!
//! Every layer caches what its backward pass needs during a training-mode
//! forward call. Inference-mode calls cache nothing.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::tensor::{gemm, Tensor};

/// A named tensor owned by a layer. Buffers (batch-norm running statistics)
/// carry no gradient and are skipped by optimizers.
#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub shape: Vec<usize>,
    pub value: Vec<f32>,
    pub grad: Vec<f32>,
    pub trainable: bool,
}

impl Param {
    pub fn new(shape: Vec<usize>, value: Vec<f32>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        let grad = vec![0.0; value.len()];
        Self {
            shape,
            value,
            grad,
            trainable: true,
        }
    }

    pub fn buffer(shape: Vec<usize>, value: Vec<f32>) -> Self {
        Self {
            shape,
            value,
            grad: Vec::new(),
            trainable: false,
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = 0.0);
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }
}

/// Static cost of one layer for a single input item.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Cost {
    pub macs: u64,
    pub params: u64,
}

impl std::ops::AddAssign for Cost {
    fn add_assign(&mut self, rhs: Self) {
        self.macs += rhs.macs;
        self.params += rhs.params;
    }
}

pub type Visitor<'a> = dyn FnMut(&str, &mut Param) + 'a;

pub trait Layer {
    fn forward(&mut self, x: &Tensor, train: bool) -> Tensor;
    /// Propagates `grad` (w.r.t. the last training-mode output), accumulating
    /// parameter gradients and returning the gradient w.r.t. the input.
    fn backward(&mut self, grad: &Tensor) -> Tensor;
    fn visit(&mut self, prefix: &str, f: &mut Visitor<'_>);
    /// Output shape and cost for an input of `shape` (batch dimension ignored).
    fn profile(&self, shape: [usize; 4]) -> ([usize; 4], Cost);
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

pub(crate) fn kaiming_fan_out(rng: &mut ChaCha8Rng, n: usize, fan_out: usize) -> Vec<f32> {
    let std = (2.0 / fan_out as f64).sqrt();
    let dist = Normal::new(0.0, std).expect("positive std");
    (0..n).map(|_| dist.sample(rng) as f32).collect()
}

// ---------------------------------------------------------------------------
// Convolution
// ---------------------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    /// Either 1 (dense) or `in_ch == out_ch` (depthwise).
    pub groups: usize,
    pub weight: Param,
    pub bias: Option<Param>,
    input: Option<Tensor>,
}

impl Conv2d {
    pub fn new(
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        groups: usize,
        bias: bool,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        assert!(
            groups == 1 || (groups == in_ch && groups == out_ch),
            "only dense and depthwise convolutions are supported"
        );
        let per_group_in = in_ch / groups;
        let n = out_ch * per_group_in * kernel * kernel;
        let fan_out = out_ch / groups * kernel * kernel;
        let weight = Param::new(
            vec![out_ch, per_group_in, kernel, kernel],
            kaiming_fan_out(rng, n, fan_out),
        );
        Self {
            in_ch,
            out_ch,
            kernel,
            stride,
            padding: (kernel - 1) / 2,
            groups,
            weight,
            bias: bias.then(|| Param::new(vec![out_ch], vec![0.0; out_ch])),
            input: None,
        }
    }

    fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        let oh = (h + 2 * self.padding - self.kernel) / self.stride + 1;
        let ow = (w + 2 * self.padding - self.kernel) / self.stride + 1;
        (oh, ow)
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.groups == 1
    }

    fn im2col(&self, x: &[f32], h: usize, w: usize, oh: usize, ow: usize) -> Vec<f32> {
        let k = self.kernel;
        let p = self.padding as isize;
        let s = self.stride as isize;
        let mut col = vec![0.0; self.in_ch * k * k * oh * ow];
        for c in 0..self.in_ch {
            let plane = &x[c * h * w..(c + 1) * h * w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = (c * k + ky) * k + kx;
                    let dst = &mut col[row * oh * ow..(row + 1) * oh * ow];
                    for oy in 0..oh {
                        let iy = oy as isize * s + ky as isize - p;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for ox in 0..ow {
                            let ix = ox as isize * s + kx as isize - p;
                            if ix >= 0 && ix < w as isize {
                                dst[oy * ow + ox] = plane[iy as usize * w + ix as usize];
                            }
                        }
                    }
                }
            }
        }
        col
    }

    fn col2im(&self, col: &[f32], dx: &mut [f32], h: usize, w: usize, oh: usize, ow: usize) {
        let k = self.kernel;
        let p = self.padding as isize;
        let s = self.stride as isize;
        for c in 0..self.in_ch {
            let plane = &mut dx[c * h * w..(c + 1) * h * w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = (c * k + ky) * k + kx;
                    let src = &col[row * oh * ow..(row + 1) * oh * ow];
                    for oy in 0..oh {
                        let iy = oy as isize * s + ky as isize - p;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for ox in 0..ow {
                            let ix = ox as isize * s + kx as isize - p;
                            if ix >= 0 && ix < w as isize {
                                plane[iy as usize * w + ix as usize] += src[oy * ow + ox];
                            }
                        }
                    }
                }
            }
        }
    }

    /// Valid output-column range for kernel column `kx`.
    fn ox_range(&self, kx: usize, w: usize, ow: usize) -> std::ops::Range<usize> {
        let s = self.stride;
        let p = self.padding;
        // ix = ox * s + kx - p must lie in [0, w)
        let lo = if kx >= p { 0 } else { (p - kx).div_ceil(s) };
        let hi_incl = (w - 1 + p).checked_sub(kx).map(|v| v / s);
        match hi_incl {
            Some(hi) => lo..(hi + 1).min(ow),
            None => 0..0,
        }
    }

    fn depthwise_forward(&self, x: &[f32], out: &mut [f32], h: usize, w: usize, oh: usize, ow: usize) {
        let k = self.kernel;
        let s = self.stride;
        let p = self.padding;
        for c in 0..self.in_ch {
            let xin = &x[c * h * w..(c + 1) * h * w];
            let o = &mut out[c * oh * ow..(c + 1) * oh * ow];
            let wk = &self.weight.value[c * k * k..(c + 1) * k * k];
            for ky in 0..k {
                for kx in 0..k {
                    let wv = wk[ky * k + kx];
                    let range = self.ox_range(kx, w, ow);
                    if range.is_empty() {
                        continue;
                    }
                    for oy in 0..oh {
                        let iy = (oy * s + ky) as isize - p as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let xrow = &xin[iy as usize * w..(iy as usize + 1) * w];
                        let orow = &mut o[oy * ow..(oy + 1) * ow];
                        for ox in range.clone() {
                            orow[ox] += wv * xrow[ox * s + kx - p];
                        }
                    }
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn depthwise_backward(
        &mut self,
        x: &[f32],
        dy: &[f32],
        dx: &mut [f32],
        h: usize,
        w: usize,
        oh: usize,
        ow: usize,
    ) {
        let k = self.kernel;
        let s = self.stride;
        let p = self.padding;
        for c in 0..self.in_ch {
            let xin = &x[c * h * w..(c + 1) * h * w];
            let g = &dy[c * oh * ow..(c + 1) * oh * ow];
            let dxc = &mut dx[c * h * w..(c + 1) * h * w];
            for ky in 0..k {
                for kx in 0..k {
                    let wi = c * k * k + ky * k + kx;
                    let wv = self.weight.value[wi];
                    let range = self.ox_range(kx, w, ow);
                    if range.is_empty() {
                        continue;
                    }
                    let mut dw = 0.0f32;
                    for oy in 0..oh {
                        let iy = (oy * s + ky) as isize - p as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let row = iy as usize * w;
                        let grow = &g[oy * ow..(oy + 1) * ow];
                        for ox in range.clone() {
                            let ix = row + ox * s + kx - p;
                            dw += grow[ox] * xin[ix];
                            dxc[ix] += wv * grow[ox];
                        }
                    }
                    self.weight.grad[wi] += dw;
                }
            }
        }
    }
}

impl Layer for Conv2d {
    fn forward(&mut self, x: &Tensor, train: bool) -> Tensor {
        let [n, c, h, w] = x.shape;
        assert_eq!(c, self.in_ch, "conv input channels");
        let (oh, ow) = self.out_hw(h, w);
        let mut out = Tensor::zeros([n, self.out_ch, oh, ow]);
        let kk = self.in_ch / self.groups * self.kernel * self.kernel;
        for b in 0..n {
            let xi = x.item(b);
            let oi = out.item_mut(b);
            if self.groups > 1 {
                self.depthwise_forward(xi, oi, h, w, oh, ow);
            } else if self.is_pointwise() {
                gemm(self.out_ch, self.in_ch, h * w, &self.weight.value, false, xi, false, oi, 0.0);
            } else {
                let col = self.im2col(xi, h, w, oh, ow);
                gemm(self.out_ch, kk, oh * ow, &self.weight.value, false, &col, false, oi, 0.0);
            }
            if let Some(bias) = &self.bias {
                for (oc, bv) in bias.value.iter().enumerate() {
                    oi[oc * oh * ow..(oc + 1) * oh * ow]
                        .iter_mut()
                        .for_each(|v| *v += bv);
                }
            }
        }
        if train {
            self.input = Some(x.clone());
        }
        out
    }

    fn backward(&mut self, grad: &Tensor) -> Tensor {
        let x = self.input.take().expect("conv backward without training forward");
        let [n, _, h, w] = x.shape;
        let [_, _, oh, ow] = grad.shape;
        let mut dx = Tensor::zeros(x.shape);
        let kk = self.in_ch / self.groups * self.kernel * self.kernel;
        for b in 0..n {
            let xi = x.item(b);
            let gi = grad.item(b);
            if let Some(bias) = &mut self.bias {
                for oc in 0..self.out_ch {
                    bias.grad[oc] += gi[oc * oh * ow..(oc + 1) * oh * ow].iter().sum::<f32>();
                }
            }
            if self.groups > 1 {
                self.depthwise_backward(xi, gi, dx.item_mut(b), h, w, oh, ow);
            } else if self.is_pointwise() {
                // dW += dY · Xᵀ ; dX = Wᵀ · dY
                gemm(self.out_ch, h * w, self.in_ch, gi, false, xi, true, &mut self.weight.grad, 1.0);
                gemm(self.in_ch, self.out_ch, h * w, &self.weight.value, true, gi, false, dx.item_mut(b), 0.0);
            } else {
                let col = self.im2col(xi, h, w, oh, ow);
                gemm(self.out_ch, oh * ow, kk, gi, false, &col, true, &mut self.weight.grad, 1.0);
                let mut dcol = vec![0.0; kk * oh * ow];
                gemm(kk, self.out_ch, oh * ow, &self.weight.value, true, gi, false, &mut dcol, 0.0);
                self.col2im(&dcol, dx.item_mut(b), h, w, oh, ow);
            }
        }
        dx
    }

    fn visit(&mut self, prefix: &str, f: &mut Visitor<'_>) {
        f(&join(prefix, "weight"), &mut self.weight);
        if let Some(b) = &mut self.bias {
            f(&join(prefix, "bias"), b);
        }
    }

    fn profile(&self, shape: [usize; 4]) -> ([usize; 4], Cost) {
        let (oh, ow) = self.out_hw(shape[2], shape[3]);
        let per_out = (self.in_ch / self.groups * self.kernel * self.kernel) as u64;
        let params = self.weight.len() + self.bias.as_ref().map_or(0, Param::len);
        (
            [shape[0], self.out_ch, oh, ow],
            Cost {
                macs: (self.out_ch * oh * ow) as u64 * per_out,
                params: params as u64,
            },
        )
    }
}

// ---------------------------------------------------------------------------
// Batch normalization
// ---------------------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct BatchNorm2d {
    pub eps: f32,
    pub momentum: f32,
    pub weight: Param,
    pub bias: Param,
    pub running_mean: Param,
    pub running_var: Param,
    /// Track the unbiased batch variance (reference behaviour); off during calibration.
    pub unbiased: bool,
    cache: Option<BnCache>,
}

#[derive(Clone, Debug)]
struct BnCache {
    xhat: Tensor,
    inv_std: Vec<f32>,
}

impl BatchNorm2d {
    pub fn new(channels: usize, eps: f32, momentum: f32) -> Self {
        Self {
            eps,
            momentum,
            weight: Param::new(vec![channels], vec![1.0; channels]),
            bias: Param::new(vec![channels], vec![0.0; channels]),
            running_mean: Param::buffer(vec![channels], vec![0.0; channels]),
            running_var: Param::buffer(vec![channels], vec![1.0; channels]),
            unbiased: true,
            cache: None,
        }
    }
}

impl Layer for BatchNorm2d {
    #[allow(clippy::needless_range_loop)] // several per-channel arrays share the index
    fn forward(&mut self, x: &Tensor, train: bool) -> Tensor {
        let [n, c, _, _] = x.shape;
        let plane = x.plane();
        let mut out = Tensor::zeros(x.shape);
        if !train {
            for ch in 0..c {
                let inv = 1.0 / (self.running_var.value[ch] + self.eps).sqrt();
                let scale = self.weight.value[ch] * inv;
                let shift = self.bias.value[ch] - self.running_mean.value[ch] * scale;
                for b in 0..n {
                    let off = (b * c + ch) * plane;
                    for i in off..off + plane {
                        out.data[i] = x.data[i] * scale + shift;
                    }
                }
            }
            return out;
        }
        let m = (n * plane) as f64;
        let mut xhat = Tensor::zeros(x.shape);
        let mut inv_std = vec![0.0; c];
        for ch in 0..c {
            let mut sum = 0.0f64;
            let mut sq = 0.0f64;
            for b in 0..n {
                let off = (b * c + ch) * plane;
                for &v in &x.data[off..off + plane] {
                    sum += v as f64;
                    sq += (v as f64) * (v as f64);
                }
            }
            let mean = sum / m;
            let var = (sq / m - mean * mean).max(0.0);
            let inv = 1.0 / (var + self.eps as f64).sqrt();
            inv_std[ch] = inv as f32;
            let tracked = if self.unbiased && m > 1.0 { var * m / (m - 1.0) } else { var };
            let mom = self.momentum;
            self.running_mean.value[ch] = (1.0 - mom) * self.running_mean.value[ch] + mom * mean as f32;
            self.running_var.value[ch] = (1.0 - mom) * self.running_var.value[ch] + mom * tracked as f32;
            let (g, bta) = (self.weight.value[ch], self.bias.value[ch]);
            for b in 0..n {
                let off = (b * c + ch) * plane;
                for i in off..off + plane {
                    let xh = ((x.data[i] as f64 - mean) * inv) as f32;
                    xhat.data[i] = xh;
                    out.data[i] = xh * g + bta;
                }
            }
        }
        self.cache = Some(BnCache { xhat, inv_std });
        out
    }

    #[allow(clippy::needless_range_loop)] // several per-channel arrays share the index
    fn backward(&mut self, grad: &Tensor) -> Tensor {
        let BnCache { xhat, inv_std } = self.cache.take().expect("batch-norm backward without training forward");
        let [n, c, _, _] = grad.shape;
        let plane = grad.plane();
        let m = (n * plane) as f32;
        let mut dx = Tensor::zeros(grad.shape);
        for ch in 0..c {
            let mut sum_dy = 0.0f32;
            let mut sum_dy_xhat = 0.0f32;
            for b in 0..n {
                let off = (b * c + ch) * plane;
                for i in off..off + plane {
                    sum_dy += grad.data[i];
                    sum_dy_xhat += grad.data[i] * xhat.data[i];
                }
            }
            self.weight.grad[ch] += sum_dy_xhat;
            self.bias.grad[ch] += sum_dy;
            let k = self.weight.value[ch] * inv_std[ch] / m;
            for b in 0..n {
                let off = (b * c + ch) * plane;
                for i in off..off + plane {
                    dx.data[i] = k * (m * grad.data[i] - sum_dy - xhat.data[i] * sum_dy_xhat);
                }
            }
        }
        dx
    }

    fn visit(&mut self, prefix: &str, f: &mut Visitor<'_>) {
        f(&join(prefix, "weight"), &mut self.weight);
        f(&join(prefix, "bias"), &mut self.bias);
        f(&join(prefix, "running_mean"), &mut self.running_mean);
        f(&join(prefix, "running_var"), &mut self.running_var);
    }

    fn profile(&self, shape: [usize; 4]) -> ([usize; 4], Cost) {
        (
            shape,
            Cost {
                macs: 0,
                params: (self.weight.len() + self.bias.len()) as u64,
            },
        )
    }
}

// ---------------------------------------------------------------------------
// Element-wise activations
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ActivationKind {
    Relu,
    Relu6,
    Hardswish,
    Hardsigmoid,
}

impl ActivationKind {
    fn apply(self, x: f32) -> f32 {
        match self {
            Self::Relu => x.max(0.0),
            Self::Relu6 => x.clamp(0.0, 6.0),
            Self::Hardswish => x * (x + 3.0).clamp(0.0, 6.0) / 6.0,
            Self::Hardsigmoid => (x + 3.0).clamp(0.0, 6.0) / 6.0,
        }
    }

    fn derivative(self, x: f32) -> f32 {
        match self {
            Self::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Self::Relu6 => {
                if x > 0.0 && x < 6.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Self::Hardswish => {
                if x <= -3.0 {
                    0.0
                } else if x >= 3.0 {
                    1.0
                } else {
                    (2.0 * x + 3.0) / 6.0
                }
            }
            Self::Hardsigmoid => {
                if x > -3.0 && x < 3.0 {
                    1.0 / 6.0
                } else {
                    0.0
                }
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct Activation {
    pub kind: ActivationKind,
    input: Option<Tensor>,
}

impl Activation {
    pub fn new(kind: ActivationKind) -> Self {
        Self { kind, input: None }
    }
}

impl Layer for Activation {
    fn forward(&mut self, x: &Tensor, train: bool) -> Tensor {
        let data = x.data.iter().map(|&v| self.kind.apply(v)).collect();
        if train {
            self.input = Some(x.clone());
        }
        Tensor::from_vec(x.shape, data)
    }

    fn backward(&mut self, grad: &Tensor) -> Tensor {
        let x = self.input.take().expect("activation backward without training forward");
        let data = grad
            .data
            .iter()
            .zip(&x.data)
            .map(|(g, &v)| g * self.kind.derivative(v))
            .collect();
        Tensor::from_vec(grad.shape, data)
    }

    fn visit(&mut self, _prefix: &str, _f: &mut Visitor<'_>) {}

    fn profile(&self, shape: [usize; 4]) -> ([usize; 4], Cost) {
        (shape, Cost::default())
    }
}

// ---------------------------------------------------------------------------
// Fully connected, dropout, pooling
// ---------------------------------------------------------------------------

/// `y = x Wᵀ + b` over `[n, in, 1, 1]` inputs. `conv_shaped` stores the weight
/// as `[out, in, 1, 1]` (1x1 convolution naming) instead of `[out, in]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub in_features: usize,
    pub out_features: usize,
    pub weight: Param,
    pub bias: Param,
    input: Option<Tensor>,
}

impl Linear {
    /// Classifier-style initialization: weights ~ N(0, 0.01²), zero bias.
    pub fn classifier(in_features: usize, out_features: usize, rng: &mut ChaCha8Rng) -> Self {
        let dist = Normal::new(0.0, 0.01).expect("positive std");
        let w = (0..in_features * out_features).map(|_| dist.sample(rng) as f32).collect();
        Self::with_weights(in_features, out_features, w, vec![out_features, in_features])
    }

    /// 1x1-convolution-style initialization (kaiming fan-out), zero bias.
    pub fn pointwise(in_features: usize, out_features: usize, rng: &mut ChaCha8Rng) -> Self {
        let w = kaiming_fan_out(rng, in_features * out_features, out_features);
        Self::with_weights(in_features, out_features, w, vec![out_features, in_features, 1, 1])
    }

    fn with_weights(in_features: usize, out_features: usize, w: Vec<f32>, shape: Vec<usize>) -> Self {
        Self {
            in_features,
            out_features,
            weight: Param::new(shape, w),
            bias: Param::new(vec![out_features], vec![0.0; out_features]),
            input: None,
        }
    }
}

impl Layer for Linear {
    fn forward(&mut self, x: &Tensor, train: bool) -> Tensor {
        let n = x.batch();
        assert_eq!(x.item_len(), self.in_features, "linear input width");
        let mut out = Tensor::zeros([n, self.out_features, 1, 1]);
        for b in 0..n {
            out.item_mut(b).copy_from_slice(&self.bias.value);
        }
        gemm(n, self.in_features, self.out_features, &x.data, false, &self.weight.value, true, &mut out.data, 1.0);
        if train {
            self.input = Some(x.clone());
        }
        out
    }

    fn backward(&mut self, grad: &Tensor) -> Tensor {
        let x = self.input.take().expect("linear backward without training forward");
        let n = x.batch();
        // dW (out x in) += dYᵀ · X ; dX = dY · W
        gemm(self.out_features, n, self.in_features, &grad.data, true, &x.data, false, &mut self.weight.grad, 1.0);
        for b in 0..n {
            for (g, d) in self.bias.grad.iter_mut().zip(grad.item(b)) {
                *g += d;
            }
        }
        let mut dx = Tensor::zeros(x.shape);
        gemm(n, self.out_features, self.in_features, &grad.data, false, &self.weight.value, false, &mut dx.data, 0.0);
        dx
    }

    fn visit(&mut self, prefix: &str, f: &mut Visitor<'_>) {
        f(&join(prefix, "weight"), &mut self.weight);
        f(&join(prefix, "bias"), &mut self.bias);
    }

    fn profile(&self, shape: [usize; 4]) -> ([usize; 4], Cost) {
        (
            [shape[0], self.out_features, 1, 1],
            Cost {
                macs: (self.in_features * self.out_features) as u64,
                params: (self.weight.len() + self.bias.len()) as u64,
            },
        )
    }
}

#[derive(Clone, Debug)]
pub struct Dropout {
    pub p: f32,
    rng: ChaCha8Rng,
    mask: Option<Vec<f32>>,
}

impl Dropout {
    pub fn new(p: f32, rng: ChaCha8Rng) -> Self {
        Self { p, rng, mask: None }
    }
}

impl Layer for Dropout {
    fn forward(&mut self, x: &Tensor, train: bool) -> Tensor {
        if !train || self.p == 0.0 {
            if train {
                self.mask = Some(vec![1.0; x.data.len()]);
            }
            return x.clone();
        }
        let keep = 1.0 - self.p;
        let mask: Vec<f32> = (0..x.data.len())
            .map(|_| if self.rng.random::<f32>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        let data = x.data.iter().zip(&mask).map(|(v, m)| v * m).collect();
        self.mask = Some(mask);
        Tensor::from_vec(x.shape, data)
    }

    fn backward(&mut self, grad: &Tensor) -> Tensor {
        let mask = self.mask.take().expect("dropout backward without training forward");
        let data = grad.data.iter().zip(&mask).map(|(g, m)| g * m).collect();
        Tensor::from_vec(grad.shape, data)
    }

    fn visit(&mut self, _prefix: &str, _f: &mut Visitor<'_>) {}

    fn profile(&self, shape: [usize; 4]) -> ([usize; 4], Cost) {
        (shape, Cost::default())
    }
}

/// Global average pooling to `[n, c, 1, 1]`.
pub fn global_avg_pool(x: &Tensor) -> Tensor {
    let [n, c, _, _] = x.shape;
    let plane = x.plane() as f32;
    let data = (0..n * c)
        .map(|i| x.data[i * x.plane()..(i + 1) * x.plane()].iter().sum::<f32>() / plane)
        .collect();
    Tensor::from_vec([n, c, 1, 1], data)
}

pub fn global_avg_pool_backward(grad: &Tensor, shape: [usize; 4]) -> Tensor {
    let plane = shape[2] * shape[3];
    let mut dx = Tensor::zeros(shape);
    for (i, g) in grad.data.iter().enumerate() {
        let v = g / plane as f32;
        dx.data[i * plane..(i + 1) * plane].iter_mut().for_each(|d| *d = v);
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(7)
    }

    fn random_tensor(shape: [usize; 4], seed: u64) -> Tensor {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..shape.iter().product()).map(|_| r.random::<f32>() * 2.0 - 1.0).collect();
        Tensor::from_vec(shape, data)
    }

    /// Reference direct convolution used as an oracle for the fast paths.
    fn direct_conv(conv: &Conv2d, x: &Tensor) -> Tensor {
        let [n, _, h, w] = x.shape;
        let (oh, ow) = conv.out_hw(h, w);
        let k = conv.kernel;
        let cin_g = conv.in_ch / conv.groups;
        let cout_g = conv.out_ch / conv.groups;
        let mut out = Tensor::zeros([n, conv.out_ch, oh, ow]);
        for b in 0..n {
            for oc in 0..conv.out_ch {
                let g = oc / cout_g;
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut s = conv.bias.as_ref().map_or(0.0, |b| b.value[oc]);
                        for icg in 0..cin_g {
                            let ic = g * cin_g + icg;
                            for ky in 0..k {
                                for kx in 0..k {
                                    let iy = (oy * conv.stride + ky) as isize - conv.padding as isize;
                                    let ix = (ox * conv.stride + kx) as isize - conv.padding as isize;
                                    if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                                        s += conv.weight.value[((oc * cin_g + icg) * k + ky) * k + kx]
                                            * x.data[((b * conv.in_ch + ic) * h + iy as usize) * w + ix as usize];
                                    }
                                }
                            }
                        }
                        out.data[((b * conv.out_ch + oc) * oh + oy) * ow + ox] = s;
                    }
                }
            }
        }
        out
    }

    fn assert_close(a: &[f32], b: &[f32], tol: f32) {
        assert_eq!(a.len(), b.len());
        for (i, (x, y)) in a.iter().zip(b).enumerate() {
            assert!((x - y).abs() <= tol * (1.0 + y.abs()), "index {i}: {x} vs {y}");
        }
    }

    #[test]
    fn conv_paths_match_direct_convolution() {
        let cases = [
            (3, 8, 3, 2, 1, true),  // stem-like im2col
            (6, 6, 3, 1, 6, false), // depthwise
            (6, 6, 5, 2, 6, false), // depthwise, stride 2, k5
            (5, 7, 1, 1, 1, false), // pointwise
        ];
        for (i, (cin, cout, k, s, g, bias)) in cases.into_iter().enumerate() {
            let mut conv = Conv2d::new(cin, cout, k, s, g, bias, &mut rng());
            if let Some(b) = &mut conv.bias {
                b.value.iter_mut().enumerate().for_each(|(j, v)| *v = j as f32 * 0.1);
            }
            let x = random_tensor([2, cin, 7, 6], i as u64);
            let got = conv.forward(&x, false);
            let want = direct_conv(&conv, &x);
            assert_eq!(got.shape, want.shape);
            assert_close(&got.data, &want.data, 1e-4);
        }
    }

    /// Scalar loss L = Σ y ⊙ r for a fixed random r, so dL/dy = r.
    fn check_layer_gradients<L: Layer + Clone>(layer: &L, x: &Tensor, eps: f32, tol: f32) {
        let mut l = layer.clone();
        let y = l.forward(x, true);
        let r = random_tensor(y.shape, 99);
        let dx = l.backward(&r);
        let loss = |layer: &L, x: &Tensor| -> f64 {
            let mut l = layer.clone();
            let y = l.forward(x, true);
            y.data.iter().zip(&r.data).map(|(a, b)| (*a as f64) * (*b as f64)).sum()
        };
        for i in (0..x.data.len()).step_by(7) {
            let mut xp = x.clone();
            xp.data[i] += eps;
            let mut xm = x.clone();
            xm.data[i] -= eps;
            let fd = (loss(layer, &xp) - loss(layer, &xm)) / (2.0 * eps as f64);
            let an = dx.data[i] as f64;
            assert!((fd - an).abs() <= tol as f64 * (1.0 + an.abs()), "dx[{i}]: fd {fd} vs analytic {an}");
        }
        let mut grads = Vec::new();
        l.visit("", &mut |name, p| {
            if p.trainable {
                grads.push((name.to_string(), p.grad.clone()));
            }
        });
        for (name, g) in grads {
            for i in (0..g.len()).step_by(5) {
                let perturb = |delta: f32| {
                    let mut c = layer.clone();
                    c.visit("", &mut |n, p| {
                        if n == name {
                            p.value[i] += delta;
                        }
                    });
                    loss(&c, x)
                };
                let fd = (perturb(eps) - perturb(-eps)) / (2.0 * eps as f64);
                let an = g[i] as f64;
                assert!((fd - an).abs() <= tol as f64 * (1.0 + an.abs()), "{name}[{i}]: fd {fd} vs analytic {an}");
            }
        }
    }

    #[test]
    fn conv_gradients_match_finite_differences() {
        let x = random_tensor([2, 3, 5, 5], 1);
        check_layer_gradients(&Conv2d::new(3, 4, 3, 2, 1, true, &mut rng()), &x, 1e-2, 2e-2);
        let x = random_tensor([2, 4, 5, 5], 2);
        check_layer_gradients(&Conv2d::new(4, 4, 3, 1, 4, false, &mut rng()), &x, 1e-2, 2e-2);
        check_layer_gradients(&Conv2d::new(4, 4, 5, 2, 4, false, &mut rng()), &x, 1e-2, 2e-2);
        check_layer_gradients(&Conv2d::new(4, 6, 1, 1, 1, false, &mut rng()), &x, 1e-2, 2e-2);
    }

    #[test]
    fn batchnorm_and_linear_gradients_match_finite_differences() {
        let x = random_tensor([3, 4, 2, 2], 3);
        let mut bn = BatchNorm2d::new(4, 1e-5, 0.1);
        bn.weight.value = vec![0.5, 1.5, -1.0, 2.0];
        check_layer_gradients(&bn, &x, 1e-2, 3e-2);
        let x = random_tensor([3, 5, 1, 1], 4);
        check_layer_gradients(&Linear::pointwise(5, 3, &mut rng()), &x, 1e-2, 2e-2);
    }

    #[test]
    fn activation_derivatives_match_finite_differences() {
        for kind in [ActivationKind::Relu, ActivationKind::Relu6, ActivationKind::Hardswish, ActivationKind::Hardsigmoid] {
            for x in [-4.0f32, -2.5, -0.7, 0.3, 2.2, 5.1, 7.0] {
                let h = 1e-3;
                let fd = (kind.apply(x + h) - kind.apply(x - h)) / (2.0 * h);
                assert!((fd - kind.derivative(x)).abs() < 1e-2, "{kind:?} at {x}");
            }
        }
    }

    #[test]
    fn batchnorm_eval_uses_running_statistics() {
        let mut bn = BatchNorm2d::new(1, 0.0, 0.1);
        bn.running_mean.value[0] = 2.0;
        bn.running_var.value[0] = 4.0;
        let y = bn.forward(&Tensor::from_vec([1, 1, 1, 2], vec![2.0, 6.0]), false);
        assert_eq!(y.data, vec![0.0, 2.0]);
    }

    #[test]
    fn dropout_is_identity_at_inference() {
        let mut d = Dropout::new(0.5, rng());
        let x = random_tensor([2, 8, 1, 1], 5);
        assert_eq!(d.forward(&x, false), x);
    }
}
