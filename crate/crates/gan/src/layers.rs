//! Layer primitives with explicit forward and backward passes.
//!
//! Every layer is stateless during a pass: `forward` returns whatever the
//! backward pass will need, and `backward` returns the input gradient plus the
//! parameter gradients keyed by parameter name. Batch items are processed in
//! parallel; reductions over the batch always run in index order so results
//! do not depend on the thread count.

use std::collections::HashMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::tensor::Tensor;

/// Learnable parameter block.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    pub value: Vec<f64>,
    /// Whether weight decay applies.
    pub decay: bool,
}

impl Param {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, value: Vec<f64>, decay: bool) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        Self { name: name.into(), shape, value, decay }
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }
}

/// Non-learnable state saved with a network (batch-norm running statistics).
#[derive(Debug, Clone, PartialEq)]
pub struct Buffer {
    pub name: String,
    pub value: Vec<f64>,
}

/// Parameter gradients keyed by parameter name.
#[derive(Debug, Clone, Default)]
pub struct Grads(pub HashMap<String, Vec<f64>>);

impl Grads {
    pub fn insert(&mut self, name: &str, grad: Vec<f64>) {
        match self.0.get_mut(name) {
            Some(existing) => existing.iter_mut().zip(grad).for_each(|(a, b)| *a += b),
            None => {
                self.0.insert(name.to_string(), grad);
            }
        }
    }

    pub fn get(&self, name: &str) -> Option<&[f64]> {
        self.0.get(name).map(Vec::as_slice)
    }

    pub fn merge(&mut self, other: Grads) {
        for (k, v) in other.0 {
            self.insert(&k, v);
        }
    }
}

/// Access to a network's parameters in a fixed order.
pub trait Module {
    fn params(&self) -> Vec<&Param>;
    fn params_mut(&mut self) -> Vec<&mut Param>;

    fn buffers(&self) -> Vec<Buffer> {
        Vec::new()
    }

    fn set_buffer(&mut self, _name: &str, _value: &[f64]) -> bool {
        false
    }

    fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }
}

// C = A·B + beta·C for row-major C of shape m×n.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (a_rs, a_cs): (isize, isize),
    b: &[f64],
    (b_rs, b_cs): (isize, isize),
    beta: f64,
    c: &mut [f64],
) {
    assert!(c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    assert!(a.len() >= m * k && b.len() >= k * n);
    // SAFETY: the asserted lengths cover every element addressed through the
    // given strides (row-major or transposed views of dense buffers).
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_rs,
            a_cs,
            b.as_ptr(),
            b_rs,
            b_cs,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    pub weight: Param,
    pub bias: Param,
    in_ch: usize,
    out_ch: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
}

struct Geometry {
    c: usize,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
}

impl Conv2d {
    /// Square kernel with "same" padding (`kernel / 2`), He fan-in initialized.
    pub fn new<R: Rng + ?Sized>(
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        rng: &mut R,
    ) -> Self {
        let fan_in = in_ch * kernel * kernel;
        let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).unwrap();
        let weight: Vec<f64> = (0..out_ch * fan_in).map(|_| normal.sample(rng)).collect();
        Self {
            weight: Param::new(format!("{name}.weight"), vec![out_ch, in_ch, kernel, kernel], weight, true),
            bias: Param::new(format!("{name}.bias"), vec![out_ch], vec![0.0; out_ch], false),
            in_ch,
            out_ch,
            kernel,
            stride,
            pad: kernel / 2,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.in_ch
    }

    pub fn out_channels(&self) -> usize {
        self.out_ch
    }

    pub fn kernel(&self) -> usize {
        self.kernel
    }

    pub fn out_size(&self, h: usize, w: usize) -> (usize, usize) {
        let span = |d: usize| (d + 2 * self.pad - self.kernel) / self.stride + 1;
        (span(h), span(w))
    }

    fn geometry(&self, x: &Tensor) -> Geometry {
        assert_eq!(x.c(), self.in_ch, "{}: channel mismatch", self.weight.name);
        let (oh, ow) = self.out_size(x.h(), x.w());
        Geometry { c: x.c(), h: x.h(), w: x.w(), oh, ow }
    }

    fn im2col(&self, img: &[f64], g: &Geometry) -> Vec<f64> {
        let k = self.kernel;
        let p = g.oh * g.ow;
        let mut col = vec![0.0; g.c * k * k * p];
        for c in 0..g.c {
            for ki in 0..k {
                for kj in 0..k {
                    let row = (c * k + ki) * k + kj;
                    let dst = &mut col[row * p..(row + 1) * p];
                    for oy in 0..g.oh {
                        let iy = (oy * self.stride + ki) as isize - self.pad as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        let src = &img[(c * g.h + iy as usize) * g.w..];
                        for ox in 0..g.ow {
                            let ix = (ox * self.stride + kj) as isize - self.pad as isize;
                            if ix >= 0 && ix < g.w as isize {
                                dst[oy * g.ow + ox] = src[ix as usize];
                            }
                        }
                    }
                }
            }
        }
        col
    }

    fn col2im(&self, col: &[f64], g: &Geometry) -> Vec<f64> {
        let k = self.kernel;
        let p = g.oh * g.ow;
        let mut img = vec![0.0; g.c * g.h * g.w];
        for c in 0..g.c {
            for ki in 0..k {
                for kj in 0..k {
                    let row = (c * k + ki) * k + kj;
                    let src = &col[row * p..(row + 1) * p];
                    for oy in 0..g.oh {
                        let iy = (oy * self.stride + ki) as isize - self.pad as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        let base = (c * g.h + iy as usize) * g.w;
                        for ox in 0..g.ow {
                            let ix = (ox * self.stride + kj) as isize - self.pad as isize;
                            if ix >= 0 && ix < g.w as isize {
                                img[base + ix as usize] += src[oy * g.ow + ox];
                            }
                        }
                    }
                }
            }
        }
        img
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        let g = self.geometry(x);
        let p = g.oh * g.ow;
        let ckk = self.in_ch * self.kernel * self.kernel;
        let out: Vec<Vec<f64>> = (0..x.n())
            .into_par_iter()
            .map(|i| {
                let col = self.im2col(x.item(i), &g);
                let mut y = vec![0.0; self.out_ch * p];
                for (o, chunk) in y.chunks_mut(p).enumerate() {
                    chunk.fill(self.bias.value[o]);
                }
                gemm(self.out_ch, ckk, p, &self.weight.value, (ckk as isize, 1), &col, (p as isize, 1), 1.0, &mut y);
                y
            })
            .collect();
        Tensor::from_vec([x.n(), self.out_ch, g.oh, g.ow], out.concat()).unwrap()
    }

    /// Gradients for input `x` given the output gradient `dy`. The input
    /// gradient is skipped when `need_dx` is false.
    pub fn backward(&self, x: &Tensor, dy: &Tensor, need_dx: bool) -> (Option<Tensor>, Grads) {
        let g = self.geometry(x);
        let p = g.oh * g.ow;
        let ckk = self.in_ch * self.kernel * self.kernel;
        let per_item: Vec<(Vec<f64>, Vec<f64>, Option<Vec<f64>>)> = (0..x.n())
            .into_par_iter()
            .map(|i| {
                let col = self.im2col(x.item(i), &g);
                let dyi = dy.item(i);
                let mut dw = vec![0.0; self.out_ch * ckk];
                gemm(self.out_ch, p, ckk, dyi, (p as isize, 1), &col, (1, p as isize), 0.0, &mut dw);
                let db: Vec<f64> = dyi.chunks(p).map(|c| c.iter().sum()).collect();
                let dx = need_dx.then(|| {
                    let mut dcol = vec![0.0; ckk * p];
                    gemm(ckk, self.out_ch, p, &self.weight.value, (1, ckk as isize), dyi, (p as isize, 1), 0.0, &mut dcol);
                    self.col2im(&dcol, &g)
                });
                (dw, db, dx)
            })
            .collect();
        let mut dw = vec![0.0; self.weight.len()];
        let mut db = vec![0.0; self.out_ch];
        let mut dx_data = Vec::with_capacity(if need_dx { x.len() } else { 0 });
        for (w_i, b_i, x_i) in per_item {
            dw.iter_mut().zip(w_i).for_each(|(a, b)| *a += b);
            db.iter_mut().zip(b_i).for_each(|(a, b)| *a += b);
            if let Some(x_i) = x_i {
                dx_data.extend(x_i);
            }
        }
        let mut grads = Grads::default();
        grads.insert(&self.weight.name, dw);
        grads.insert(&self.bias.name, db);
        let dx = need_dx.then(|| Tensor::from_vec(x.shape(), dx_data).unwrap());
        (dx, grads)
    }
}

impl Module for Conv2d {
    fn params(&self) -> Vec<&Param> {
        vec![&self.weight, &self.bias]
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.weight, &mut self.bias]
    }
}

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm2d {
    pub gamma: Param,
    pub beta: Param,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    name: String,
}

/// What a batch-norm forward pass leaves for backward and for the running
/// statistics update.
#[derive(Debug, Clone)]
pub struct BnCache {
    x_hat: Tensor,
    inv_std: Vec<f64>,
    batch_mean: Vec<f64>,
    batch_var: Vec<f64>,
    count: usize,
    train: bool,
}

impl BatchNorm2d {
    pub fn new(name: &str, channels: usize) -> Self {
        Self {
            gamma: Param::new(format!("{name}.gamma"), vec![channels], vec![1.0; channels], false),
            beta: Param::new(format!("{name}.beta"), vec![channels], vec![0.0; channels], false),
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            name: name.to_string(),
        }
    }

    /// Normalizes with batch statistics when `train`, running statistics
    /// otherwise.
    pub fn forward(&self, x: &Tensor, train: bool) -> (Tensor, BnCache) {
        let (n, c, hw) = (x.n(), x.c(), x.h() * x.w());
        let count = n * hw;
        let (mean, var) = if train {
            let mut mean = vec![0.0; c];
            let mut var = vec![0.0; c];
            for ch in 0..c {
                let mut s = 0.0;
                for i in 0..n {
                    s += x.data[(i * c + ch) * hw..(i * c + ch + 1) * hw].iter().sum::<f64>();
                }
                let m = s / count as f64;
                let mut v = 0.0;
                for i in 0..n {
                    v += x.data[(i * c + ch) * hw..(i * c + ch + 1) * hw]
                        .iter()
                        .map(|a| (a - m) * (a - m))
                        .sum::<f64>();
                }
                mean[ch] = m;
                var[ch] = v / count as f64;
            }
            (mean, var)
        } else {
            (self.running_mean.clone(), self.running_var.clone())
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let mut x_hat = Tensor::zeros(n, c, x.h(), x.w());
        let mut y = Tensor::zeros(n, c, x.h(), x.w());
        for i in 0..n {
            for ch in 0..c {
                let range = (i * c + ch) * hw..(i * c + ch + 1) * hw;
                let (g, b) = (self.gamma.value[ch], self.beta.value[ch]);
                for j in range {
                    let xh = (x.data[j] - mean[ch]) * inv_std[ch];
                    x_hat.data[j] = xh;
                    y.data[j] = g * xh + b;
                }
            }
        }
        let cache = BnCache { x_hat, inv_std, batch_mean: mean, batch_var: var, count, train };
        (y, cache)
    }

    pub fn backward(&self, cache: &BnCache, dy: &Tensor) -> (Tensor, Grads) {
        let (n, c, hw) = (dy.n(), dy.c(), dy.h() * dy.w());
        let mut dgamma = vec![0.0; c];
        let mut dbeta = vec![0.0; c];
        for i in 0..n {
            for ch in 0..c {
                for j in (i * c + ch) * hw..(i * c + ch + 1) * hw {
                    dgamma[ch] += dy.data[j] * cache.x_hat.data[j];
                    dbeta[ch] += dy.data[j];
                }
            }
        }
        let mut dx = Tensor::zeros(n, c, dy.h(), dy.w());
        let m = cache.count as f64;
        for i in 0..n {
            for ch in 0..c {
                let scale = self.gamma.value[ch] * cache.inv_std[ch];
                for j in (i * c + ch) * hw..(i * c + ch + 1) * hw {
                    dx.data[j] = if cache.train {
                        scale * (dy.data[j] - dbeta[ch] / m - cache.x_hat.data[j] * dgamma[ch] / m)
                    } else {
                        scale * dy.data[j]
                    };
                }
            }
        }
        let mut grads = Grads::default();
        grads.insert(&self.gamma.name, dgamma);
        grads.insert(&self.beta.name, dbeta);
        (dx, grads)
    }

    /// Folds the batch statistics of a training pass into the running
    /// estimates (unbiased variance, momentum 0.1).
    pub fn absorb(&mut self, cache: &BnCache) {
        if !cache.train {
            return;
        }
        let correction = if cache.count > 1 { cache.count as f64 / (cache.count - 1) as f64 } else { 1.0 };
        for ch in 0..self.running_mean.len() {
            self.running_mean[ch] =
                (1.0 - BN_MOMENTUM) * self.running_mean[ch] + BN_MOMENTUM * cache.batch_mean[ch];
            self.running_var[ch] =
                (1.0 - BN_MOMENTUM) * self.running_var[ch] + BN_MOMENTUM * cache.batch_var[ch] * correction;
        }
    }

    pub fn buffers(&self) -> Vec<Buffer> {
        vec![
            Buffer { name: format!("{}.running_mean", self.name), value: self.running_mean.clone() },
            Buffer { name: format!("{}.running_var", self.name), value: self.running_var.clone() },
        ]
    }

    pub fn set_buffer(&mut self, name: &str, value: &[f64]) -> bool {
        let target = if name == format!("{}.running_mean", self.name) {
            &mut self.running_mean
        } else if name == format!("{}.running_var", self.name) {
            &mut self.running_var
        } else {
            return false;
        };
        if target.len() != value.len() {
            return false;
        }
        target.copy_from_slice(value);
        true
    }
}

impl Module for BatchNorm2d {
    fn params(&self) -> Vec<&Param> {
        vec![&self.gamma, &self.beta]
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.gamma, &mut self.beta]
    }
}

/// Parametric rectifier with one learnable negative slope per channel.
#[derive(Debug, Clone, PartialEq)]
pub struct PRelu {
    pub slope: Param,
}

impl PRelu {
    pub fn new(name: &str, channels: usize) -> Self {
        Self { slope: Param::new(format!("{name}.slope"), vec![channels], vec![0.25; channels], false) }
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        let hw = x.h() * x.w();
        let c = x.c();
        let mut y = x.clone();
        for (j, v) in y.data.iter_mut().enumerate() {
            if *v <= 0.0 {
                *v *= self.slope.value[(j / hw) % c];
            }
        }
        y
    }

    pub fn backward(&self, x: &Tensor, dy: &Tensor) -> (Tensor, Grads) {
        let hw = x.h() * x.w();
        let c = x.c();
        let mut dslope = vec![0.0; c];
        let mut dx = dy.clone();
        for (j, (d, &xv)) in dx.data.iter_mut().zip(&x.data).enumerate() {
            if xv <= 0.0 {
                let ch = (j / hw) % c;
                dslope[ch] += *d * xv;
                *d *= self.slope.value[ch];
            }
        }
        let mut grads = Grads::default();
        grads.insert(&self.slope.name, dslope);
        (dx, grads)
    }
}

impl Module for PRelu {
    fn params(&self) -> Vec<&Param> {
        vec![&self.slope]
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.slope]
    }
}

/// Fixed-slope rectifier; slope 0 is the plain ReLU.
pub fn leaky_relu(x: &Tensor, slope: f64) -> Tensor {
    x.map(|v| if v > 0.0 { v } else { slope * v })
}

pub fn leaky_relu_backward(x: &Tensor, dy: &Tensor, slope: f64) -> Tensor {
    let mut dx = dy.clone();
    for (d, &xv) in dx.data.iter_mut().zip(&x.data) {
        if xv <= 0.0 {
            *d *= slope;
        }
    }
    dx
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// 2×2 max pooling with stride 2; odd trailing rows/columns are dropped.
pub fn max_pool2(x: &Tensor) -> (Tensor, Vec<usize>) {
    let (n, c, h, w) = (x.n(), x.c(), x.h(), x.w());
    let (oh, ow) = (h / 2, w / 2);
    let mut y = Tensor::zeros(n, c, oh, ow);
    let mut arg = vec![0; n * c * oh * ow];
    for plane in 0..n * c {
        let src = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = src + 2 * oy * w + 2 * ox;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = src + (2 * oy + dy) * w + 2 * ox + dx;
                    if x.data[idx] > x.data[best] {
                        best = idx;
                    }
                }
                let o = (plane * oh + oy) * ow + ox;
                y.data[o] = x.data[best];
                arg[o] = best;
            }
        }
    }
    (y, arg)
}

pub fn max_pool2_backward(input_shape: [usize; 4], argmax: &[usize], dy: &Tensor) -> Tensor {
    let [n, c, h, w] = input_shape;
    let mut dx = Tensor::zeros(n, c, h, w);
    for (o, &src) in argmax.iter().enumerate() {
        dx.data[src] += dy.data[o];
    }
    dx
}

/// Fully connected layer over flattened batch items.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Param,
    pub bias: Param,
    inputs: usize,
    outputs: usize,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(name: &str, inputs: usize, outputs: usize, rng: &mut R) -> Self {
        let normal = Normal::new(0.0, (1.0 / inputs as f64).sqrt()).unwrap();
        Self {
            weight: Param::new(
                format!("{name}.weight"),
                vec![outputs, inputs],
                (0..inputs * outputs).map(|_| normal.sample(rng)).collect(),
                true,
            ),
            bias: Param::new(format!("{name}.bias"), vec![outputs], vec![0.0; outputs], false),
            inputs,
            outputs,
        }
    }

    pub fn inputs(&self) -> usize {
        self.inputs
    }

    /// Returns an `N×outputs×1×1` tensor.
    pub fn forward(&self, x: &Tensor) -> Tensor {
        assert_eq!(x.item_len(), self.inputs, "{}: input size mismatch", self.weight.name);
        let mut y = Tensor::zeros(x.n(), self.outputs, 1, 1);
        for (i, out) in y.data.chunks_mut(self.outputs).enumerate() {
            out.copy_from_slice(&self.bias.value);
            gemm(self.outputs, self.inputs, 1, &self.weight.value, (self.inputs as isize, 1), x.item(i), (1, 1), 1.0, out);
        }
        y
    }

    pub fn backward(&self, x: &Tensor, dy: &Tensor) -> (Tensor, Grads) {
        let mut dw = vec![0.0; self.weight.len()];
        let mut db = vec![0.0; self.outputs];
        let mut dx = Tensor::zeros(x.n(), x.c(), x.h(), x.w());
        let len = self.inputs;
        for i in 0..x.n() {
            let xi = x.item(i);
            let dyi = dy.item(i);
            for o in 0..self.outputs {
                db[o] += dyi[o];
                let row = &mut dw[o * len..(o + 1) * len];
                row.iter_mut().zip(xi).for_each(|(a, b)| *a += dyi[o] * b);
            }
            let dxi = &mut dx.data[i * len..(i + 1) * len];
            gemm(1, self.outputs, len, dyi, (self.outputs as isize, 1), &self.weight.value, (len as isize, 1), 0.0, dxi);
        }
        let mut grads = Grads::default();
        grads.insert(&self.weight.name, dw);
        grads.insert(&self.bias.name, db);
        (dx, grads)
    }
}

impl Module for Linear {
    fn params(&self) -> Vec<&Param> {
        vec![&self.weight, &self.bias]
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.weight, &mut self.bias]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_tensor(shape: [usize; 4], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let len = shape.iter().product();
        Tensor::from_vec(shape, (0..len).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect()).unwrap()
    }

    fn naive_conv(conv: &Conv2d, x: &Tensor) -> Tensor {
        let (oh, ow) = conv.out_size(x.h(), x.w());
        let k = conv.kernel;
        let mut y = Tensor::zeros(x.n(), conv.out_ch, oh, ow);
        for n in 0..x.n() {
            for o in 0..conv.out_ch {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = conv.bias.value[o];
                        for c in 0..conv.in_ch {
                            for ki in 0..k {
                                for kj in 0..k {
                                    let iy = (oy * conv.stride + ki) as isize - conv.pad as isize;
                                    let ix = (ox * conv.stride + kj) as isize - conv.pad as isize;
                                    if iy < 0 || ix < 0 || iy >= x.h() as isize || ix >= x.w() as isize {
                                        continue;
                                    }
                                    let xi = ((n * conv.in_ch + c) * x.h() + iy as usize) * x.w() + ix as usize;
                                    let wi = ((o * conv.in_ch + c) * k + ki) * k + kj;
                                    acc += conv.weight.value[wi] * x.data[xi];
                                }
                            }
                        }
                        y.data[((n * conv.out_ch + o) * oh + oy) * ow + ox] = acc;
                    }
                }
            }
        }
        y
    }

    #[test]
    fn conv_matches_direct_summation() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for (k, s, shape) in [(3, 1, [2, 3, 5, 6]), (3, 2, [2, 2, 8, 7]), (9, 1, [1, 1, 6, 6])] {
            let mut conv = Conv2d::new("c", shape[1], 4, k, s, &mut rng);
            conv.bias.value = vec![0.1, -0.2, 0.3, 0.0];
            let x = random_tensor(shape, 2);
            let got = conv.forward(&x);
            let want = naive_conv(&conv, &x);
            assert_eq!(got.shape(), want.shape());
            for (a, b) in got.data.iter().zip(&want.data) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    // L = Σ r ⊙ f(x) for a fixed random r; checks dL/dx and dL/dθ.
    fn check_conv_grads(k: usize, stride: usize) {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut conv = Conv2d::new("c", 2, 3, k, stride, &mut rng);
        let x = random_tensor([2, 2, 5, 5], 4);
        let y = conv.forward(&x);
        let r = random_tensor(y.shape(), 5);
        let loss = |conv: &Conv2d, x: &Tensor| -> f64 {
            conv.forward(x).data.iter().zip(&r.data).map(|(a, b)| a * b).sum()
        };
        let (dx, grads) = conv.backward(&x, &r, true);
        let dx = dx.unwrap();
        let h = 1e-6;
        for j in (0..x.len()).step_by(7) {
            let mut xp = x.clone();
            xp.data[j] += h;
            let mut xm = x.clone();
            xm.data[j] -= h;
            let fd = (loss(&conv, &xp) - loss(&conv, &xm)) / (2.0 * h);
            assert!((fd - dx.data[j]).abs() < 1e-7, "dx[{j}] {fd} vs {}", dx.data[j]);
        }
        let dw = grads.get("c.weight").unwrap().to_vec();
        for j in (0..conv.weight.len()).step_by(5) {
            let orig = conv.weight.value[j];
            conv.weight.value[j] = orig + h;
            let lp = loss(&conv, &x);
            conv.weight.value[j] = orig - h;
            let lm = loss(&conv, &x);
            conv.weight.value[j] = orig;
            assert!(((lp - lm) / (2.0 * h) - dw[j]).abs() < 1e-7);
        }
        let db = grads.get("c.bias").unwrap();
        let sums: Vec<f64> = (0..3)
            .map(|o| (0..2).map(|n| r.item(n)[o * y.h() * y.w()..(o + 1) * y.h() * y.w()].iter().sum::<f64>()).sum())
            .collect();
        for (a, b) in db.iter().zip(sums) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn conv_gradients_match_finite_differences() {
        check_conv_grads(3, 1);
        check_conv_grads(3, 2);
    }

    #[test]
    fn batchnorm_train_gradients() {
        let mut bn = BatchNorm2d::new("bn", 3);
        bn.gamma.value = vec![1.5, 0.7, -0.4];
        bn.beta.value = vec![0.1, 0.0, 0.3];
        let x = random_tensor([2, 3, 3, 3], 8);
        let r = random_tensor([2, 3, 3, 3], 9);
        let loss = |x: &Tensor| -> f64 {
            bn.forward(x, true).0.data.iter().zip(&r.data).map(|(a, b)| a * b).sum()
        };
        let (_, cache) = bn.forward(&x, true);
        let (dx, _) = bn.backward(&cache, &r);
        let h = 1e-6;
        for j in 0..x.len() {
            let mut xp = x.clone();
            xp.data[j] += h;
            let mut xm = x.clone();
            xm.data[j] -= h;
            let fd = (loss(&xp) - loss(&xm)) / (2.0 * h);
            assert!((fd - dx.data[j]).abs() < 1e-6, "{fd} vs {}", dx.data[j]);
        }
    }

    #[test]
    fn batchnorm_running_stats_and_inference() {
        let mut bn = BatchNorm2d::new("bn", 1);
        let x = Tensor::from_vec([1, 1, 1, 4], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let (y, cache) = bn.forward(&x, true);
        let mean: f64 = y.data.iter().sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-12);
        bn.absorb(&cache);
        assert!((bn.running_mean[0] - 0.25).abs() < 1e-12);
        // unbiased variance of 1..4 is 5/3
        assert!((bn.running_var[0] - (0.9 + 0.1 * 5.0 / 3.0)).abs() < 1e-12);
        let (y_eval, _) = bn.forward(&x, false);
        let expect = (1.0 - 0.25) / (bn.running_var[0] + BN_EPS).sqrt();
        assert!((y_eval.data[0] - expect).abs() < 1e-12);
    }

    #[test]
    fn prelu_and_pool_gradients() {
        let mut prelu = PRelu::new("p", 2);
        prelu.slope.value = vec![0.25, 0.1];
        let x = random_tensor([1, 2, 4, 4], 3);
        let r = random_tensor([1, 2, 4, 4], 4);
        let (dx, grads) = prelu.backward(&x, &r);
        for j in 0..x.len() {
            let ch = j / 16;
            let expect = if x.data[j] > 0.0 { r.data[j] } else { prelu.slope.value[ch] * r.data[j] };
            assert_eq!(dx.data[j], expect);
        }
        let ds = grads.get("p.slope").unwrap();
        let expect0: f64 = (0..16).filter(|&j| x.data[j] <= 0.0).map(|j| r.data[j] * x.data[j]).sum();
        assert!((ds[0] - expect0).abs() < 1e-12);

        let (y, arg) = max_pool2(&x);
        assert_eq!(y.shape(), [1, 2, 2, 2]);
        let dy = random_tensor(y.shape(), 6);
        let dx = max_pool2_backward(x.shape(), &arg, &dy);
        assert!((dx.data.iter().sum::<f64>() - dy.data.iter().sum::<f64>()).abs() < 1e-12);
        assert_eq!(y.data[0], [x.data[0], x.data[1], x.data[4], x.data[5]].into_iter().fold(f64::MIN, f64::max));
    }

    #[test]
    fn linear_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut lin = Linear::new("fc", 6, 2, &mut rng);
        lin.bias.value = vec![0.3, -0.1];
        let x = random_tensor([3, 6, 1, 1], 1);
        let r = random_tensor([3, 2, 1, 1], 2);
        let loss = |lin: &Linear, x: &Tensor| -> f64 {
            lin.forward(x).data.iter().zip(&r.data).map(|(a, b)| a * b).sum()
        };
        let (dx, grads) = lin.backward(&x, &r);
        let h = 1e-6;
        for j in 0..x.len() {
            let mut xp = x.clone();
            xp.data[j] += h;
            let mut xm = x.clone();
            xm.data[j] -= h;
            assert!(((loss(&lin, &xp) - loss(&lin, &xm)) / (2.0 * h) - dx.data[j]).abs() < 1e-8);
        }
        let dw = grads.get("fc.weight").unwrap().to_vec();
        for j in 0..12 {
            let orig = lin.weight.value[j];
            lin.weight.value[j] = orig + h;
            let lp = loss(&lin, &x);
            lin.weight.value[j] = orig - h;
            let lm = loss(&lin, &x);
            lin.weight.value[j] = orig;
            assert!(((lp - lm) / (2.0 * h) - dw[j]).abs() < 1e-8);
        }
    }

    #[test]
    fn sigmoid_is_stable() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert!(sigmoid(1e6).is_finite() && sigmoid(-1e6) >= 0.0);
        assert!((sigmoid(2.0) + sigmoid(-2.0) - 1.0).abs() < 1e-15);
    }
}
