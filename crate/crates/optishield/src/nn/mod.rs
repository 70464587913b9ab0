//! Minimal NCHW neural-network stack with explicit backprop.
//!
//! Networks are flat layer lists (residual blocks nest a sub-net). Forward
//! passes in training mode collect per-layer caches that the backward pass
//! consumes; gradients land in a flat slot list aligned with the parameter
//! traversal order, which is also the order the Adam state and checkpoint
//! tensors use.

pub(crate) mod conv;

use ndarray::{Array1, Array2, Array4, ArrayD, Axis};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use conv::{ConvGeom, conv2d_backward_input, conv2d_backward_params, conv2d_forward};
use conv::{tconv2d_backward_input, tconv2d_backward_params, tconv2d_forward};

pub struct Conv2d {
    /// `[out_c, in_c / groups, kh, kw]`
    pub weight: Array4<f32>,
    pub bias: Array1<f32>,
    pub stride: usize,
    pub pad: usize,
    pub groups: usize,
}

pub struct TConv2d {
    /// `[in_c, out_c, kh, kw]`
    pub weight: Array4<f32>,
    pub bias: Array1<f32>,
    pub stride: usize,
    pub pad: usize,
}

pub struct Linear {
    /// `[out_features, in_features]`, applied to `[N, F, 1, 1]` inputs.
    pub weight: Array2<f32>,
    pub bias: Array1<f32>,
}

pub struct BatchNorm2d {
    pub gamma: Array1<f32>,
    pub beta: Array1<f32>,
    pub running_mean: Array1<f32>,
    pub running_var: Array1<f32>,
    pub momentum: f32,
    pub eps: f32,
}

impl BatchNorm2d {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: Array1::ones(channels),
            beta: Array1::zeros(channels),
            running_mean: Array1::zeros(channels),
            running_var: Array1::ones(channels),
            momentum: 0.1,
            eps: 1e-5,
        }
    }
}

pub enum Layer {
    Conv(Conv2d),
    TConv(TConv2d),
    Linear(Linear),
    BatchNorm(BatchNorm2d),
    ReLU,
    ReLU6,
    MaxPool2,
    GlobalAvgPool,
    Flatten,
    /// Center-crops the spatial dims to a fixed target; gradient re-embeds
    /// into the original frame.
    CropCenter((usize, usize)),
    Residual(Net),
}

pub enum Cache {
    Input(Array4<f32>),
    MaxPool { x_dim: (usize, usize, usize, usize), argmax: Vec<u8> },
    BatchNorm { x_hat: Array4<f32>, inv_std: Array1<f32> },
    Shape((usize, usize, usize, usize)),
    Residual(Vec<Cache>),
    None,
}

#[derive(Default)]
pub struct Net {
    pub layers: Vec<Layer>,
}

/// Flat gradient buffers, one per parameter tensor in traversal order.
pub struct Gradients {
    pub slots: Vec<Vec<f32>>,
}

impl Gradients {
    pub fn zeros_for(net: &Net) -> Self {
        let mut slots = Vec::new();
        net.visit_params(&mut |p| slots.push(vec![0f32; p.len()]));
        Self { slots }
    }

    pub fn zero(&mut self) {
        for s in &mut self.slots {
            s.iter_mut().for_each(|v| *v = 0.0);
        }
    }
}

fn he_normal(rng: &mut ChaCha8Rng, fan_in: usize, n: usize) -> Vec<f32> {
    let std = (2.0f32 / fan_in as f32).sqrt();
    let dist = Normal::new(0.0f32, std).expect("valid std");
    (0..n).map(|_| dist.sample(rng)).collect()
}

impl Conv2d {
    pub fn he_init(
        rng: &mut ChaCha8Rng,
        in_c: usize,
        out_c: usize,
        k: usize,
        stride: usize,
        pad: usize,
        groups: usize,
    ) -> Self {
        let in_per_group = in_c / groups;
        let fan_in = in_per_group * k * k;
        let w = he_normal(rng, fan_in, out_c * in_per_group * k * k);
        Self {
            weight: Array4::from_shape_vec((out_c, in_per_group, k, k), w).expect("shape"),
            bias: Array1::zeros(out_c),
            stride,
            pad,
            groups,
        }
    }
}

impl TConv2d {
    pub fn he_init(
        rng: &mut ChaCha8Rng,
        in_c: usize,
        out_c: usize,
        kh: usize,
        kw: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        let fan_in = in_c * kh * kw;
        let w = he_normal(rng, fan_in, in_c * out_c * kh * kw);
        Self {
            weight: Array4::from_shape_vec((in_c, out_c, kh, kw), w).expect("shape"),
            bias: Array1::zeros(out_c),
            stride,
            pad,
        }
    }
}

impl Linear {
    pub fn he_init(rng: &mut ChaCha8Rng, in_f: usize, out_f: usize) -> Self {
        let w = he_normal(rng, in_f, out_f * in_f);
        Self {
            weight: Array2::from_shape_vec((out_f, in_f), w).expect("shape"),
            bias: Array1::zeros(out_f),
        }
    }
}

impl Layer {
    fn forward(&mut self, x: Array4<f32>, train: bool) -> (Array4<f32>, Cache) {
        match self {
            Layer::Conv(c) => {
                let geom = ConvGeom { stride: c.stride, pad: c.pad, groups: c.groups };
                let y = conv2d_forward(&x, &c.weight, c.bias.as_slice().unwrap(), &geom);
                (y, if train { Cache::Input(x) } else { Cache::None })
            }
            Layer::TConv(t) => {
                let y = tconv2d_forward(&x, &t.weight, t.bias.as_slice().unwrap(), t.stride, t.pad);
                (y, if train { Cache::Input(x) } else { Cache::None })
            }
            Layer::Linear(l) => {
                let (n, f, _, _) = x.dim();
                let x2 = x.view().into_shape_with_order((n, f)).expect("flattened input");
                let mut y = x2.dot(&l.weight.t());
                for mut row in y.rows_mut() {
                    row += &l.bias;
                }
                let out = y.len_of(Axis(1));
                let y4 = y.into_shape_with_order((n, out, 1, 1)).expect("shape");
                (y4, if train { Cache::Input(x) } else { Cache::None })
            }
            Layer::BatchNorm(bn) => {
                let (n, c, h, w) = x.dim();
                let m = (n * h * w) as f32;
                if train {
                    let mut mean = Array1::<f32>::zeros(c);
                    let mut var = Array1::<f32>::zeros(c);
                    for ch in 0..c {
                        let plane = x.index_axis(Axis(1), ch);
                        let mu = plane.sum() / m;
                        mean[ch] = mu;
                        var[ch] = plane.iter().map(|&v| (v - mu) * (v - mu)).sum::<f32>() / m;
                    }
                    let mut inv_std = Array1::<f32>::zeros(c);
                    for ch in 0..c {
                        inv_std[ch] = 1.0 / (var[ch] + bn.eps).sqrt();
                    }
                    let mut x_hat = x;
                    for ch in 0..c {
                        let mu = mean[ch];
                        let inv = inv_std[ch];
                        x_hat.index_axis_mut(Axis(1), ch).mapv_inplace(|v| (v - mu) * inv);
                    }
                    let mut y = x_hat.clone();
                    for ch in 0..c {
                        let g = bn.gamma[ch];
                        let b = bn.beta[ch];
                        y.index_axis_mut(Axis(1), ch).mapv_inplace(|v| g * v + b);
                    }
                    // Biased batch statistics feed the running estimates.
                    for ch in 0..c {
                        bn.running_mean[ch] =
                            (1.0 - bn.momentum) * bn.running_mean[ch] + bn.momentum * mean[ch];
                        bn.running_var[ch] =
                            (1.0 - bn.momentum) * bn.running_var[ch] + bn.momentum * var[ch];
                    }
                    (y, Cache::BatchNorm { x_hat, inv_std })
                } else {
                    let mut y = x;
                    for ch in 0..c {
                        let inv = 1.0 / (bn.running_var[ch] + bn.eps).sqrt();
                        let mu = bn.running_mean[ch];
                        let g = bn.gamma[ch];
                        let b = bn.beta[ch];
                        y.index_axis_mut(Axis(1), ch).mapv_inplace(|v| g * (v - mu) * inv + b);
                    }
                    (y, Cache::None)
                }
            }
            Layer::CropCenter((th, tw)) => {
                let (th, tw) = (*th, *tw);
                let dim = x.dim();
                let (n, c, h, w) = dim;
                assert!(h >= th && w >= tw, "crop target larger than input");
                let r0 = (h - th) / 2;
                let c0 = (w - tw) / 2;
                let mut y = Array4::zeros((n, c, th, tw));
                y.assign(&x.slice(ndarray::s![.., .., r0..r0 + th, c0..c0 + tw]));
                (y, if train { Cache::Shape(dim) } else { Cache::None })
            }
            Layer::ReLU => {
                let mut y = x.clone();
                y.mapv_inplace(|v| v.max(0.0));
                (y, if train { Cache::Input(x) } else { Cache::None })
            }
            Layer::ReLU6 => {
                let mut y = x.clone();
                y.mapv_inplace(|v| v.clamp(0.0, 6.0));
                (y, if train { Cache::Input(x) } else { Cache::None })
            }
            Layer::MaxPool2 => {
                let (n, c, h, w) = x.dim();
                let (oh, ow) = (h / 2, w / 2);
                let mut y = Array4::zeros((n, c, oh, ow));
                let mut argmax = vec![0u8; n * c * oh * ow];
                let mut idx = 0usize;
                for i in 0..n {
                    for ch in 0..c {
                        for r in 0..oh {
                            for q in 0..ow {
                                let mut best = f32::NEG_INFINITY;
                                let mut best_k = 0u8;
                                for dr in 0..2 {
                                    for dc in 0..2 {
                                        let v = x[[i, ch, 2 * r + dr, 2 * q + dc]];
                                        if v > best {
                                            best = v;
                                            best_k = (dr * 2 + dc) as u8;
                                        }
                                    }
                                }
                                y[[i, ch, r, q]] = best;
                                argmax[idx] = best_k;
                                idx += 1;
                            }
                        }
                    }
                }
                (y, if train { Cache::MaxPool { x_dim: (n, c, h, w), argmax } } else { Cache::None })
            }
            Layer::GlobalAvgPool => {
                let (n, c, h, w) = x.dim();
                let mut y = Array4::zeros((n, c, 1, 1));
                for i in 0..n {
                    for ch in 0..c {
                        y[[i, ch, 0, 0]] = x.index_axis(Axis(0), i).index_axis(Axis(0), ch).sum()
                            / (h * w) as f32;
                    }
                }
                (y, if train { Cache::Shape((n, c, h, w)) } else { Cache::None })
            }
            Layer::Flatten => {
                let dim = x.dim();
                let (n, c, h, w) = dim;
                let y = x.into_shape_with_order((n, c * h * w, 1, 1)).expect("standard layout");
                (y, if train { Cache::Shape(dim) } else { Cache::None })
            }
            Layer::Residual(body) => {
                let (y_body, caches) = body.forward_internal(x.clone(), train);
                let y = y_body + &x;
                (y, if train { Cache::Residual(caches) } else { Cache::None })
            }
        }
    }

    /// Gradient slots this layer consumes (in traversal order).
    fn grad_slot_count(&self) -> usize {
        match self {
            Layer::Conv(_) | Layer::TConv(_) | Layer::Linear(_) | Layer::BatchNorm(_) => 2,
            Layer::Residual(body) => body.layers.iter().map(Layer::grad_slot_count).sum(),
            _ => 0,
        }
    }

    fn backward(&self, cache: Cache, dy: Array4<f32>, slots: &mut [Vec<f32>]) -> Array4<f32> {
        match (self, cache) {
            (Layer::Conv(c), Cache::Input(x)) => {
                let geom = ConvGeom { stride: c.stride, pad: c.pad, groups: c.groups };
                let (dw, db) = conv2d_backward_params(&x, &dy, c.weight.dim(), &geom);
                accumulate(&mut slots[0], dw.as_slice().unwrap());
                accumulate(&mut slots[1], &db);
                conv2d_backward_input(&dy, &c.weight, x.dim(), &geom)
            }
            (Layer::TConv(t), Cache::Input(x)) => {
                let (dw, db) = tconv2d_backward_params(&x, &dy, t.weight.dim(), t.stride, t.pad);
                accumulate(&mut slots[0], dw.as_slice().unwrap());
                accumulate(&mut slots[1], &db);
                tconv2d_backward_input(&dy, &t.weight, x.dim(), t.stride, t.pad)
            }
            (Layer::Linear(l), Cache::Input(x)) => {
                let (n, f, _, _) = x.dim();
                let o = l.weight.dim().0;
                let x2 = x.view().into_shape_with_order((n, f)).expect("shape");
                let dy2 = dy.view().into_shape_with_order((n, o)).expect("shape");
                let dw = dy2.t().dot(&x2);
                let db = dy2.sum_axis(Axis(0));
                accumulate(&mut slots[0], dw.as_slice().unwrap());
                accumulate(&mut slots[1], db.as_slice().unwrap());
                let dx = dy2.dot(&l.weight);
                dx.into_shape_with_order((n, f, 1, 1)).expect("shape")
            }
            (Layer::BatchNorm(bn), Cache::BatchNorm { x_hat, inv_std }) => {
                let (n, c, h, w) = x_hat.dim();
                let m = (n * h * w) as f32;
                let mut dgamma = vec![0f32; c];
                let mut dbeta = vec![0f32; c];
                for ch in 0..c {
                    let xp = x_hat.index_axis(Axis(1), ch);
                    let dp = dy.index_axis(Axis(1), ch);
                    dbeta[ch] = dp.sum();
                    dgamma[ch] = dp.iter().zip(xp.iter()).map(|(&d, &xh)| d * xh).sum();
                }
                let mut dx = dy;
                for ch in 0..c {
                    let g = bn.gamma[ch];
                    let inv = inv_std[ch];
                    let sum_dy = dbeta[ch];
                    let sum_dy_xhat = dgamma[ch];
                    let scale = g * inv / m;
                    let xp = x_hat.index_axis(Axis(1), ch);
                    let mut dp = dx.index_axis_mut(Axis(1), ch);
                    ndarray::Zip::from(&mut dp).and(&xp).for_each(|d, &xh| {
                        *d = scale * (m * *d - sum_dy - xh * sum_dy_xhat);
                    });
                }
                accumulate(&mut slots[0], &dgamma);
                accumulate(&mut slots[1], &dbeta);
                dx
            }
            (Layer::CropCenter((th, tw)), Cache::Shape(dim)) => {
                let (th, tw) = (*th, *tw);
                let (n, c, h, w) = dim;
                let r0 = (h - th) / 2;
                let c0 = (w - tw) / 2;
                let mut dx = Array4::zeros((n, c, h, w));
                dx.slice_mut(ndarray::s![.., .., r0..r0 + th, c0..c0 + tw]).assign(&dy);
                dx
            }
            (Layer::ReLU, Cache::Input(x)) => {
                let mut dx = dy;
                ndarray::Zip::from(&mut dx).and(&x).for_each(|d, &v| {
                    if v <= 0.0 {
                        *d = 0.0;
                    }
                });
                dx
            }
            (Layer::ReLU6, Cache::Input(x)) => {
                let mut dx = dy;
                ndarray::Zip::from(&mut dx).and(&x).for_each(|d, &v| {
                    if !(0.0..6.0).contains(&v) {
                        *d = 0.0;
                    }
                });
                dx
            }
            (Layer::MaxPool2, Cache::MaxPool { x_dim, argmax }) => {
                let (n, c, h, w) = x_dim;
                let (_, _, oh, ow) = dy.dim();
                let mut dx = Array4::zeros((n, c, h, w));
                let mut idx = 0usize;
                for i in 0..n {
                    for ch in 0..c {
                        for r in 0..oh {
                            for q in 0..ow {
                                let k = argmax[idx] as usize;
                                idx += 1;
                                dx[[i, ch, 2 * r + k / 2, 2 * q + k % 2]] += dy[[i, ch, r, q]];
                            }
                        }
                    }
                }
                dx
            }
            (Layer::GlobalAvgPool, Cache::Shape((n, c, h, w))) => {
                let scale = 1.0 / (h * w) as f32;
                let mut dx = Array4::zeros((n, c, h, w));
                for i in 0..n {
                    for ch in 0..c {
                        let g = dy[[i, ch, 0, 0]] * scale;
                        dx.index_axis_mut(Axis(0), i).index_axis_mut(Axis(0), ch).fill(g);
                    }
                }
                dx
            }
            (Layer::Flatten, Cache::Shape(dim)) => {
                dy.into_shape_with_order(dim).expect("standard layout")
            }
            (Layer::Residual(body), Cache::Residual(caches)) => {
                let dx_body = body.backward_internal(caches, dy.clone(), slots);
                dx_body + &dy
            }
            _ => unreachable!("layer/cache mismatch: backward needs a training-mode forward"),
        }
    }

    fn visit_params<'a>(&'a self, f: &mut impl FnMut(&'a [f32])) {
        match self {
            Layer::Conv(c) => {
                f(c.weight.as_slice().unwrap());
                f(c.bias.as_slice().unwrap());
            }
            Layer::TConv(t) => {
                f(t.weight.as_slice().unwrap());
                f(t.bias.as_slice().unwrap());
            }
            Layer::Linear(l) => {
                f(l.weight.as_slice().unwrap());
                f(l.bias.as_slice().unwrap());
            }
            Layer::BatchNorm(bn) => {
                f(bn.gamma.as_slice().unwrap());
                f(bn.beta.as_slice().unwrap());
            }
            Layer::Residual(body) => {
                for layer in &body.layers {
                    layer.visit_params(f);
                }
            }
            _ => {}
        }
    }

    fn collect_params_mut<'a>(&'a mut self, out: &mut Vec<&'a mut [f32]>) {
        match self {
            Layer::Conv(c) => {
                out.push(c.weight.as_slice_mut().unwrap());
                out.push(c.bias.as_slice_mut().unwrap());
            }
            Layer::TConv(t) => {
                out.push(t.weight.as_slice_mut().unwrap());
                out.push(t.bias.as_slice_mut().unwrap());
            }
            Layer::Linear(l) => {
                out.push(l.weight.as_slice_mut().unwrap());
                out.push(l.bias.as_slice_mut().unwrap());
            }
            Layer::BatchNorm(bn) => {
                out.push(bn.gamma.as_slice_mut().unwrap());
                out.push(bn.beta.as_slice_mut().unwrap());
            }
            Layer::Residual(body) => {
                for layer in &mut body.layers {
                    layer.collect_params_mut(out);
                }
            }
            _ => {}
        }
    }

    fn collect_buffers(&self, out: &mut Vec<ArrayD<f32>>) {
        match self {
            Layer::BatchNorm(bn) => {
                out.push(bn.running_mean.clone().into_dyn());
                out.push(bn.running_var.clone().into_dyn());
            }
            Layer::Residual(body) => {
                for layer in &body.layers {
                    layer.collect_buffers(out);
                }
            }
            _ => {}
        }
    }

    fn restore_buffers(&mut self, buffers: &[ArrayD<f32>], cursor: &mut usize) -> Result<()> {
        match self {
            Layer::BatchNorm(bn) => {
                for target in [&mut bn.running_mean, &mut bn.running_var] {
                    let src = buffers.get(*cursor).ok_or_else(|| {
                        Error::Integrity("checkpoint is missing batch-norm buffers".into())
                    })?;
                    if src.len() != target.len() {
                        return Err(Error::Integrity("batch-norm buffer length mismatch".into()));
                    }
                    for (t, &s) in target.iter_mut().zip(src.iter()) {
                        *t = s;
                    }
                    *cursor += 1;
                }
                Ok(())
            }
            Layer::Residual(body) => {
                for layer in &mut body.layers {
                    layer.restore_buffers(buffers, cursor)?;
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }
}

fn accumulate(slot: &mut [f32], grad: &[f32]) {
    debug_assert_eq!(slot.len(), grad.len());
    for (s, &g) in slot.iter_mut().zip(grad) {
        *s += g;
    }
}

impl Net {
    pub fn new(layers: Vec<Layer>) -> Self {
        Self { layers }
    }

    fn forward_internal(&mut self, x: Array4<f32>, train: bool) -> (Array4<f32>, Vec<Cache>) {
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut cur = x;
        for layer in &mut self.layers {
            let (y, cache) = layer.forward(cur, train);
            caches.push(cache);
            cur = y;
        }
        (cur, caches)
    }

    /// Training-mode forward; collects caches and updates batch-norm running
    /// statistics.
    pub fn forward_train(&mut self, x: Array4<f32>) -> (Array4<f32>, Vec<Cache>) {
        self.forward_internal(x, true)
    }

    /// Inference-mode forward (running statistics, no caches).
    pub fn forward_eval(&mut self, x: Array4<f32>) -> Array4<f32> {
        self.forward_internal(x, false).0
    }

    fn backward_internal(&self, caches: Vec<Cache>, dy: Array4<f32>, slots: &mut [Vec<f32>]) -> Array4<f32> {
        let mut slot_end = slots.len();
        let mut cur = dy;
        for (layer, cache) in self.layers.iter().zip(caches).rev() {
            let count = layer.grad_slot_count();
            let slot_start = slot_end - count;
            cur = layer.backward(cache, cur, &mut slots[slot_start..slot_end]);
            slot_end = slot_start;
        }
        debug_assert_eq!(slot_end, 0);
        cur
    }

    /// Backpropagates `dy`, accumulating parameter gradients into `grads` and
    /// returning the input gradient.
    pub fn backward(&self, caches: Vec<Cache>, dy: Array4<f32>, grads: &mut Gradients) -> Array4<f32> {
        self.backward_internal(caches, dy, &mut grads.slots)
    }

    pub fn visit_params<'a>(&'a self, f: &mut impl FnMut(&'a [f32])) {
        for layer in &self.layers {
            layer.visit_params(f);
        }
    }

    pub fn param_slices_mut(&mut self) -> Vec<&mut [f32]> {
        let mut out = Vec::new();
        for layer in &mut self.layers {
            layer.collect_params_mut(&mut out);
        }
        out
    }

    pub fn param_count(&self) -> usize {
        let mut n = 0usize;
        self.visit_params(&mut |p| n += p.len());
        n
    }

    /// All state needed to reproduce the net given its architecture:
    /// parameters in traversal order, then batch-norm buffers.
    pub fn state_tensors(&self) -> (Vec<Vec<f32>>, Vec<ArrayD<f32>>) {
        let mut params = Vec::new();
        self.visit_params(&mut |p| params.push(p.to_vec()));
        let mut buffers = Vec::new();
        for layer in &self.layers {
            layer.collect_buffers(&mut buffers);
        }
        (params, buffers)
    }

    /// Restores state saved by [`Net::state_tensors`] into an identically
    /// built architecture.
    pub fn load_state(&mut self, params: &[Vec<f32>], buffers: &[ArrayD<f32>]) -> Result<()> {
        let mut slices = self.param_slices_mut();
        if slices.len() != params.len() {
            return Err(Error::Integrity(format!(
                "checkpoint has {} parameter tensors, architecture expects {}",
                params.len(),
                slices.len()
            )));
        }
        for (dst, src) in slices.iter_mut().zip(params) {
            if dst.len() != src.len() {
                return Err(Error::Integrity("parameter tensor length mismatch".into()));
            }
            dst.copy_from_slice(src);
        }
        let mut cursor = 0usize;
        for layer in &mut self.layers {
            layer.restore_buffers(buffers, &mut cursor)?;
        }
        Ok(())
    }
}

/// Adam with standard decay constants; state is kept per parameter tensor in
/// traversal order.
pub struct Adam {
    pub lr: f32,
    beta1: f32,
    beta2: f32,
    eps: f32,
    t: i32,
    moments: Vec<(Vec<f32>, Vec<f32>)>,
}

impl Adam {
    pub fn new(lr: f32, param_lens: &[usize]) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            moments: param_lens.iter().map(|&n| (vec![0f32; n], vec![0f32; n])).collect(),
        }
    }

    pub fn for_net(lr: f32, net: &Net) -> Self {
        let mut lens = Vec::new();
        net.visit_params(&mut |p| lens.push(p.len()));
        Self::new(lr, &lens)
    }

    pub fn step(&mut self, params: &mut [&mut [f32]], grads: &[&[f32]]) {
        assert_eq!(params.len(), self.moments.len());
        assert_eq!(grads.len(), self.moments.len());
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t);
        let bc2 = 1.0 - self.beta2.powi(self.t);
        for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(&mut self.moments) {
            for i in 0..p.len() {
                let gi = g[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                p[i] -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn net_gradients_match_finite_differences() {
        let mut r = rng(0);
        let mut net = Net::new(vec![
            Layer::Conv(Conv2d::he_init(&mut r, 1, 4, 3, 1, 1, 1)),
            Layer::ReLU,
            Layer::MaxPool2,
            Layer::Flatten,
            Layer::Linear(Linear::he_init(&mut r, 4 * 4 * 4, 3)),
        ]);
        let x = Array4::from_shape_fn((2, 1, 8, 8), |(n, _, h, w)| {
            ((n * 5 + h * 3 + w) % 11) as f32 / 11.0
        });

        // Loss = 0.5 sum(y^2).
        let (y, caches) = net.forward_train(x.clone());
        let mut grads = Gradients::zeros_for(&net);
        net.backward(caches, y.clone(), &mut grads);

        // Finite differences on the linear bias (slot index 3: conv w, conv b,
        // linear w, linear b).
        let h = 1e-3f32;
        let loss = |net: &mut Net, x: &Array4<f32>| -> f64 {
            let y = net.forward_eval(x.clone());
            y.iter().map(|&v| (v as f64).powi(2) / 2.0).sum()
        };
        {
            let mut slices = net.param_slices_mut();
            slices[3][1] += h;
        }
        let up = loss(&mut net, &x);
        {
            let mut slices = net.param_slices_mut();
            slices[3][1] -= 2.0 * h;
        }
        let down = loss(&mut net, &x);
        {
            let mut slices = net.param_slices_mut();
            slices[3][1] += h;
        }
        let fd = ((up - down) / (2.0 * h as f64)) as f32;
        let a = grads.slots[3][1];
        assert!((fd - a).abs() <= 1e-2 * fd.abs().max(a.abs()).max(0.1), "{fd} vs {a}");
    }

    #[test]
    fn relu_masks_negative_gradient() {
        let mut net = Net::new(vec![Layer::ReLU]);
        let x = ndarray::array![[[[-1.0f32, 2.0]]]];
        let (y, caches) = net.forward_train(x);
        assert_eq!(y, ndarray::array![[[[0.0f32, 2.0]]]]);
        let mut grads = Gradients::zeros_for(&net);
        let dx = net.backward(caches, ndarray::array![[[[5.0f32, 7.0]]]], &mut grads);
        assert_eq!(dx, ndarray::array![[[[0.0f32, 7.0]]]]);
    }

    #[test]
    fn maxpool_routes_gradient_to_argmax() {
        let mut net = Net::new(vec![Layer::MaxPool2]);
        let x = ndarray::Array4::from_shape_vec((1, 1, 2, 2), vec![1.0f32, 3.0, 0.5, 2.0]).unwrap();
        let (y, caches) = net.forward_train(x);
        assert_eq!(y[[0, 0, 0, 0]], 3.0);
        let mut grads = Gradients::zeros_for(&net);
        let dy = ndarray::Array4::from_elem((1, 1, 1, 1), 1.0f32);
        let dx = net.backward(caches, dy, &mut grads);
        assert_eq!(dx[[0, 0, 0, 1]], 1.0);
        assert_eq!(dx[[0, 0, 0, 0]], 0.0);
    }

    #[test]
    fn batchnorm_normalizes_and_backprops() {
        let mut r = rng(4);
        let mut net = Net::new(vec![Layer::BatchNorm(BatchNorm2d::new(2))]);
        let x = Array4::from_shape_fn((4, 2, 3, 3), |_| r.gen_range(-2.0f32..5.0));
        let (y, caches) = net.forward_train(x.clone());
        // Per-channel output is standardized (gamma=1, beta=0).
        for ch in 0..2 {
            let plane = y.index_axis(Axis(1), ch);
            let m = plane.sum() / plane.len() as f32;
            let v = plane.iter().map(|&t| (t - m) * (t - m)).sum::<f32>() / plane.len() as f32;
            assert!(m.abs() < 1e-4, "mean {m}");
            assert!((v - 1.0).abs() < 1e-3, "var {v}");
        }
        // Gradient of sum(y) w.r.t. x is ~0 (normalization removes the mean shift).
        let mut grads = Gradients::zeros_for(&net);
        let dy = Array4::ones(y.dim());
        let dx = net.backward(caches, dy, &mut grads);
        assert!(dx.iter().all(|&d| d.abs() < 1e-4));
        // dbeta = sum(dy) = count.
        assert!((grads.slots[1][0] - 36.0).abs() < 1e-3);
    }

    #[test]
    fn residual_adds_skip_gradient() {
        let mut r = rng(9);
        let body = Net::new(vec![
            Layer::Conv(Conv2d::he_init(&mut r, 2, 2, 3, 1, 1, 1)),
        ]);
        let mut net = Net::new(vec![Layer::Residual(body)]);
        let x = Array4::from_shape_fn((1, 2, 4, 4), |(_, c, h, w)| ((c + h + w) % 3) as f32);
        let (y, caches) = net.forward_train(x.clone());
        assert_eq!(y.dim(), x.dim());
        let mut grads = Gradients::zeros_for(&net);
        let dy = Array4::ones(y.dim());
        let dx = net.backward(caches, dy.clone(), &mut grads);
        // Skip path contributes identity gradient on top of the conv path.
        let mut conv_only = Net::new(vec![
            Layer::Conv(Conv2d::he_init(&mut rng(9), 2, 2, 3, 1, 1, 1)),
        ]);
        let (_, conv_caches) = conv_only.forward_train(x);
        let mut g2 = Gradients::zeros_for(&conv_only);
        let dconv = conv_only.backward(conv_caches, dy, &mut g2);
        for (a, b) in dx.iter().zip(dconv.iter()) {
            assert!((a - (b + 1.0)).abs() < 1e-5);
        }
    }

    #[test]
    fn adam_descends_a_quadratic() {
        // Minimize (p - 3)^2; Adam should approach p = 3.
        let mut p = vec![0f32];
        let mut adam = Adam::new(0.1, &[1]);
        for _ in 0..500 {
            let g = vec![2.0 * (p[0] - 3.0)];
            let mut slices: Vec<&mut [f32]> = vec![&mut p];
            adam.step(&mut slices, &[&g]);
        }
        assert!((p[0] - 3.0).abs() < 1e-2, "p {}", p[0]);
    }

    #[test]
    fn state_round_trip_restores_outputs() {
        let mut r = rng(33);
        let make = |r: &mut ChaCha8Rng| {
            Net::new(vec![
                Layer::Conv(Conv2d::he_init(r, 1, 3, 3, 1, 1, 1)),
                Layer::BatchNorm(BatchNorm2d::new(3)),
                Layer::ReLU,
                Layer::Flatten,
                Layer::Linear(Linear::he_init(r, 3 * 16, 2)),
            ])
        };
        let mut net = make(&mut r);
        let x = Array4::from_shape_fn((3, 1, 4, 4), |(n, _, h, w)| ((n + h + w) % 4) as f32 * 0.3);
        // A train pass moves the running stats away from init.
        let _ = net.forward_train(x.clone());
        let y = net.forward_eval(x.clone());

        let (params, buffers) = net.state_tensors();
        let mut restored = make(&mut rng(99));
        restored.load_state(&params, &buffers).unwrap();
        let y2 = restored.forward_eval(x);
        assert_eq!(y, y2);
    }
}
