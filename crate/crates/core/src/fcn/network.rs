//! Forward and backward passes through conv → BN → activation blocks,
//! global average pooling, the dense head and softmax.

use super::batchnorm::{batchnorm_backward, batchnorm_forward, Mode};
use super::conv::{conv_backward, conv_forward};
use super::model::{Activation, FcnModel, ModelConfig};
use super::real::Real;
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::signal::ReshapedInput;

/// Stack reshaped signals into a network input tensor.
pub fn input_batch<R: Real>(config: &ModelConfig, inputs: &[&ReshapedInput]) -> Result<Tensor<R>> {
    let layout = config.variant.layout();
    let (channels, h, w) = config.input_shape();
    let batch = inputs.len();
    let mut x = Tensor::zeros(channels, batch, h, w);
    for (b, input) in inputs.iter().enumerate() {
        if input.layout != layout {
            return Err(Error::LayoutMismatch {
                expected: layout.to_string(),
                found: input.layout.to_string(),
            });
        }
        if (input.t, input.l) != (config.t, config.l) || input.data.len() != config.t * config.l {
            return Err(Error::ShapeMismatch(format!(
                "input {}x{} ({} values) for a model built for {}x{}",
                input.t,
                input.l,
                input.data.len(),
                config.t,
                config.l
            )));
        }
        let spatial = h * w;
        if channels == 1 {
            let dst = &mut x.data[b * spatial..(b + 1) * spatial];
            for (d, &v) in dst.iter_mut().zip(&input.data) {
                *d = R::of(v as f64);
            }
        } else {
            // time-major T×L matrix → one channel per lead
            let l = config.l;
            for lead in 0..l {
                let start = (lead * batch + b) * spatial;
                for t in 0..config.t {
                    x.data[start + t] = R::of(input.data[t * l + lead] as f64);
                }
            }
        }
    }
    Ok(x)
}

/// Sample `b` of an input-shaped tensor, flattened in the reshaped layout's order.
pub fn sample_in_layout<R: Real>(config: &ModelConfig, x: &Tensor<R>, b: usize) -> Vec<f64> {
    let spatial = x.spatial();
    if x.channels == 1 {
        x.map(0, b).iter().map(|v| v.f64()).collect()
    } else {
        let l = config.l;
        let mut out = vec![0.0; config.t * l];
        for lead in 0..x.channels {
            let map = &x.data[(lead * x.batch + b) * spatial..][..spatial];
            for (t, v) in map.iter().enumerate() {
                out[t * l + lead] = v.f64();
            }
        }
        out
    }
}

/// Intermediates of one block.
#[derive(Debug, Clone)]
pub struct BlockCache<R> {
    pub xhat: Tensor<R>,
    pub inv_std: Vec<R>,
    /// Statistics used for normalization (batch in train mode, running otherwise).
    pub mean: Vec<R>,
    pub var: Vec<R>,
}

/// Everything the backward pass and the saliency methods need.
#[derive(Debug, Clone)]
pub struct ForwardCache<R> {
    pub mode: Mode,
    pub batch: usize,
    /// `features[0]` is the input, `features[i]` the output of block `i`.
    pub features: Vec<Tensor<R>>,
    pub blocks: Vec<BlockCache<R>>,
    /// Pooled features, `batch × M`.
    pub pooled: Vec<R>,
    /// `batch × C`.
    pub logits: Vec<R>,
    /// `batch × C`.
    pub probs: Vec<R>,
}

impl<R: Real> ForwardCache<R> {
    pub fn last_features(&self) -> &Tensor<R> {
        self.features.last().expect("input is always cached")
    }

    pub fn probs_row(&self, b: usize) -> &[R] {
        let c = self.probs.len() / self.batch.max(1);
        &self.probs[b * c..(b + 1) * c]
    }

    pub fn logits_row(&self, b: usize) -> &[R] {
        let c = self.logits.len() / self.batch.max(1);
        &self.logits[b * c..(b + 1) * c]
    }

    /// Arg-max class of each sample; ties go to the smaller index.
    pub fn predictions(&self) -> Vec<usize> {
        (0..self.batch).map(|b| argmax(self.probs_row(b))).collect()
    }
}

/// Index of the largest element, first on ties.
pub fn argmax<R: Real>(v: &[R]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Numerically stable softmax of one row.
pub fn softmax<R: Real>(z: &[R]) -> Vec<R> {
    let max = z.iter().fold(f64::NEG_INFINITY, |m, v| m.max(v.f64()));
    let exps: Vec<f64> = z.iter().map(|v| (v.f64() - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| R::of(e / sum)).collect()
}

fn activate<R: Real>(act: Activation, y: Tensor<R>) -> Tensor<R> {
    match act {
        Activation::Identity => y,
        Activation::Relu => {
            let mut y = y;
            for v in &mut y.data {
                if !(*v > R::zero()) {
                    *v = R::zero();
                }
            }
            y
        }
    }
}

/// Forward pass. The model is not modified; in train mode the batch
/// statistics are returned in the cache and applied with
/// [`apply_running_stats`].
pub fn forward<R: Real>(model: &FcnModel<R>, x: Tensor<R>, mode: Mode) -> Result<ForwardCache<R>> {
    let (channels, h, w) = model.config.input_shape();
    if (x.channels, x.h, x.w) != (channels, h, w) {
        return Err(Error::ShapeMismatch(format!(
            "input tensor {}x{}x{} for model input {channels}x{h}x{w}",
            x.channels, x.h, x.w
        )));
    }
    let batch = x.batch;
    let mut features = Vec::with_capacity(model.blocks.len() + 1);
    let mut caches = Vec::with_capacity(model.blocks.len());
    features.push(x);
    for block in &model.blocks {
        let z = conv_forward(features.last().unwrap(), &block.weights, &block.bias, &block.geometry);
        let bn = batchnorm_forward(
            &z,
            &block.gamma,
            &block.beta,
            &block.running_mean,
            &block.running_var,
            mode,
            model.config.bn,
            None,
        )?;
        features.push(activate(model.config.activation, bn.y));
        caches.push(BlockCache {
            xhat: bn.xhat,
            inv_std: bn.inv_std,
            mean: bn.mean,
            var: bn.var,
        });
    }

    let last = features.last().unwrap();
    let m = last.channels;
    let p = R::of(last.spatial() as f64);
    let mut pooled = vec![R::zero(); batch * m];
    for c in 0..m {
        for b in 0..batch {
            pooled[b * m + c] = last.map(c, b).iter().copied().sum::<R>() / p;
        }
    }

    let classes = model.dense.outputs;
    let mut logits = vec![R::zero(); batch * classes];
    let mut probs = Vec::with_capacity(batch * classes);
    for b in 0..batch {
        let row = &mut logits[b * classes..(b + 1) * classes];
        row.copy_from_slice(&model.dense.bias);
        for (j, &v) in pooled[b * m..(b + 1) * m].iter().enumerate() {
            let wrow = &model.dense.weights[j * classes..(j + 1) * classes];
            for (z, &wv) in row.iter_mut().zip(wrow) {
                *z += v * wv;
            }
        }
        probs.extend(softmax(row));
    }
    Ok(ForwardCache {
        mode,
        batch,
        features,
        blocks: caches,
        pooled,
        logits,
        probs,
    })
}

/// Fold the batch statistics of a train-mode pass into the running averages.
pub fn apply_running_stats<R: Real>(model: &mut FcnModel<R>, cache: &ForwardCache<R>) {
    if cache.mode != Mode::Train {
        return;
    }
    let mom = R::of(model.config.bn.momentum);
    let rest = R::one() - mom;
    for (block, bc) in model.blocks.iter_mut().zip(&cache.blocks) {
        for c in 0..block.running_mean.len() {
            block.running_mean[c] = mom * block.running_mean[c] + rest * bc.mean[c];
            block.running_var[c] = mom * block.running_var[c] + rest * bc.var[c];
        }
    }
}

/// How upstream gradients pass through a rectifier.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReluGate {
    /// Gradient passes where the rectifier input was positive.
    Standard,
    /// Additionally only positive upstream gradients pass.
    Guided,
}

impl ReluGate {
    /// Gradient at the rectifier input given its output and upstream gradient.
    #[inline]
    pub fn apply<R: Real>(self, upstream: R, output: R) -> R {
        let open = output > R::zero();
        let pass = match self {
            ReluGate::Standard => open,
            ReluGate::Guided => open && upstream > R::zero(),
        };
        if pass {
            upstream
        } else {
            R::zero()
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockGrads<R> {
    pub weights: Vec<R>,
    pub bias: Vec<R>,
    pub gamma: Vec<R>,
    pub beta: Vec<R>,
}

/// Gradients laid out like [`FcnModel::trainable`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients<R> {
    pub blocks: Vec<BlockGrads<R>>,
    pub dense_weights: Vec<R>,
    pub dense_bias: Vec<R>,
}

impl<R: Real> Gradients<R> {
    pub fn slices(&self) -> Vec<&[R]> {
        let mut out: Vec<&[R]> = Vec::new();
        for b in &self.blocks {
            out.extend([&b.weights[..], &b.bias[..], &b.gamma[..], &b.beta[..]]);
        }
        out.extend([&self.dense_weights[..], &self.dense_bias[..]]);
        out
    }
}

pub struct BackwardOutput<R> {
    pub params: Option<Gradients<R>>,
    /// Gradient w.r.t. the network input.
    pub input: Option<Tensor<R>>,
    /// Gradient w.r.t. the last feature map.
    pub last_features: Tensor<R>,
    /// Gradient w.r.t. the pooled features, `batch × M`.
    pub pooled: Vec<R>,
}

fn check_cache<R: Real>(model: &FcnModel<R>, cache: &ForwardCache<R>) -> Result<()> {
    if cache.features.len() != model.blocks.len() + 1 || cache.blocks.len() != model.blocks.len() {
        return Err(Error::StaleCache(format!(
            "cache has {} blocks, model has {}",
            cache.blocks.len(),
            model.blocks.len()
        )));
    }
    for (i, (f, b)) in cache.features[1..].iter().zip(&model.blocks).enumerate() {
        let g = &b.geometry;
        if f.shape() != [g.cout, cache.batch, g.oh, g.ow] {
            return Err(Error::StaleCache(format!("block {} feature shape {:?}", i + 1, f.shape())));
        }
    }
    if cache.logits.len() != cache.batch * model.dense.outputs {
        return Err(Error::StaleCache("logit count does not match the model".into()));
    }
    Ok(())
}

/// Backpropagate an arbitrary logit gradient (`batch × C`).
pub fn backprop<R: Real>(
    model: &FcnModel<R>,
    cache: &ForwardCache<R>,
    d_logits: &[R],
    gate: ReluGate,
    want_params: bool,
    want_input: bool,
) -> Result<BackwardOutput<R>> {
    check_cache(model, cache)?;
    let batch = cache.batch;
    let classes = model.dense.outputs;
    let m = model.dense.inputs;
    if d_logits.len() != batch * classes {
        return Err(Error::StaleCache(format!(
            "{} logit gradients for a batch of {batch} × {classes}",
            d_logits.len()
        )));
    }

    let mut dense_weights = vec![R::zero(); if want_params { m * classes } else { 0 }];
    let mut dense_bias = vec![R::zero(); if want_params { classes } else { 0 }];
    let mut d_pooled = vec![R::zero(); batch * m];
    for b in 0..batch {
        let dz = &d_logits[b * classes..(b + 1) * classes];
        let v = &cache.pooled[b * m..(b + 1) * m];
        for j in 0..m {
            let wrow = &model.dense.weights[j * classes..(j + 1) * classes];
            d_pooled[b * m + j] = wrow.iter().zip(dz).map(|(&w, &d)| w * d).sum();
            if want_params {
                let grow = &mut dense_weights[j * classes..(j + 1) * classes];
                for (g, &d) in grow.iter_mut().zip(dz) {
                    *g += v[j] * d;
                }
            }
        }
        if want_params {
            for (g, &d) in dense_bias.iter_mut().zip(dz) {
                *g += d;
            }
        }
    }

    // pooling spreads each gradient uniformly over the map
    let last = cache.last_features();
    let p = last.spatial();
    let inv_p = R::one() / R::of(p as f64);
    let mut d_feat = Tensor::zeros(last.channels, batch, last.h, last.w);
    for c in 0..m {
        for b in 0..batch {
            let g = d_pooled[b * m + c] * inv_p;
            let start = (c * batch + b) * p;
            d_feat.data[start..start + p].fill(g);
        }
    }
    let last_features = d_feat.clone();

    let mut block_grads = Vec::with_capacity(model.blocks.len());
    let mut d_input = None;
    for i in (0..model.blocks.len()).rev() {
        let block = &model.blocks[i];
        let out = &cache.features[i + 1];
        let mut dy = d_feat;
        if model.config.activation == Activation::Relu {
            for (d, &o) in dy.data.iter_mut().zip(&out.data) {
                *d = gate.apply(*d, o);
            }
        }
        let bc = &cache.blocks[i];
        let bn = batchnorm_backward(&dy, &bc.xhat, &block.gamma, &bc.inv_std, cache.mode);
        let need_input = i > 0 || want_input;
        let conv = conv_backward(
            &cache.features[i],
            &bn.d_input,
            &block.weights,
            &block.geometry,
            want_params,
            need_input,
        );
        if want_params {
            block_grads.push(BlockGrads {
                weights: conv.d_weights,
                bias: conv.d_bias,
                gamma: bn.d_gamma,
                beta: bn.d_beta,
            });
        }
        match conv.d_input {
            Some(dx) if i > 0 => d_feat = dx,
            Some(dx) => {
                d_input = Some(dx);
                d_feat = Tensor::zeros(0, 0, 0, 0);
            }
            None => d_feat = Tensor::zeros(0, 0, 0, 0),
        }
    }
    block_grads.reverse();
    Ok(BackwardOutput {
        params: want_params.then_some(Gradients {
            blocks: block_grads,
            dense_weights,
            dense_bias,
        }),
        input: d_input,
        last_features,
        pooled: d_pooled,
    })
}

/// Gradients of the mean categorical cross-entropy over the batch; the
/// fused softmax/cross-entropy logit gradient is `(ŷ − y) / B`.
pub fn backward<R: Real>(
    model: &FcnModel<R>,
    cache: &ForwardCache<R>,
    labels: &[usize],
) -> Result<(Gradients<R>, Tensor<R>)> {
    if cache.mode != Mode::Train {
        return Err(Error::StaleCache("loss gradients need a train-mode forward pass".into()));
    }
    if labels.len() != cache.batch {
        return Err(Error::StaleCache(format!(
            "{} labels for a cached batch of {}",
            labels.len(),
            cache.batch
        )));
    }
    let classes = model.dense.outputs;
    let scale = R::one() / R::of(cache.batch as f64);
    let mut d_logits = cache.probs.clone();
    for (b, &y) in labels.iter().enumerate() {
        if y >= classes {
            return Err(Error::ClassOutOfRange { class: y, class_count: classes });
        }
        d_logits[b * classes + y] -= R::one();
    }
    for d in &mut d_logits {
        *d *= scale;
    }
    let out = backprop(model, cache, &d_logits, ReluGate::Standard, true, true)?;
    Ok((out.params.expect("requested"), out.input.expect("requested")))
}

/// Gradient of logit `class` of every sample, under the given rectifier rule.
pub fn logit_backward<R: Real>(
    model: &FcnModel<R>,
    cache: &ForwardCache<R>,
    class: usize,
    gate: ReluGate,
) -> Result<BackwardOutput<R>> {
    let classes = model.dense.outputs;
    if class >= classes {
        return Err(Error::ClassOutOfRange { class, class_count: classes });
    }
    let mut d_logits = vec![R::zero(); cache.batch * classes];
    for b in 0..cache.batch {
        d_logits[b * classes + class] = R::one();
    }
    backprop(model, cache, &d_logits, gate, false, true)
}
