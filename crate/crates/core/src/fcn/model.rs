//! Architecture description, parameter storage and initialization.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::batchnorm::BnConfig;
use super::conv::ConvGeometry;
use super::real::Real;
use crate::error::{Error, Result};
use crate::signal::Layout;

/// Largest first-layer kernel accepted for the stacked layout.
pub const MAX_STACKED_FIRST_KERNEL: usize = 100;

/// How the ECG is fed to the network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Variant {
    /// Leads concatenated into one sequence; 1D kernels.
    Stacked1D,
    /// Leads as input channels; 1D kernels along time.
    MultiChannel1D,
    /// Single-channel T×L image; square 2D kernels.
    Image2D,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Stacked1D, Variant::MultiChannel1D, Variant::Image2D];

    pub fn layout(self) -> Layout {
        match self {
            Variant::Stacked1D => Layout::Stacked,
            Variant::MultiChannel1D => Layout::MultiChannel,
            Variant::Image2D => Layout::Image,
        }
    }

    pub fn id(self) -> u8 {
        match self {
            Variant::Stacked1D => 1,
            Variant::MultiChannel1D => 2,
            Variant::Image2D => 3,
        }
    }

    pub fn from_id(id: u8) -> Option<Self> {
        Self::ALL.into_iter().find(|v| v.id() == id)
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::Stacked1D => "stacked1d",
            Variant::MultiChannel1D => "multichannel1d",
            Variant::Image2D => "image2d",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|v| v.name().eq_ignore_ascii_case(s.trim()))
    }

    /// Tuned (filters, kernel, stride) triples of the three-block architectures.
    pub fn default_layers(self) -> Vec<LayerSpec> {
        let triples: [(usize, usize, usize); 3] = match self {
            Variant::Stacked1D => [(96, 100, 10), (256, 20, 1), (128, 20, 2)],
            Variant::MultiChannel1D => [(96, 9, 1), (256, 9, 1), (128, 9, 1)],
            Variant::Image2D => [(128, 9, 1), (192, 9, 1), (128, 9, 1)],
        };
        triples.iter().map(|&(f, k, s)| LayerSpec::new(f, k, s)).collect()
    }

    pub fn is_2d(self) -> bool {
        self == Variant::Image2D
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerSpec {
    pub filters: usize,
    pub kernel: usize,
    pub stride: usize,
}

impl LayerSpec {
    pub const fn new(filters: usize, kernel: usize, stride: usize) -> Self {
        Self { filters, kernel, stride }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    /// No nonlinearity; used to compare saliency rules against plain gradients.
    Identity,
}

impl Activation {
    pub fn id(self) -> u8 {
        match self {
            Activation::Relu => 0,
            Activation::Identity => 1,
        }
    }

    pub fn from_id(id: u8) -> Option<Self> {
        match id {
            0 => Some(Activation::Relu),
            1 => Some(Activation::Identity),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub variant: Variant,
    pub layers: Vec<LayerSpec>,
    pub class_count: usize,
    /// Time steps per signal.
    pub t: usize,
    /// Leads per signal.
    pub l: usize,
    pub bn: BnConfig,
    pub activation: Activation,
}

impl ModelConfig {
    /// Default architecture of `variant` for T×L signals and `class_count` classes.
    pub fn new(variant: Variant, class_count: usize, t: usize, l: usize) -> Self {
        Self {
            variant,
            layers: variant.default_layers(),
            class_count,
            t,
            l,
            bn: BnConfig::default(),
            activation: Activation::Relu,
        }
    }

    pub fn with_layers(mut self, layers: Vec<LayerSpec>) -> Self {
        self.layers = layers;
        self
    }

    pub fn with_activation(mut self, activation: Activation) -> Self {
        self.activation = activation;
        self
    }

    /// (channels, height, width) of the network input.
    pub fn input_shape(&self) -> (usize, usize, usize) {
        match self.variant {
            Variant::Stacked1D => (1, self.t * self.l, 1),
            Variant::MultiChannel1D => (self.l, self.t, 1),
            Variant::Image2D => (1, self.t, self.l),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.class_count == 0 || self.t == 0 || self.l == 0 {
            return Err(Error::InvalidConfig(format!(
                "degenerate model shape C={} T={} L={}",
                self.class_count, self.t, self.l
            )));
        }
        if self.layers.is_empty() {
            return Err(Error::InvalidConfig("a model needs at least one convolutional block".into()));
        }
        for (i, ls) in self.layers.iter().enumerate() {
            if ls.filters == 0 || ls.kernel == 0 || ls.stride == 0 {
                return Err(Error::InvalidConfig(format!(
                    "layer {}: filters, kernel and stride must be positive, got {:?}",
                    i + 1,
                    ls
                )));
            }
        }
        if self.variant == Variant::Stacked1D && self.layers[0].kernel > MAX_STACKED_FIRST_KERNEL {
            return Err(Error::InvalidConfig(format!(
                "stacked first-layer kernel {} exceeds {MAX_STACKED_FIRST_KERNEL}",
                self.layers[0].kernel
            )));
        }
        if !(self.bn.epsilon > 0.0) || !(0.0..1.0).contains(&self.bn.momentum) {
            return Err(Error::InvalidConfig(format!("invalid batch-norm settings {:?}", self.bn)));
        }
        Ok(())
    }

    /// Convolution geometry of every block.
    pub fn geometries(&self) -> Result<Vec<ConvGeometry>> {
        self.validate()?;
        let (mut cin, mut h, mut w) = self.input_shape();
        let mut out = Vec::with_capacity(self.layers.len());
        for ls in &self.layers {
            let (kernel, stride) = if self.variant.is_2d() {
                ((ls.kernel, ls.kernel), (ls.stride, ls.stride))
            } else {
                ((ls.kernel, 1), (ls.stride, 1))
            };
            let g = ConvGeometry::same(cin, ls.filters, (h, w), kernel, stride)?;
            cin = ls.filters;
            h = g.oh;
            w = g.ow;
            out.push(g);
        }
        Ok(out)
    }
}

/// Convolution + batch normalization parameters of one block.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvBlock<R> {
    pub geometry: ConvGeometry,
    /// `cout × cin × kh × kw`, row-major.
    pub weights: Vec<R>,
    pub bias: Vec<R>,
    pub gamma: Vec<R>,
    pub beta: Vec<R>,
    pub running_mean: Vec<R>,
    pub running_var: Vec<R>,
}

/// Fully connected head; `weights` is `inputs × outputs`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense<R> {
    pub inputs: usize,
    pub outputs: usize,
    pub weights: Vec<R>,
    pub bias: Vec<R>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FcnModel<R> {
    pub config: ModelConfig,
    pub blocks: Vec<ConvBlock<R>>,
    pub dense: Dense<R>,
}

fn he_uniform<R: Real>(rng: &mut ChaCha8Rng, fan_in: usize, n: usize) -> Vec<R> {
    let limit = (6.0 / fan_in as f64).sqrt();
    (0..n).map(|_| R::of(rng.random_range(-limit..limit))).collect()
}

/// He-uniform weights, zero biases and shifts, unit scales; running
/// statistics start at mean 0 and variance 1.
pub fn build_model<R: Real>(config: ModelConfig, seed: u64) -> Result<FcnModel<R>> {
    let geometries = config.geometries()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let blocks = geometries
        .into_iter()
        .map(|g| ConvBlock {
            geometry: g,
            weights: he_uniform(&mut rng, g.patch(), g.weight_len()),
            bias: vec![R::zero(); g.cout],
            gamma: vec![R::one(); g.cout],
            beta: vec![R::zero(); g.cout],
            running_mean: vec![R::zero(); g.cout],
            running_var: vec![R::one(); g.cout],
        })
        .collect::<Vec<_>>();
    let m = blocks.last().map(|b| b.geometry.cout).unwrap_or(0);
    let c = config.class_count;
    let dense = Dense {
        inputs: m,
        outputs: c,
        weights: he_uniform(&mut rng, m, m * c),
        bias: vec![R::zero(); c],
    };
    Ok(FcnModel { config, blocks, dense })
}

impl<R: Real> FcnModel<R> {
    pub fn variant(&self) -> Variant {
        self.config.variant
    }

    pub fn class_count(&self) -> usize {
        self.config.class_count
    }

    /// Channels of the last feature map.
    pub fn last_channels(&self) -> usize {
        self.dense.inputs
    }

    /// (height, width) of the last feature map.
    pub fn last_spatial(&self) -> (usize, usize) {
        self.blocks
            .last()
            .map(|b| (b.geometry.oh, b.geometry.ow))
            .unwrap_or((0, 0))
    }

    /// Trainable parameter count: conv weights and biases, batch-norm
    /// scales and shifts, dense weights and biases.
    pub fn count_params(&self) -> usize {
        self.trainable().iter().map(|s| s.len()).sum()
    }

    /// Trainable parameter slices in canonical order: per block
    /// (weights, bias, gamma, beta), then dense (weights, bias).
    pub fn trainable(&self) -> Vec<&[R]> {
        let mut out: Vec<&[R]> = Vec::with_capacity(self.blocks.len() * 4 + 2);
        for b in &self.blocks {
            out.extend([&b.weights[..], &b.bias[..], &b.gamma[..], &b.beta[..]]);
        }
        out.extend([&self.dense.weights[..], &self.dense.bias[..]]);
        out
    }

    pub fn trainable_mut(&mut self) -> Vec<&mut [R]> {
        let mut out: Vec<&mut [R]> = Vec::with_capacity(self.blocks.len() * 4 + 2);
        for b in &mut self.blocks {
            out.push(&mut b.weights);
            out.push(&mut b.bias);
            out.push(&mut b.gamma);
            out.push(&mut b.beta);
        }
        out.push(&mut self.dense.weights);
        out.push(&mut self.dense.bias);
        out
    }

    /// Every stored array, trainable or not, in checkpoint order.
    pub fn all_arrays(&self) -> Vec<&[R]> {
        let mut out: Vec<&[R]> = Vec::new();
        for b in &self.blocks {
            out.extend([
                &b.weights[..],
                &b.bias[..],
                &b.gamma[..],
                &b.beta[..],
                &b.running_mean[..],
                &b.running_var[..],
            ]);
        }
        out.extend([&self.dense.weights[..], &self.dense.bias[..]]);
        out
    }

    pub fn all_arrays_mut(&mut self) -> Vec<&mut [R]> {
        let mut out: Vec<&mut [R]> = Vec::new();
        for b in &mut self.blocks {
            out.push(&mut b.weights);
            out.push(&mut b.bias);
            out.push(&mut b.gamma);
            out.push(&mut b.beta);
            out.push(&mut b.running_mean);
            out.push(&mut b.running_var);
        }
        out.push(&mut self.dense.weights);
        out.push(&mut self.dense.bias);
        out
    }

    /// Convert every array to another precision.
    pub fn cast<S: Real>(&self) -> FcnModel<S> {
        let conv = |v: &[R]| v.iter().map(|x| S::of(x.f64())).collect::<Vec<S>>();
        FcnModel {
            config: self.config.clone(),
            blocks: self
                .blocks
                .iter()
                .map(|b| ConvBlock {
                    geometry: b.geometry,
                    weights: conv(&b.weights),
                    bias: conv(&b.bias),
                    gamma: conv(&b.gamma),
                    beta: conv(&b.beta),
                    running_mean: conv(&b.running_mean),
                    running_var: conv(&b.running_var),
                })
                .collect(),
            dense: Dense {
                inputs: self.dense.inputs,
                outputs: self.dense.outputs,
                weights: conv(&self.dense.weights),
                bias: conv(&self.dense.bias),
            },
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params(variant: Variant) -> usize {
        build_model::<f32>(ModelConfig::new(variant, 24, 200, 12), 0)
            .unwrap()
            .count_params()
    }

    #[test]
    fn default_parameter_counts() {
        assert_eq!(params(Variant::Stacked1D), 1_161_016);
        assert_eq!(params(Variant::MultiChannel1D), 531_000);
        assert_eq!(params(Variant::Image2D), 3_996_120);
    }

    #[test]
    fn first_multichannel_block_count() {
        let m = build_model::<f32>(
            ModelConfig::new(Variant::MultiChannel1D, 24, 200, 12).with_layers(vec![LayerSpec::new(96, 9, 1)]),
            0,
        )
        .unwrap();
        let b = &m.blocks[0];
        assert_eq!(b.weights.len() + b.bias.len() + b.gamma.len() + b.beta.len(), 10_656);
    }

    #[test]
    fn dense_head_count() {
        let m = build_model::<f32>(
            ModelConfig::new(Variant::MultiChannel1D, 24, 200, 12).with_layers(vec![LayerSpec::new(128, 9, 1)]),
            0,
        )
        .unwrap();
        assert_eq!(m.dense.weights.len() + m.dense.bias.len(), 3_096);
    }

    #[test]
    fn shapes_per_variant() {
        let stacked = ModelConfig::new(Variant::Stacked1D, 24, 200, 12).geometries().unwrap();
        let lengths: Vec<usize> = stacked.iter().map(|g| g.oh).collect();
        assert_eq!(lengths, vec![240, 240, 120]);
        for g in ModelConfig::new(Variant::MultiChannel1D, 24, 200, 12).geometries().unwrap() {
            assert_eq!((g.oh, g.ow), (200, 1));
        }
        for g in ModelConfig::new(Variant::Image2D, 24, 200, 12).geometries().unwrap() {
            assert_eq!((g.oh, g.ow), (200, 12));
        }
    }

    #[test]
    fn same_seed_same_weights() {
        let cfg = ModelConfig::new(Variant::MultiChannel1D, 5, 20, 3);
        let a = build_model::<f32>(cfg.clone(), 42).unwrap();
        let b = build_model::<f32>(cfg.clone(), 42).unwrap();
        let c = build_model::<f32>(cfg, 43).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn rejects_bad_hyperparameters() {
        let bad = ModelConfig::new(Variant::Image2D, 24, 200, 12).with_layers(vec![LayerSpec::new(0, 9, 1)]);
        assert!(build_model::<f32>(bad, 0).is_err());
        let bad = ModelConfig::new(Variant::Stacked1D, 24, 200, 12).with_layers(vec![LayerSpec::new(4, 101, 10)]);
        assert!(build_model::<f32>(bad, 0).is_err());
        let bad = ModelConfig::new(Variant::Stacked1D, 24, 200, 12).with_layers(vec![LayerSpec::new(4, 9, 0)]);
        assert!(build_model::<f32>(bad, 0).is_err());
    }
}
