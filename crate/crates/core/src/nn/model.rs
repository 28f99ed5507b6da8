use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::batchnorm::{batchnorm_backward, BatchNorm2d, BatchStats, BnCache};
use super::conv::{output_extent, Conv2d};
use super::linear::{linear_backward, linear_forward, Linear};
use super::relu::{relu_backward_rule, relu_forward, ReluRule};
use super::{AdamConfig, AdamState, Mode, ParamMut, Scalar, Tensor};
use crate::error::{Error, Result};
use crate::rng::{self, Domain};

/// Padding used by every convolution in the built-in architectures.
pub const PADDING: usize = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub stride: usize,
}

const fn spec(in_channels: usize, out_channels: usize, stride: usize) -> LayerSpec {
    LayerSpec { in_channels, out_channels, stride }
}

const SMALL: [LayerSpec; 4] = [spec(1, 2, 4), spec(2, 2, 1), spec(2, 6, 4), spec(6, 6, 1)];
const LARGE: [LayerSpec; 4] = [spec(1, 16, 1), spec(16, 16, 1), spec(16, 32, 1), spec(32, 32, 1)];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Arch {
    Small,
    Large,
    /// Arbitrary conv stack, used for tests and experiments.
    Custom(Vec<LayerSpec>),
}

impl Arch {
    pub fn layers(&self) -> Vec<LayerSpec> {
        match self {
            Arch::Small => SMALL.to_vec(),
            Arch::Large => LARGE.to_vec(),
            Arch::Custom(v) => v.clone(),
        }
    }

    pub fn tag(&self) -> &'static str {
        match self {
            Arch::Small => "small",
            Arch::Large => "large",
            Arch::Custom(_) => "custom",
        }
    }
}

impl std::str::FromStr for Arch {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "small" => Ok(Arch::Small),
            "large" => Ok(Arch::Large),
            _ => Err(Error::Param(format!("unknown architecture {s:?} (expected small or large)"))),
        }
    }
}

impl std::fmt::Display for Arch {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.tag())
    }
}

/// Conv → BatchNorm → ReLU.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvBlock {
    pub conv: Conv2d,
    pub bn: BatchNorm2d,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct BlockGrads {
    pub weight: Vec<Scalar>,
    pub bias: Vec<Scalar>,
    pub gamma: Vec<Scalar>,
    pub beta: Vec<Scalar>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Gradients {
    pub blocks: Vec<BlockGrads>,
    pub head_weight: Vec<Scalar>,
    pub head_bias: Vec<Scalar>,
}

impl Gradients {
    pub fn all(&self) -> impl Iterator<Item = &Scalar> {
        self.blocks
            .iter()
            .flat_map(|b| b.weight.iter().chain(&b.bias).chain(&b.gamma).chain(&b.beta))
            .chain(&self.head_weight)
            .chain(&self.head_bias)
    }

    pub fn is_finite(&self) -> bool {
        self.all().all(|v| v.is_finite())
    }
}

/// Identifies one parameter array of a [`Model`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamGroup {
    ConvWeight(usize),
    ConvBias(usize),
    Gamma(usize),
    Beta(usize),
    HeadWeight,
    HeadBias,
}

impl ParamGroup {
    pub fn name(&self) -> String {
        match *self {
            ParamGroup::ConvWeight(i) => format!("conv{}.weight", i + 1),
            ParamGroup::ConvBias(i) => format!("conv{}.bias", i + 1),
            ParamGroup::Gamma(i) => format!("bn{}.gamma", i + 1),
            ParamGroup::Beta(i) => format!("bn{}.beta", i + 1),
            ParamGroup::HeadWeight => "head.weight".into(),
            ParamGroup::HeadBias => "head.bias".into(),
        }
    }

    fn decays(&self) -> bool {
        matches!(self, ParamGroup::ConvWeight(_) | ParamGroup::HeadWeight)
    }
}

/// Everything a forward pass produced, enough to run a backward pass.
#[derive(Debug, Clone)]
pub struct Trace {
    pub mode: Mode,
    /// `activations[0]` is the input; `activations[i + 1]` is block `i`'s
    /// post-ReLU output.
    pub activations: Vec<Tensor>,
    /// Batch-norm outputs, i.e. ReLU inputs, per block.
    pub pre_relu: Vec<Tensor>,
    pub bn: Vec<BnCache>,
    pub logits: Tensor,
}

impl Trace {
    pub fn is_finite(&self) -> bool {
        self.activations.iter().chain(&self.pre_relu).all(Tensor::is_finite) && self.logits.is_finite()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub arch: Arch,
    pub input_size: usize,
    pub blocks: Vec<ConvBlock>,
    pub head: Linear,
    pub grads: Gradients,
}

impl Model {
    /// Zero-initialized model for `input_size × input_size` single-channel inputs.
    pub fn new(arch: Arch, input_size: usize, num_classes: usize) -> Result<Self> {
        let layers = arch.layers();
        let mut channels = 1;
        let mut side = input_size;
        let mut blocks = Vec::with_capacity(layers.len());
        for (i, l) in layers.iter().enumerate() {
            if l.in_channels != channels {
                return Err(Error::Shape(format!(
                    "layer {} expects {} input channels but receives {channels}",
                    i + 1,
                    l.in_channels
                )));
            }
            side = output_extent(side, l.stride, PADDING)
                .ok_or_else(|| Error::Shape(format!("input size {input_size} too small at layer {}", i + 1)))?;
            let mut conv = Conv2d::new(l.in_channels, l.out_channels, l.stride, PADDING);
            conv.bias_trainable = false;
            blocks.push(ConvBlock { conv, bn: BatchNorm2d::new(l.out_channels) });
            channels = l.out_channels;
        }
        if num_classes == 0 {
            return Err(Error::Param("model needs at least one output class".into()));
        }
        let head = Linear::new(channels * side * side, num_classes);
        let mut model = Self { arch, input_size, blocks, head, grads: Gradients::default() };
        model.grads = model.zero_grads();
        Ok(model)
    }

    pub fn num_classes(&self) -> usize {
        self.head.out_features()
    }

    /// Flattened feature count seen by the head.
    pub fn flat_features(&self) -> usize {
        self.head.in_features()
    }

    /// `(channels, height, width)` of every block's output.
    pub fn block_shapes(&self) -> Vec<(usize, usize, usize)> {
        let mut side = self.input_size;
        self.blocks
            .iter()
            .map(|b| {
                side = output_extent(side, b.conv.stride, b.conv.padding).expect("validated at construction");
                (b.conv.out_channels(), side, side)
            })
            .collect()
    }

    fn zero_grads(&self) -> Gradients {
        Gradients {
            blocks: self
                .blocks
                .iter()
                .map(|b| BlockGrads {
                    weight: vec![0.0; b.conv.weight.len()],
                    bias: vec![0.0; b.conv.bias.len()],
                    gamma: vec![0.0; b.bn.channels()],
                    beta: vec![0.0; b.bn.channels()],
                })
                .collect(),
            head_weight: vec![0.0; self.head.weight.len()],
            head_bias: vec![0.0; self.head.bias.len()],
        }
    }

    /// Weights ~ N(0, variance_scale² / fan_in); biases 0; gamma 1, beta 0;
    /// running statistics reset.
    pub fn init_params(&mut self, variance_scale: f64, seed: u64) {
        let draw = |data: &mut [Scalar], fan_in: usize, stream: u64| {
            let mut rng = rng::stream(Domain::Init, seed, stream);
            let std = variance_scale / (fan_in as f64).sqrt();
            for v in data {
                let z: f64 = StandardNormal.sample(&mut rng);
                *v = (z * std) as Scalar;
            }
        };
        for (i, b) in self.blocks.iter_mut().enumerate() {
            let fan_in = b.conv.in_channels() * 9;
            draw(b.conv.weight.data_mut(), fan_in, i as u64);
            b.conv.bias.fill(0.0);
            let c = b.bn.channels();
            b.bn = BatchNorm2d { momentum: b.bn.momentum, eps: b.bn.eps, ..BatchNorm2d::new(c) };
        }
        let fan_in = self.head.in_features();
        draw(self.head.weight.data_mut(), fan_in, self.blocks.len() as u64);
        self.head.bias.fill(0.0);
        self.grads = self.zero_grads();
    }

    fn check_input(&self, x: &Tensor) -> Result<usize> {
        let (n, c, h, w) = x.dims4()?;
        if c != 1 || h != self.input_size || w != self.input_size {
            return Err(Error::Shape(format!(
                "model expects N×1×{s}×{s} input, got {:?}",
                x.shape(),
                s = self.input_size
            )));
        }
        Ok(n)
    }

    fn forward_impl(&self, x: &Tensor, mode: Mode) -> Result<(Trace, Vec<Option<BatchStats>>)> {
        let n = self.check_input(x)?;
        let mut activations = vec![x.clone()];
        let mut pre_relu = Vec::with_capacity(self.blocks.len());
        let mut bn = Vec::with_capacity(self.blocks.len());
        let mut stats = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let z = block.conv.forward(activations.last().expect("non-empty"))?;
            let (y, cache, s) = block.bn.forward(&z, mode)?;
            activations.push(relu_forward(&y));
            pre_relu.push(y);
            bn.push(cache);
            stats.push(s);
        }
        let flat = activations.last().expect("non-empty").clone().reshape(&[n, self.flat_features()])?;
        let logits = linear_forward(&flat, &self.head)?;
        Ok((Trace { mode, activations, pre_relu, bn, logits }, stats))
    }

    /// Forward pass; train mode also folds batch statistics into the running
    /// averages.
    pub fn forward(&mut self, x: &Tensor, mode: Mode) -> Result<Trace> {
        let (trace, stats) = self.forward_impl(x, mode)?;
        for (block, s) in self.blocks.iter_mut().zip(&stats) {
            if let Some(s) = s {
                block.bn.update_running(s);
            }
        }
        Ok(trace)
    }

    /// Eval-mode forward on an immutable model.
    pub fn infer(&self, x: &Tensor) -> Result<Trace> {
        Ok(self.forward_impl(x, Mode::Eval)?.0)
    }

    /// Forward pass that leaves running statistics untouched, in any mode.
    pub fn forward_pure(&self, x: &Tensor, mode: Mode) -> Result<Trace> {
        Ok(self.forward_impl(x, mode)?.0)
    }

    fn backward_impl(
        &self,
        trace: &Trace,
        grad_logits: &Tensor,
        rule: ReluRule,
        mut grads: Option<&mut Gradients>,
    ) -> Result<Tensor> {
        let last = trace.activations.last().ok_or_else(|| Error::MissingCache("empty trace".into()))?;
        if trace.pre_relu.len() != self.blocks.len() || trace.bn.len() != self.blocks.len() {
            return Err(Error::MissingCache("trace does not match the model's layers".into()));
        }
        let n = last.shape()[0];
        let flat = last.clone().reshape(&[n, self.flat_features()])?;
        let (g_flat, gw, gb) = linear_backward(grad_logits, &flat, &self.head)?;
        if let Some(g) = grads.as_deref_mut() {
            g.head_weight = gw.into_data();
            g.head_bias = gb;
        }
        let mut g = g_flat.reshape(last.shape())?;
        for i in (0..self.blocks.len()).rev() {
            let block = &self.blocks[i];
            g = relu_backward_rule(&g, &trace.pre_relu[i], rule)?;
            let (g_z, g_gamma, g_beta) = batchnorm_backward(&g, Some(&trace.bn[i]), &block.bn.gamma)?;
            let (g_in, g_w, g_b) = block.conv.backward(&g_z, &trace.activations[i])?;
            if let Some(gr) = grads.as_deref_mut() {
                let bg = &mut gr.blocks[i];
                bg.weight = g_w.into_data();
                bg.bias = if block.conv.bias_trainable { g_b } else { vec![0.0; g_b.len()] };
                bg.gamma = g_gamma;
                bg.beta = g_beta;
            }
            g = g_in;
        }
        Ok(g)
    }

    /// Fills every parameter gradient from `grad_logits` and returns the
    /// gradient with respect to the input.
    pub fn backward(&mut self, trace: &Trace, grad_logits: &Tensor) -> Result<Tensor> {
        let mut grads = std::mem::take(&mut self.grads);
        let res = self.backward_impl(trace, grad_logits, ReluRule::Plain, Some(&mut grads));
        self.grads = grads;
        res
    }

    /// Input gradient only, with the chosen ReLU rule; parameters and stored
    /// gradients are untouched.
    pub fn input_gradient(&self, trace: &Trace, grad_logits: &Tensor, rule: ReluRule) -> Result<Tensor> {
        self.backward_impl(trace, grad_logits, rule, None)
    }

    /// Trainable parameter arrays in a fixed order.
    pub fn param_groups(&self) -> Vec<ParamGroup> {
        let mut out = Vec::new();
        for (i, b) in self.blocks.iter().enumerate() {
            out.push(ParamGroup::ConvWeight(i));
            if b.conv.bias_trainable {
                out.push(ParamGroup::ConvBias(i));
            }
            out.push(ParamGroup::Gamma(i));
            out.push(ParamGroup::Beta(i));
        }
        out.push(ParamGroup::HeadWeight);
        out.push(ParamGroup::HeadBias);
        out
    }

    pub fn param(&self, group: ParamGroup) -> &[Scalar] {
        match group {
            ParamGroup::ConvWeight(i) => self.blocks[i].conv.weight.data(),
            ParamGroup::ConvBias(i) => &self.blocks[i].conv.bias,
            ParamGroup::Gamma(i) => &self.blocks[i].bn.gamma,
            ParamGroup::Beta(i) => &self.blocks[i].bn.beta,
            ParamGroup::HeadWeight => self.head.weight.data(),
            ParamGroup::HeadBias => &self.head.bias,
        }
    }

    pub fn param_mut(&mut self, group: ParamGroup) -> &mut [Scalar] {
        match group {
            ParamGroup::ConvWeight(i) => self.blocks[i].conv.weight.data_mut(),
            ParamGroup::ConvBias(i) => &mut self.blocks[i].conv.bias,
            ParamGroup::Gamma(i) => &mut self.blocks[i].bn.gamma,
            ParamGroup::Beta(i) => &mut self.blocks[i].bn.beta,
            ParamGroup::HeadWeight => self.head.weight.data_mut(),
            ParamGroup::HeadBias => &mut self.head.bias,
        }
    }

    pub fn grad(&self, group: ParamGroup) -> &[Scalar] {
        match group {
            ParamGroup::ConvWeight(i) => &self.grads.blocks[i].weight,
            ParamGroup::ConvBias(i) => &self.grads.blocks[i].bias,
            ParamGroup::Gamma(i) => &self.grads.blocks[i].gamma,
            ParamGroup::Beta(i) => &self.grads.blocks[i].beta,
            ParamGroup::HeadWeight => &self.grads.head_weight,
            ParamGroup::HeadBias => &self.grads.head_bias,
        }
    }

    /// Parameter/gradient pairs in [`Self::param_groups`] order, for the optimizer.
    pub fn params_mut(&mut self) -> Vec<ParamMut<'_>> {
        let Model { blocks, head, grads, .. } = self;
        let mut out = Vec::new();
        for (i, (b, g)) in blocks.iter_mut().zip(&grads.blocks).enumerate() {
            out.push(ParamMut {
                name: ParamGroup::ConvWeight(i).name(),
                value: b.conv.weight.data_mut(),
                grad: &g.weight,
                decay: true,
            });
            if b.conv.bias_trainable {
                out.push(ParamMut { name: ParamGroup::ConvBias(i).name(), value: &mut b.conv.bias, grad: &g.bias, decay: false });
            }
            out.push(ParamMut { name: ParamGroup::Gamma(i).name(), value: &mut b.bn.gamma, grad: &g.gamma, decay: false });
            out.push(ParamMut { name: ParamGroup::Beta(i).name(), value: &mut b.bn.beta, grad: &g.beta, decay: false });
        }
        out.push(ParamMut {
            name: ParamGroup::HeadWeight.name(),
            value: head.weight.data_mut(),
            grad: &grads.head_weight,
            decay: ParamGroup::HeadWeight.decays(),
        });
        out.push(ParamMut { name: ParamGroup::HeadBias.name(), value: &mut head.bias, grad: &grads.head_bias, decay: false });
        out
    }

    /// Applies one Adam step with the currently stored gradients.
    pub fn adam_step(&mut self, state: &mut AdamState, cfg: &AdamConfig) {
        let mut params = self.params_mut();
        super::adam_step(&mut params, state, cfg);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::softmax_cross_entropy;

    #[test]
    fn small_net_shapes() {
        let m = Model::new(Arch::Small, 128, 3).unwrap();
        assert_eq!(m.block_shapes(), vec![(2, 32, 32), (2, 32, 32), (6, 8, 8), (6, 8, 8)]);
        assert_eq!(m.flat_features(), 384);
        let x = Tensor::zeros(&[2, 1, 128, 128]);
        let t = m.infer(&x).unwrap();
        let shapes: Vec<_> = t.activations[1..].iter().map(|a| a.shape().to_vec()).collect();
        assert_eq!(shapes, vec![vec![2, 2, 32, 32], vec![2, 2, 32, 32], vec![2, 6, 8, 8], vec![2, 6, 8, 8]]);
        assert_eq!(t.logits.shape(), &[2, 3]);
    }

    #[test]
    fn shape_algebra_for_sizes_divisible_by_16() {
        for s in [16usize, 32, 48, 64, 128] {
            let small = Model::new(Arch::Small, s, 3).unwrap();
            assert_eq!(small.flat_features(), 6 * (s / 16) * (s / 16));
            let large = Model::new(Arch::Large, s, 3).unwrap();
            assert_eq!(large.flat_features(), 32 * s * s);
        }
    }

    #[test]
    fn zero_input_gives_head_bias() {
        let mut m = Model::new(Arch::Small, 32, 3).unwrap();
        m.init_params(1.0, 3);
        m.head.bias = vec![0.5, -1.0, 2.0];
        let t = m.infer(&Tensor::zeros(&[1, 1, 32, 32])).unwrap();
        for (a, b) in t.logits.data().iter().zip(&m.head.bias) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn init_is_seeded_and_scaled() {
        let mut a = Model::new(Arch::Small, 32, 3).unwrap();
        let mut b = a.clone();
        a.init_params(1.5, 9);
        b.init_params(1.5, 9);
        assert_eq!(a, b);
        b.init_params(1.5, 10);
        assert_ne!(a, b);
        a.init_params(0.0, 9);
        assert!(a.param_groups().iter().all(|&g| !matches!(g, ParamGroup::ConvWeight(_) | ParamGroup::HeadWeight)
            || a.param(g).iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn init_empirical_std() {
        // 1→… head with F = 100_352 inputs (large net on 56×56)
        let mut m = Model::new(Arch::Large, 56, 1).unwrap();
        m.init_params(2.0, 1);
        let w = m.head.weight.data();
        assert!(w.len() >= 100_000);
        let mean = w.iter().sum::<Scalar>() / w.len() as Scalar;
        let std = (w.iter().map(|v| (v - mean).powi(2)).sum::<Scalar>() / w.len() as Scalar).sqrt();
        let target = 2.0 / (w.len() as Scalar).sqrt();
        assert!((std - target).abs() / target < 0.05, "{std} vs {target}");
    }

    #[test]
    fn wrong_input_shape() {
        let m = Model::new(Arch::Small, 32, 3).unwrap();
        assert!(m.infer(&Tensor::zeros(&[1, 1, 16, 16])).is_err());
        assert!(Model::new(Arch::Custom(vec![spec(2, 2, 1)]), 8, 3).is_err());
    }

    #[test]
    fn backward_fills_every_group_and_order_is_stable() {
        let mut m = Model::new(Arch::Small, 16, 3).unwrap();
        m.init_params(1.0, 4);
        let x = Tensor::from_vec(&[4, 1, 16, 16], (0..1024).map(|i| ((i * 37) % 101) as Scalar / 101.0).collect()).unwrap();
        let t = m.forward(&x, Mode::Train).unwrap();
        let (_, g) = softmax_cross_entropy(&t.logits, &[0, 1, 2, 1]).unwrap();
        m.backward(&t, &g).unwrap();
        let names: Vec<_> = m.param_groups().iter().map(|g| g.name()).collect();
        let from_slots: Vec<_> = m.params_mut().iter().map(|p| p.name.clone()).collect();
        assert_eq!(names, from_slots);
        assert!(!names.iter().any(|n| n.starts_with("conv") && n.ends_with(".bias")));
        assert!(m.grads.head_weight.iter().any(|&v| v != 0.0));
        assert!(m.grads.blocks[0].weight.iter().any(|&v| v != 0.0));
    }

    #[test]
    fn train_forward_updates_running_stats_but_infer_does_not() {
        let mut m = Model::new(Arch::Small, 16, 3).unwrap();
        m.init_params(1.0, 4);
        let x = Tensor::from_vec(&[2, 1, 16, 16], (0..512).map(|i| (i % 7) as Scalar).collect()).unwrap();
        let before = m.clone();
        m.infer(&x).unwrap();
        assert_eq!(m, before);
        m.forward(&x, Mode::Train).unwrap();
        assert_ne!(m.blocks[0].bn.running_mean, before.blocks[0].bn.running_mean);
    }
}
