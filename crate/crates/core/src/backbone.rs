//! Miniature densely-connected backbone with SE-augmented transitions, plus the
//! full model (backbone + multi-map head).
//!
//! Topology: 3×3 stem conv (stride 2) → dense block → transition → … → dense
//! block → BN → ReLU → head. A dense layer is `concat(x, conv3x3(relu(bn(x))))`
//! and a transition is `avg_pool2(se_block(conv1x1(x)))`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::blocks::head::{head_forward, HeadConfig, HeadOutput, HeadVars};
use crate::blocks::se::{he_tensor, se_block, SeParams, SeVars};
use crate::error::{Error, Result};
use crate::tensor::{BnMode, ChannelStats, Tape, Tensor, Var};

pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Debug, PartialEq)]
pub struct BackboneConfig {
    pub input_channels: usize,
    pub stem_channels: usize,
    pub stem_stride: usize,
    pub num_blocks: usize,
    pub layers_per_block: usize,
    pub growth_rate: usize,
    pub compression: f64,
    pub se_reduction: usize,
    /// When false every transition skips its SE block (gate fixed at 1).
    pub use_se: bool,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            input_channels: 1,
            stem_channels: 16,
            stem_stride: 2,
            num_blocks: 3,
            layers_per_block: 4,
            growth_rate: 12,
            compression: 0.5,
            se_reduction: 16,
            use_se: true,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("input_channels", self.input_channels),
            ("stem_channels", self.stem_channels),
            ("stem_stride", self.stem_stride),
            ("num_blocks", self.num_blocks),
            ("layers_per_block", self.layers_per_block),
            ("growth_rate", self.growth_rate),
            ("se_reduction", self.se_reduction),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if !(self.compression > 0.0 && self.compression <= 1.0) {
            return Err(Error::Config(format!("compression must lie in (0,1], got {}", self.compression)));
        }
        Ok(())
    }

    /// Total downsampling factor from input to feature map.
    pub fn total_stride(&self) -> usize {
        self.stem_stride << (self.num_blocks - 1)
    }

    pub fn transition_channels(&self, channels: usize) -> usize {
        ((self.compression * channels as f64).floor() as usize).max(1)
    }

    /// Channels entering each block, followed by the final feature depth.
    pub fn block_channels(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.num_blocks + 1);
        let mut c = self.stem_channels;
        for b in 0..self.num_blocks {
            out.push(c);
            c += self.layers_per_block * self.growth_rate;
            if b + 1 < self.num_blocks {
                c = self.transition_channels(c);
            }
        }
        out.push(c);
        out
    }

    pub fn feature_channels(&self) -> usize {
        *self.block_channels().last().unwrap()
    }

    pub fn check_input(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let s = self.total_stride();
        if h % s != 0 || w % s != 0 {
            return Err(Error::shape(
                "backbone_forward",
                format!("input {h}x{w} must be divisible by {s} (stem stride {} x 2^{})", self.stem_stride, self.num_blocks - 1),
            ));
        }
        Ok((h / s, w / s))
    }
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub head: HeadConfig,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.head.validate()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// One named model tensor. Running statistics are stored but not trained.
#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub tensor: Tensor,
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct BnIds {
    gamma: usize,
    beta: usize,
    running_mean: usize,
    running_var: usize,
}

#[derive(Clone, Debug, PartialEq)]
struct DenseLayerIds {
    bn: BnIds,
    conv: usize,
}

#[derive(Clone, Debug, PartialEq)]
struct TransitionIds {
    conv: usize,
    se_w1: usize,
    se_w2: usize,
}

#[derive(Clone, Debug, PartialEq)]
struct Layout {
    stem: usize,
    blocks: Vec<Vec<DenseLayerIds>>,
    transitions: Vec<TransitionIds>,
    final_bn: BnIds,
    head_weight: usize,
    head_bias: usize,
}

/// All model tensors in a fixed, config-determined order.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    tensors: Vec<NamedTensor>,
    layout: Layout,
}

struct Builder {
    tensors: Vec<NamedTensor>,
    rng: ChaCha8Rng,
}

impl Builder {
    fn push(&mut self, name: String, tensor: Tensor) -> usize {
        self.tensors.push(NamedTensor { name, tensor });
        self.tensors.len() - 1
    }

    fn he(&mut self, name: String, shape: &[usize], fan_in: usize) -> usize {
        let t = he_tensor(shape, fan_in, &mut self.rng);
        self.push(name, t)
    }

    fn bn(&mut self, prefix: &str, c: usize) -> BnIds {
        let mut running_var = Tensor::full([c], 1.0);
        running_var.set_requires_grad(false);
        BnIds {
            gamma: self.push(format!("{prefix}.gamma"), Tensor::param([c], vec![1.0; c]).unwrap()),
            beta: self.push(format!("{prefix}.beta"), Tensor::param([c], vec![0.0; c]).unwrap()),
            running_mean: self.push(format!("{prefix}.running_mean"), Tensor::zeros([c])),
            running_var: self.push(format!("{prefix}.running_var"), running_var),
        }
    }
}

impl ModelParams {
    /// He-normal weights (variance `2 / fan_in`), unit BN scale, zero shifts and
    /// biases. Fully determined by `seed`.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let bb = &config.backbone;
        let mut b = Builder { tensors: Vec::new(), rng: ChaCha8Rng::seed_from_u64(seed) };
        let stem = b.he("stem.conv".into(), &[3, 3, bb.input_channels, bb.stem_channels], 9 * bb.input_channels);
        let channels = bb.block_channels();
        let mut blocks = Vec::new();
        let mut transitions = Vec::new();
        for (bi, &cin) in channels[..bb.num_blocks].iter().enumerate() {
            let mut layers = Vec::new();
            for li in 0..bb.layers_per_block {
                let c = cin + li * bb.growth_rate;
                let prefix = format!("block{bi}.layer{li}");
                let bn = b.bn(&format!("{prefix}.bn"), c);
                let conv = b.he(format!("{prefix}.conv"), &[3, 3, c, bb.growth_rate], 9 * c);
                layers.push(DenseLayerIds { bn, conv });
            }
            blocks.push(layers);
            if bi + 1 < bb.num_blocks {
                let c = cin + bb.layers_per_block * bb.growth_rate;
                let out = bb.transition_channels(c);
                let conv = b.he(format!("transition{bi}.conv"), &[1, 1, c, out], c);
                let se = SeParams::init(out, bb.se_reduction, &mut b.rng);
                let se_w1 = b.push(format!("transition{bi}.se.w1"), se.w1);
                let se_w2 = b.push(format!("transition{bi}.se.w2"), se.w2);
                transitions.push(TransitionIds { conv, se_w1, se_w2 });
            }
        }
        let features = channels[bb.num_blocks];
        let final_bn = b.bn("final.bn", features);
        let maps = config.head.total_maps();
        let head_weight = b.he("head.weight".into(), &[1, 1, features, maps], features);
        let head_bias = b.push("head.bias".into(), Tensor::param([maps], vec![0.0; maps]).unwrap());
        Ok(Self {
            tensors: b.tensors,
            layout: Layout { stem, blocks, transitions, final_bn, head_weight, head_bias },
        })
    }

    pub fn tensors(&self) -> &[NamedTensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [NamedTensor] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|t| t.name == name).map(|t| &t.tensor)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.iter_mut().find(|t| t.name == name).map(|t| &mut t.tensor)
    }

    /// Replaces every tensor's values with those in `other`, which must have the
    /// same names and shapes.
    pub fn load_from(&mut self, other: &[NamedTensor]) -> Result<()> {
        if other.len() != self.tensors.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} tensors, found {}",
                self.tensors.len(),
                other.len()
            )));
        }
        for (dst, src) in self.tensors.iter_mut().zip(other) {
            if dst.name != src.name || dst.tensor.shape() != src.tensor.shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor {} {:?} does not match {} {:?}",
                    src.name,
                    src.tensor.shape(),
                    dst.name,
                    dst.tensor.shape()
                )));
            }
            dst.tensor.values_mut().copy_from_slice(src.tensor.values());
        }
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        self.tensors.iter_mut().for_each(|t| t.tensor.zero_grad());
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.tensor.is_finite())
    }

    pub fn trainable_count(&self) -> usize {
        self.tensors.iter().filter(|t| t.tensor.requires_grad()).map(|t| t.tensor.numel()).sum()
    }

    fn stats(&self, ids: BnIds) -> ChannelStats {
        ChannelStats {
            mean: self.tensors[ids.running_mean].tensor.values().to_vec(),
            var: self.tensors[ids.running_var].tensor.values().to_vec(),
        }
    }
}

/// Nodes recorded by one model forward pass.
#[derive(Clone, Debug)]
pub struct ForwardPass {
    bindings: Vec<Var>,
    batchnorms: Vec<(BnIds, Var)>,
    pub features: Var,
    pub head: HeadOutput,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ModelParams,
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let params = ModelParams::init(&config, seed)?;
        Ok(Self { config, params })
    }

    /// Records the full forward pass on `tape`. `images` is `[N,H,W,Cin]` or `[H,W,Cin]`.
    pub fn forward(&self, tape: &mut Tape, images: Var, mode: Mode) -> Result<ForwardPass> {
        let bb = &self.config.backbone;
        let shape = tape.shape(images).to_vec();
        let (h, w, cin) = match *shape.as_slice() {
            [h, w, c] | [_, h, w, c] => (h, w, c),
            _ => return Err(Error::shape("backbone_forward", format!("images must be rank 3 or 4, got {shape:?}"))),
        };
        if cin != bb.input_channels {
            return Err(Error::shape("backbone_forward", format!("expected {} input channels, got {cin}", bb.input_channels)));
        }
        bb.check_input(h, w)?;
        let bindings: Vec<Var> = self.params.tensors.iter().map(|t| tape.leaf(&t.tensor)).collect();
        self.forward_bound(tape, images, mode, bindings)
    }

    /// [`Model::forward`] with parameters already registered on the tape, one
    /// var per entry of [`ModelParams::tensors`]. Eval-mode running statistics
    /// are still read from `self.params`.
    pub fn forward_bound(&self, tape: &mut Tape, images: Var, mode: Mode, bindings: Vec<Var>) -> Result<ForwardPass> {
        let bb = &self.config.backbone;
        let p = &self.params;
        if bindings.len() != p.tensors.len() {
            return Err(Error::shape("backbone_forward", format!("{} bindings for {} tensors", bindings.len(), p.tensors.len())));
        }
        let v = |i: usize| bindings[i];
        let mut batchnorms = Vec::new();
        let mut bn = |tape: &mut Tape, x: Var, ids: BnIds| -> Result<Var> {
            let y = match mode {
                Mode::Train => tape.batchnorm(x, v(ids.gamma), v(ids.beta), BnMode::Train)?,
                Mode::Eval => tape.batchnorm(x, v(ids.gamma), v(ids.beta), BnMode::Eval(&p.stats(ids)))?,
            };
            batchnorms.push((ids, y));
            Ok(y)
        };

        let l = &p.layout;
        let mut x = tape.conv2d(images, v(l.stem), None, bb.stem_stride, 1)?;
        for (bi, layers) in l.blocks.iter().enumerate() {
            for layer in layers {
                let y = bn(tape, x, layer.bn)?;
                let y = tape.relu(y)?;
                let y = tape.conv2d(y, v(layer.conv), None, 1, 1)?;
                x = tape.concat_channels(x, y)?;
            }
            if let Some(t) = l.transitions.get(bi) {
                x = tape.conv2d(x, v(t.conv), None, 1, 0)?;
                if bb.use_se {
                    x = se_block(tape, x, SeVars { w1: v(t.se_w1), w2: v(t.se_w2) })?;
                }
                x = tape.avg_pool2d(x, 2, 2)?;
            }
        }
        let x = bn(tape, x, l.final_bn)?;
        let features = tape.relu(x)?;
        let head = head_forward(
            tape,
            features,
            HeadVars { weight: v(l.head_weight), bias: v(l.head_bias) },
            &self.config.head,
        )?;
        Ok(ForwardPass { bindings, batchnorms, features, head })
    }

    /// Adds the tape's leaf gradients into the parameters' gradient buffers.
    pub fn accumulate_grads(&mut self, tape: &Tape, pass: &ForwardPass) {
        for (t, &var) in self.params.tensors.iter_mut().zip(&pass.bindings) {
            if let Some(g) = tape.grad(var) {
                t.tensor.grad_mut().iter_mut().zip(g).for_each(|(a, d)| *a += d);
            }
        }
    }

    /// Exponential moving update of BN running statistics from a train-mode pass.
    pub fn update_running_stats(&mut self, tape: &Tape, pass: &ForwardPass) {
        for &(ids, var) in &pass.batchnorms {
            let Some(stats) = tape.batch_stats(var) else { continue };
            let tensors = &mut self.params.tensors;
            for (r, b) in tensors[ids.running_mean].tensor.values_mut().iter_mut().zip(&stats.mean) {
                *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * b;
            }
            for (r, b) in tensors[ids.running_var].tensor.values_mut().iter_mut().zip(&stats.var) {
                *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * b;
            }
        }
    }

    /// Eval-mode class probabilities for a batch `[N,H,W,Cin]`, flattened `[N*C]`.
    pub fn predict(&self, images: Tensor) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let x = tape.constant(images);
        let pass = self.forward(&mut tape, x, Mode::Eval)?;
        Ok(tape.value(pass.head.probs).to_vec())
    }
}
