//! Model builders and forward execution.
//!
//! A model is a [`ModelGraph`]: an ordered list of [`LayerSpec`]s plus a
//! named [`ParameterSet`]. Three families are provided:
//!
//! - a generator mapping latent noise to images in [−1, 1] through a
//!   transposed-convolution ladder (4×4 kernels throughout);
//! - a discriminator mapping images to a probability in (0, 1) through a
//!   mirrored convolution ladder;
//! - four miniature classifier backbones, each preserving its family's
//!   signature mechanism (plain conv+pool, fire modules, inception blocks,
//!   identity-skip residual blocks) and ending in a trainable two-class head.
//!
//! Forward passes run either on a [`Tape`] (training, gradients recorded) or
//! as a pure evaluation. Batch-norm layers use batch statistics while
//! training and running statistics during evaluation or when the backbone is
//! frozen, so a frozen backbone is bitwise inert.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::rng::{self, streams};
use crate::tensor::tape::{Tape, Val};
use crate::tensor::{Element, Tensor};

/// Batch-norm epsilon used by every model in this crate.
pub const BN_EPS: f64 = 1e-5;
/// Batch-norm running-statistics momentum.
pub const BN_MOMENTUM: f64 = 0.1;
/// Negative slope of every discriminator leaky ReLU.
pub const LEAKY_ALPHA: f64 = 0.2;
/// Standard deviation of weight initialization.
pub const INIT_STD: f64 = 0.02;

/// Elementwise activation kinds.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Activation {
    Relu,
    LeakyRelu { alpha: f64 },
    Tanh,
    Sigmoid,
}

/// One layer of a model, hyperparameters only (weights live in the
/// [`ParameterSet`], keyed by the layer's position).
#[derive(Debug, Clone, PartialEq)]
pub enum LayerSpec {
    Conv { in_ch: usize, out_ch: usize, kernel: usize, stride: usize, pad: usize, bias: bool },
    ConvTranspose { in_ch: usize, out_ch: usize, kernel: usize, stride: usize, pad: usize },
    BatchNorm { channels: usize },
    Activation(Activation),
    Pool { kernel: usize, stride: usize, pad: usize },
    Flatten,
    Dense { in_features: usize, out_features: usize },
    /// conv3×3 → BN → relu → conv3×3 → BN, added to the identity input,
    /// then relu. Channel count is preserved so the skip needs no projection.
    ResidualBlock { channels: usize },
    /// 1×1 squeeze conv → relu → parallel 1×1 and 3×3 expand convs → relu →
    /// channel concat. Output channels = 2 × expand_each.
    FireModule { in_ch: usize, squeeze: usize, expand_each: usize },
    /// Four parallel branches — 1×1; 1×1→3×3; 1×1→5×5; 3×3 avg-pool→1×1 —
    /// concatenated on channels. Output channels = b1 + b2 + b3 + b4.
    InceptionBlock { in_ch: usize, b1: usize, b2r: usize, b2: usize, b3r: usize, b3: usize, b4: usize },
}

/// A named, order-stable parameter store. Iteration order (lexicographic by
/// name) is part of the determinism contract: optimizers and checkpoints both
/// walk it in this order.
pub type ParameterSet<E> = BTreeMap<String, Param<E>>;

/// Batch-norm running statistics produced by a training-mode forward pass,
/// keyed by the state tensor's parameter name.
type StatUpdates<E> = Vec<(String, Tensor<E>)>;

/// One named parameter (or non-trainable state tensor) of a model.
#[derive(Debug, Clone, PartialEq)]
pub struct Param<E: Element> {
    pub tensor: Tensor<E>,
    /// False for state such as batch-norm running statistics, which no
    /// optimizer may touch.
    pub trainable: bool,
    /// True while the backbone is frozen; frozen parameters receive no
    /// gradients and no optimizer updates.
    pub frozen: bool,
}

impl<E: Element> Param<E> {
    fn new(tensor: Tensor<E>) -> Self {
        Param { tensor, trainable: true, frozen: false }
    }

    fn state(tensor: Tensor<E>) -> Self {
        Param { tensor, trainable: false, frozen: false }
    }

    /// True when the optimizer should update this parameter.
    pub fn updatable(&self) -> bool {
        self.trainable && !self.frozen
    }
}

/// The four miniature classifier families.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BackboneKind {
    AlexNetMini,
    SqueezeNetMini,
    GoogLeNetMini,
    ResNet18Mini,
}

impl BackboneKind {
    pub const ALL: [BackboneKind; 4] = [
        BackboneKind::AlexNetMini,
        BackboneKind::SqueezeNetMini,
        BackboneKind::GoogLeNetMini,
        BackboneKind::ResNet18Mini,
    ];

    pub fn name(self) -> &'static str {
        match self {
            BackboneKind::AlexNetMini => "alexnet_mini",
            BackboneKind::SqueezeNetMini => "squeezenet_mini",
            BackboneKind::GoogLeNetMini => "googlenet_mini",
            BackboneKind::ResNet18Mini => "resnet18_mini",
        }
    }
}

impl fmt::Display for BackboneKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for BackboneKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        BackboneKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::InvalidHyperparameter(format!("unknown backbone kind `{s}`")))
    }
}

/// What a [`ModelGraph`] is, for persistence and sanity checks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    Generator,
    Discriminator,
    Backbone(BackboneKind),
}

impl ModelKind {
    pub fn code(self) -> u64 {
        match self {
            ModelKind::Generator => 0,
            ModelKind::Discriminator => 1,
            ModelKind::Backbone(BackboneKind::AlexNetMini) => 2,
            ModelKind::Backbone(BackboneKind::SqueezeNetMini) => 3,
            ModelKind::Backbone(BackboneKind::GoogLeNetMini) => 4,
            ModelKind::Backbone(BackboneKind::ResNet18Mini) => 5,
        }
    }

    pub fn from_code(code: u64) -> Option<ModelKind> {
        Some(match code {
            0 => ModelKind::Generator,
            1 => ModelKind::Discriminator,
            2 => ModelKind::Backbone(BackboneKind::AlexNetMini),
            3 => ModelKind::Backbone(BackboneKind::SqueezeNetMini),
            4 => ModelKind::Backbone(BackboneKind::GoogLeNetMini),
            5 => ModelKind::Backbone(BackboneKind::ResNet18Mini),
            _ => return None,
        })
    }
}

/// Build-time metadata needed to reconstruct a model from a checkpoint.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelMeta {
    pub kind: ModelKind,
    /// Latent width for generators; 0 otherwise.
    pub latent_dim: usize,
    /// Channel-ladder base for the GAN pair; 0 for backbones.
    pub base_channels: usize,
    /// Generator output size / discriminator and backbone input size.
    pub image_size: usize,
    /// Classifier output width; 0 for the GAN pair.
    pub num_classes: usize,
}

/// A complete model: layer stack, parameters, and metadata.
#[derive(Debug, Clone)]
pub struct ModelGraph<E: Element> {
    pub meta: ModelMeta,
    pub layers: Vec<LayerSpec>,
    pub params: ParameterSet<E>,
    /// Parameter-name prefix of the fine-tune head, when the model has one.
    pub head_prefix: Option<String>,
}

/// Layer-kind counts of a model, for architecture audits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct LayerAudit {
    pub conv: usize,
    pub conv_transpose: usize,
    pub batchnorm: usize,
    pub relu: usize,
    pub leaky_relu: usize,
    pub tanh: usize,
    pub sigmoid: usize,
}

/// Batch-norm statistic source during a forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum BnMode {
    Batch,
    Running,
}

/// Result of a taped forward pass: the output handle plus the tape handle of
/// every parameter, for gradient harvesting.
pub struct ForwardPass {
    pub output: Val,
    pub param_vals: BTreeMap<String, Val>,
}

impl<E: Element> ModelGraph<E> {
    /// Number of trainable scalar parameters (running statistics excluded).
    pub fn param_count(&self) -> usize {
        self.params.values().filter(|p| p.trainable).map(|p| p.tensor.numel()).sum()
    }

    /// Counts layer kinds across the top-level stack.
    pub fn audit(&self) -> LayerAudit {
        let mut a = LayerAudit::default();
        for layer in &self.layers {
            match layer {
                LayerSpec::Conv { .. } => a.conv += 1,
                LayerSpec::ConvTranspose { .. } => a.conv_transpose += 1,
                LayerSpec::BatchNorm { .. } => a.batchnorm += 1,
                LayerSpec::Activation(Activation::Relu) => a.relu += 1,
                LayerSpec::Activation(Activation::LeakyRelu { .. }) => a.leaky_relu += 1,
                LayerSpec::Activation(Activation::Tanh) => a.tanh += 1,
                LayerSpec::Activation(Activation::Sigmoid) => a.sigmoid += 1,
                _ => {}
            }
        }
        a
    }

    /// True when every conv-family layer uses a `k × k` kernel.
    pub fn all_kernels_are(&self, k: usize) -> bool {
        self.layers.iter().all(|l| match l {
            LayerSpec::Conv { kernel, .. } | LayerSpec::ConvTranspose { kernel, .. } => *kernel == k,
            _ => true,
        })
    }

    /// True when this model's backbone is currently frozen.
    pub fn backbone_frozen(&self) -> bool {
        self.params.values().any(|p| p.frozen)
    }

    /// True for a parameter belonging to the fine-tune head.
    pub fn is_head_param(&self, name: &str) -> bool {
        self.head_prefix.as_deref().is_some_and(|prefix| name.starts_with(prefix))
    }

    /// SHA-256 over names, shapes, and little-endian payloads of every
    /// parameter, in name order. Bitwise-identical models agree.
    pub fn checksum(&self) -> String {
        params_checksum(&self.params)
    }

    /// Training-mode forward on a tape. Batch-norm layers use batch
    /// statistics and fold them into the running estimates (unless the
    /// backbone is frozen, which pins them). `with_grads` controls whether
    /// this model's parameters request gradients — pass `false` when the
    /// model only participates in another model's update (e.g. the
    /// discriminator during a generator step).
    pub fn forward_train(
        &mut self,
        tape: &mut Tape<E>,
        input: Val,
        with_grads: bool,
    ) -> Result<ForwardPass> {
        let bn_mode = if self.backbone_frozen() { BnMode::Running } else { BnMode::Batch };
        let mut param_vals = BTreeMap::new();
        for (name, p) in &self.params {
            let mut t = p.tensor.clone();
            t.set_requires_grad(with_grads && p.updatable());
            param_vals.insert(name.clone(), tape.leaf(t));
        }
        let (output, stat_updates) = self.run_layers(tape, &param_vals, input, bn_mode)?;
        for (name, tensor) in stat_updates {
            self.params.get_mut(&name).expect("stat name derives from this model").tensor = tensor;
        }
        Ok(ForwardPass { output, param_vals })
    }

    /// Pure evaluation forward: running statistics, no gradients, no
    /// parameter mutation.
    pub fn forward_eval(&self, input: &Tensor<E>) -> Result<Tensor<E>> {
        let mut tape = Tape::new();
        let mut param_vals = BTreeMap::new();
        for (name, p) in &self.params {
            param_vals.insert(name.clone(), tape.constant(p.tensor.clone()));
        }
        let input = tape.constant(input.clone());
        let (output, _) = self.run_layers(&mut tape, &param_vals, input, BnMode::Running)?;
        Ok(tape.value(output)?.clone())
    }

    /// Class predictions (argmax over logits) for a batch of images.
    pub fn predict(&self, images: &Tensor<E>) -> Result<Vec<u8>> {
        let logits = self.forward_eval(images)?;
        let (n, k) = (logits.shape()[0], logits.shape()[1]);
        let data = logits.data();
        Ok((0..n)
            .map(|i| {
                let row = &data[i * k..(i + 1) * k];
                let mut best = 0usize;
                for j in 1..k {
                    if row[j] > row[best] {
                        best = j;
                    }
                }
                best as u8
            })
            .collect())
    }

    fn param_val(&self, vals: &BTreeMap<String, Val>, name: &str) -> Val {
        *vals.get(name).unwrap_or_else(|| panic!("parameter `{name}` missing from model"))
    }

    /// Executes the layer stack. Returns the output handle and the updated
    /// running statistics that training mode produced (empty in eval mode).
    fn run_layers(
        &self,
        tape: &mut Tape<E>,
        vals: &BTreeMap<String, Val>,
        input: Val,
        bn_mode: BnMode,
    ) -> Result<(Val, StatUpdates<E>)> {
        // Generators accept rank-2 noise and view it as [N, latent, 1, 1].
        let mut x = input;
        if self.meta.kind == ModelKind::Generator {
            let shape = tape.value(x)?.shape().to_vec();
            if let [n, d] = shape[..] {
                if d != self.meta.latent_dim {
                    return Err(Error::ShapeMismatch {
                        op: "generator_forward",
                        detail: format!("noise width {d}, expected {}", self.meta.latent_dim),
                    });
                }
                x = tape.reshape(x, &[n, d, 1, 1])?;
            }
        }

        let mut stat_updates = Vec::new();
        for (idx, layer) in self.layers.iter().enumerate() {
            let p = |rest: &str| format!("l{idx:02}.{rest}");
            x = match layer {
                LayerSpec::Conv { stride, pad, bias, .. } => {
                    let w = self.param_val(vals, &p("weight"));
                    let b = bias.then(|| self.param_val(vals, &p("bias")));
                    tape.conv2d(x, w, b, *stride, *pad)?
                }
                LayerSpec::ConvTranspose { stride, pad, .. } => {
                    let w = self.param_val(vals, &p("weight"));
                    tape.conv_transpose2d(x, w, None, *stride, *pad)?
                }
                LayerSpec::BatchNorm { .. } => {
                    self.run_batchnorm(tape, vals, x, &p(""), bn_mode, &mut stat_updates)?
                }
                LayerSpec::Activation(act) => run_activation(tape, x, *act)?,
                LayerSpec::Pool { kernel, stride, pad } => {
                    tape.avg_pool2d(x, *kernel, *stride, *pad)?
                }
                LayerSpec::Flatten => {
                    let shape = tape.value(x)?.shape().to_vec();
                    let n = shape[0];
                    let rest: usize = shape[1..].iter().product();
                    tape.reshape(x, &[n, rest])?
                }
                LayerSpec::Dense { .. } => {
                    let w = self.param_val(vals, &p("weight"));
                    let b = self.param_val(vals, &p("bias"));
                    let y = tape.matmul(x, w)?;
                    tape.bias_add_rows(y, b)?
                }
                LayerSpec::ResidualBlock { .. } => {
                    let identity = x;
                    let w1 = self.param_val(vals, &p("conv1.weight"));
                    let mut h = tape.conv2d(x, w1, None, 1, 1)?;
                    h = self.run_batchnorm(tape, vals, h, &p("bn1."), bn_mode, &mut stat_updates)?;
                    h = tape.relu(h)?;
                    let w2 = self.param_val(vals, &p("conv2.weight"));
                    h = tape.conv2d(h, w2, None, 1, 1)?;
                    h = self.run_batchnorm(tape, vals, h, &p("bn2."), bn_mode, &mut stat_updates)?;
                    let sum = tape.add(identity, h)?;
                    tape.relu(sum)?
                }
                LayerSpec::FireModule { .. } => {
                    let ws = self.param_val(vals, &p("squeeze.weight"));
                    let bs = self.param_val(vals, &p("squeeze.bias"));
                    let s = tape.conv2d(x, ws, Some(bs), 1, 0)?;
                    let s = tape.relu(s)?;
                    let w1 = self.param_val(vals, &p("expand1.weight"));
                    let b1 = self.param_val(vals, &p("expand1.bias"));
                    let e1 = tape.conv2d(s, w1, Some(b1), 1, 0)?;
                    let e1 = tape.relu(e1)?;
                    let w3 = self.param_val(vals, &p("expand3.weight"));
                    let b3 = self.param_val(vals, &p("expand3.bias"));
                    let e3 = tape.conv2d(s, w3, Some(b3), 1, 1)?;
                    let e3 = tape.relu(e3)?;
                    tape.concat_channels(&[e1, e3])?
                }
                LayerSpec::InceptionBlock { .. } => {
                    let conv_relu = |tape: &mut Tape<E>, x, name: &str, pad| -> Result<Val> {
                        let w = self.param_val(vals, &p(&format!("{name}.weight")));
                        let b = self.param_val(vals, &p(&format!("{name}.bias")));
                        let y = tape.conv2d(x, w, Some(b), 1, pad)?;
                        tape.relu(y)
                    };
                    let br1 = conv_relu(tape, x, "b1", 0)?;
                    let r2 = conv_relu(tape, x, "b2r", 0)?;
                    let br2 = conv_relu(tape, r2, "b2", 1)?;
                    let r3 = conv_relu(tape, x, "b3r", 0)?;
                    let br3 = conv_relu(tape, r3, "b3", 2)?;
                    let pooled = tape.avg_pool2d(x, 3, 1, 1)?;
                    let br4 = conv_relu(tape, pooled, "b4", 0)?;
                    tape.concat_channels(&[br1, br2, br3, br4])?
                }
            };
        }
        Ok((x, stat_updates))
    }

    fn run_batchnorm(
        &self,
        tape: &mut Tape<E>,
        vals: &BTreeMap<String, Val>,
        x: Val,
        prefix: &str,
        bn_mode: BnMode,
        stat_updates: &mut StatUpdates<E>,
    ) -> Result<Val> {
        let gamma = self.param_val(vals, &format!("{prefix}gamma"));
        let beta = self.param_val(vals, &format!("{prefix}beta"));
        let rm_name = format!("{prefix}running_mean");
        let rv_name = format!("{prefix}running_var");
        let rm = &self.params[&rm_name].tensor;
        let rv = &self.params[&rv_name].tensor;
        match bn_mode {
            BnMode::Batch => {
                let (y, new_rm, new_rv) =
                    tape.batchnorm2d_train(x, gamma, beta, rm, rv, BN_EPS, BN_MOMENTUM)?;
                stat_updates.push((rm_name, new_rm));
                stat_updates.push((rv_name, new_rv));
                Ok(y)
            }
            BnMode::Running => tape.batchnorm2d_eval(x, gamma, beta, rm, rv, BN_EPS),
        }
    }
}

fn run_activation<E: Element>(tape: &mut Tape<E>, x: Val, act: Activation) -> Result<Val> {
    match act {
        Activation::Relu => tape.relu(x),
        Activation::LeakyRelu { alpha } => tape.leaky_relu(x, alpha),
        Activation::Tanh => tape.tanh(x),
        Activation::Sigmoid => tape.sigmoid(x),
    }
}

/// SHA-256 hex digest over a parameter set: names, shapes, and little-endian
/// payloads in name order.
pub fn params_checksum<E: Element>(params: &ParameterSet<E>) -> String {
    let mut hasher = Sha256::new();
    for (name, p) in params {
        hasher.update(name.as_bytes());
        hasher.update([0u8]);
        for &d in p.tensor.shape() {
            hasher.update((d as u64).to_le_bytes());
        }
        let mut payload = Vec::with_capacity(p.tensor.numel() * 8);
        for &v in p.tensor.data() {
            v.write_le(&mut payload);
        }
        hasher.update(&payload);
    }
    let digest = hasher.finalize();
    let mut out = String::with_capacity(64);
    for byte in digest {
        out.push_str(&format!("{byte:02x}"));
    }
    out
}

// ---- builders ---------------------------------------------------------------

/// Accumulates parameters with deterministic Gaussian initialization.
struct ParamBuilder<E: Element> {
    rng: rand_chacha::ChaCha8Rng,
    params: ParameterSet<E>,
}

impl<E: Element> ParamBuilder<E> {
    fn new(seed: u64) -> Self {
        ParamBuilder { rng: rng::seeded_stream(seed, streams::INIT), params: BTreeMap::new() }
    }

    fn weight(&mut self, name: String, shape: &[usize]) {
        let t = rng::normal_tensor(&mut self.rng, shape, 0.0, INIT_STD);
        self.params.insert(name, Param::new(t));
    }

    fn zero_bias(&mut self, name: String, width: usize) {
        self.params.insert(name, Param::new(Tensor::zeros(&[width])));
    }

    fn batchnorm(&mut self, prefix: String, channels: usize) {
        let gamma = rng::normal_tensor(&mut self.rng, &[channels], 1.0, INIT_STD);
        self.params.insert(format!("{prefix}gamma"), Param::new(gamma));
        self.params.insert(format!("{prefix}beta"), Param::new(Tensor::zeros(&[channels])));
        self.params
            .insert(format!("{prefix}running_mean"), Param::state(Tensor::zeros(&[channels])));
        self.params
            .insert(format!("{prefix}running_var"), Param::state(Tensor::ones(&[channels])));
    }

    /// Registers the parameters a layer at `idx` needs.
    fn register(&mut self, idx: usize, layer: &LayerSpec) {
        let p = |rest: &str| format!("l{idx:02}.{rest}");
        match layer {
            LayerSpec::Conv { in_ch, out_ch, kernel, bias, .. } => {
                self.weight(p("weight"), &[*out_ch, *in_ch, *kernel, *kernel]);
                if *bias {
                    self.zero_bias(p("bias"), *out_ch);
                }
            }
            LayerSpec::ConvTranspose { in_ch, out_ch, kernel, .. } => {
                self.weight(p("weight"), &[*in_ch, *out_ch, *kernel, *kernel]);
            }
            LayerSpec::BatchNorm { channels } => self.batchnorm(p(""), *channels),
            LayerSpec::Dense { in_features, out_features } => {
                self.weight(p("weight"), &[*in_features, *out_features]);
                self.zero_bias(p("bias"), *out_features);
            }
            LayerSpec::ResidualBlock { channels } => {
                let c = *channels;
                self.weight(p("conv1.weight"), &[c, c, 3, 3]);
                self.batchnorm(p("bn1."), c);
                self.weight(p("conv2.weight"), &[c, c, 3, 3]);
                self.batchnorm(p("bn2."), c);
            }
            LayerSpec::FireModule { in_ch, squeeze, expand_each } => {
                self.weight(p("squeeze.weight"), &[*squeeze, *in_ch, 1, 1]);
                self.zero_bias(p("squeeze.bias"), *squeeze);
                self.weight(p("expand1.weight"), &[*expand_each, *squeeze, 1, 1]);
                self.zero_bias(p("expand1.bias"), *expand_each);
                self.weight(p("expand3.weight"), &[*expand_each, *squeeze, 3, 3]);
                self.zero_bias(p("expand3.bias"), *expand_each);
            }
            LayerSpec::InceptionBlock { in_ch, b1, b2r, b2, b3r, b3, b4 } => {
                for (name, out, inp, k) in [
                    ("b1", *b1, *in_ch, 1usize),
                    ("b2r", *b2r, *in_ch, 1),
                    ("b2", *b2, *b2r, 3),
                    ("b3r", *b3r, *in_ch, 1),
                    ("b3", *b3, *b3r, 5),
                    ("b4", *b4, *in_ch, 1),
                ] {
                    self.weight(p(&format!("{name}.weight")), &[out, inp, k, k]);
                    self.zero_bias(p(&format!("{name}.bias")), out);
                }
            }
            LayerSpec::Activation(_) | LayerSpec::Pool { .. } | LayerSpec::Flatten => {}
        }
    }
}

fn build_params<E: Element>(layers: &[LayerSpec], seed: u64) -> ParameterSet<E> {
    let mut pb = ParamBuilder::new(seed);
    for (idx, layer) in layers.iter().enumerate() {
        pb.register(idx, layer);
    }
    pb.params
}

/// Image sizes reachable by the power-of-two ladders.
const LADDER_SIZES: [usize; 4] = [8, 16, 32, 64];

fn ladder_stages(op: &'static str, size: usize) -> Result<usize> {
    if !LADDER_SIZES.contains(&size) {
        return Err(Error::InvalidHyperparameter(format!(
            "{op}: image size must be one of {LADDER_SIZES:?}, got {size}"
        )));
    }
    // Number of ×2 steps between the 4×4 stem and the full size.
    Ok((size / 4).trailing_zeros() as usize)
}

/// Builds the generator: a transposed-convolution ladder from latent noise to
/// a 1-channel `out_size × out_size` image in [−1, 1]. At `out_size` 64 the
/// stack is exactly 5 tconv / 4 batch-norm / 4 relu / 1 tanh, all kernels 4×4.
pub fn build_generator<E: Element>(
    latent_dim: usize,
    base_channels: usize,
    out_size: usize,
    seed: u64,
) -> Result<ModelGraph<E>> {
    if latent_dim < 1 || base_channels < 1 {
        return Err(Error::InvalidHyperparameter(
            "generator: latent_dim and base_channels must be ≥ 1".into(),
        ));
    }
    let doublings = ladder_stages("generator", out_size)?;
    let mut layers = Vec::new();
    // Widest at the 4×4 stem, halving every upsampling step.
    let mut ch = base_channels << (doublings - 1).min(63);
    layers.push(LayerSpec::ConvTranspose { in_ch: latent_dim, out_ch: ch, kernel: 4, stride: 1, pad: 0 });
    layers.push(LayerSpec::BatchNorm { channels: ch });
    layers.push(LayerSpec::Activation(Activation::Relu));
    for _ in 0..doublings - 1 {
        let next = ch / 2;
        layers.push(LayerSpec::ConvTranspose { in_ch: ch, out_ch: next, kernel: 4, stride: 2, pad: 1 });
        layers.push(LayerSpec::BatchNorm { channels: next });
        layers.push(LayerSpec::Activation(Activation::Relu));
        ch = next;
    }
    layers.push(LayerSpec::ConvTranspose { in_ch: ch, out_ch: 1, kernel: 4, stride: 2, pad: 1 });
    layers.push(LayerSpec::Activation(Activation::Tanh));

    let params = build_params(&layers, seed);
    Ok(ModelGraph {
        meta: ModelMeta {
            kind: ModelKind::Generator,
            latent_dim,
            base_channels,
            image_size: out_size,
            num_classes: 0,
        },
        layers,
        params,
        head_prefix: None,
    })
}

/// Builds the discriminator: a convolution ladder from a 1-channel image to a
/// single probability in (0, 1). At `in_size` 64 the stack is exactly 5 conv /
/// 3 batch-norm / 4 leaky-relu, all kernels 4×4, with no batch-norm on the
/// input or output stages.
pub fn build_discriminator<E: Element>(
    in_size: usize,
    base_channels: usize,
    seed: u64,
) -> Result<ModelGraph<E>> {
    if base_channels < 1 {
        return Err(Error::InvalidHyperparameter("discriminator: base_channels must be ≥ 1".into()));
    }
    let halvings = ladder_stages("discriminator", in_size)?;
    let leaky = LayerSpec::Activation(Activation::LeakyRelu { alpha: LEAKY_ALPHA });
    let mut layers = Vec::new();
    let mut ch = base_channels;
    layers.push(LayerSpec::Conv { in_ch: 1, out_ch: ch, kernel: 4, stride: 2, pad: 1, bias: false });
    layers.push(leaky.clone());
    for _ in 0..halvings - 1 {
        let next = ch * 2;
        layers.push(LayerSpec::Conv { in_ch: ch, out_ch: next, kernel: 4, stride: 2, pad: 1, bias: false });
        layers.push(LayerSpec::BatchNorm { channels: next });
        layers.push(leaky.clone());
        ch = next;
    }
    layers.push(LayerSpec::Conv { in_ch: ch, out_ch: 1, kernel: 4, stride: 1, pad: 0, bias: false });
    layers.push(LayerSpec::Activation(Activation::Sigmoid));
    layers.push(LayerSpec::Flatten);

    let params = build_params(&layers, seed);
    Ok(ModelGraph {
        meta: ModelMeta {
            kind: ModelKind::Discriminator,
            latent_dim: 0,
            base_channels,
            image_size: in_size,
            num_classes: 0,
        },
        layers,
        params,
        head_prefix: None,
    })
}

/// Sizes accepted by [`build_backbone`].
const BACKBONE_SIZES: [usize; 3] = [16, 32, 64];

/// Builds one of the four miniature classifier backbones plus its two-class
/// fine-tune head (a single dense layer, always the last layer of the stack).
///
/// Inputs larger than 16 are average-pooled down first, so every family's
/// body is identical across input sizes.
pub fn build_backbone<E: Element>(
    kind: BackboneKind,
    in_size: usize,
    num_classes: usize,
    seed: u64,
) -> Result<ModelGraph<E>> {
    if !BACKBONE_SIZES.contains(&in_size) {
        return Err(Error::InvalidHyperparameter(format!(
            "backbone: input size must be one of {BACKBONE_SIZES:?}, got {in_size}"
        )));
    }
    if num_classes < 2 {
        return Err(Error::InvalidHyperparameter(format!(
            "backbone: need at least 2 classes, got {num_classes}"
        )));
    }

    let mut layers = Vec::new();
    // Reduce any larger input to the 16×16 reference scale.
    let mut size = in_size;
    while size > 16 {
        layers.push(LayerSpec::Pool { kernel: 2, stride: 2, pad: 0 });
        size /= 2;
    }
    let relu = LayerSpec::Activation(Activation::Relu);
    let pool2 = LayerSpec::Pool { kernel: 2, stride: 2, pad: 0 };

    // Each body takes a 1×16×16 image to a flat feature vector; the match
    // value is that vector's width.
    let feature_width = match kind {
        BackboneKind::AlexNetMini => {
            // The plain recipe: stacked conv + relu + pool, then dense layers.
            layers.push(LayerSpec::Conv { in_ch: 1, out_ch: 16, kernel: 3, stride: 1, pad: 1, bias: true });
            layers.push(relu.clone());
            layers.push(pool2.clone()); // 16 → 8
            layers.push(LayerSpec::Conv { in_ch: 16, out_ch: 32, kernel: 3, stride: 1, pad: 1, bias: true });
            layers.push(relu.clone());
            layers.push(pool2.clone()); // 8 → 4
            layers.push(LayerSpec::Flatten);
            layers.push(LayerSpec::Dense { in_features: 32 * 4 * 4, out_features: 64 });
            layers.push(relu.clone());
            64
        }
        BackboneKind::SqueezeNetMini => {
            // Fire modules: a narrow 1×1 squeeze feeding parallel 1×1/3×3
            // expands, keeping the parameter count low.
            layers.push(LayerSpec::Conv { in_ch: 1, out_ch: 16, kernel: 3, stride: 1, pad: 1, bias: true });
            layers.push(relu.clone());
            layers.push(pool2.clone()); // 16 → 8
            layers.push(LayerSpec::FireModule { in_ch: 16, squeeze: 4, expand_each: 8 }); // out 16
            layers.push(pool2.clone()); // 8 → 4
            layers.push(LayerSpec::FireModule { in_ch: 16, squeeze: 8, expand_each: 16 }); // out 32
            layers.push(LayerSpec::Pool { kernel: 4, stride: 1, pad: 0 }); // global 4 → 1
            layers.push(LayerSpec::Flatten);
            32
        }
        BackboneKind::GoogLeNetMini => {
            // Inception blocks: parallel 1×1 / 3×3 / 5×5 / pooled branches
            // concatenated on channels.
            layers.push(LayerSpec::Conv { in_ch: 1, out_ch: 16, kernel: 3, stride: 1, pad: 1, bias: true });
            layers.push(relu.clone());
            layers.push(pool2.clone()); // 16 → 8
            layers.push(LayerSpec::InceptionBlock {
                in_ch: 16, b1: 8, b2r: 8, b2: 16, b3r: 4, b3: 8, b4: 8,
            }); // out 40
            layers.push(pool2.clone()); // 8 → 4
            layers.push(LayerSpec::InceptionBlock {
                in_ch: 40, b1: 12, b2r: 12, b2: 24, b3r: 6, b3: 12, b4: 12,
            }); // out 60
            layers.push(LayerSpec::Pool { kernel: 4, stride: 1, pad: 0 }); // global 4 → 1
            layers.push(LayerSpec::Flatten);
            60
        }
        BackboneKind::ResNet18Mini => {
            // Identity-skip residual blocks; channel growth happens between
            // blocks so skips never need projections.
            layers.push(LayerSpec::Conv { in_ch: 1, out_ch: 16, kernel: 3, stride: 1, pad: 1, bias: false });
            layers.push(LayerSpec::BatchNorm { channels: 16 });
            layers.push(relu.clone());
            layers.push(LayerSpec::ResidualBlock { channels: 16 });
            layers.push(pool2.clone()); // 16 → 8
            layers.push(LayerSpec::Conv { in_ch: 16, out_ch: 32, kernel: 3, stride: 1, pad: 1, bias: false });
            layers.push(LayerSpec::BatchNorm { channels: 32 });
            layers.push(relu.clone());
            layers.push(LayerSpec::ResidualBlock { channels: 32 });
            layers.push(pool2.clone()); // 8 → 4
            layers.push(LayerSpec::Pool { kernel: 4, stride: 1, pad: 0 }); // global 4 → 1
            layers.push(LayerSpec::Flatten);
            32
        }
    };

    let head_idx = layers.len();
    layers.push(LayerSpec::Dense { in_features: feature_width, out_features: num_classes });
    let head_prefix = format!("l{head_idx:02}.");

    let params = build_params(&layers, seed);
    Ok(ModelGraph {
        meta: ModelMeta {
            kind: ModelKind::Backbone(kind),
            latent_dim: 0,
            base_channels: 0,
            image_size: in_size,
            num_classes,
        },
        layers,
        params,
        head_prefix: Some(head_prefix),
    })
}

/// Freezes (or unfreezes) every parameter outside the fine-tune head. Frozen
/// parameters receive no gradients, no optimizer updates, and their
/// batch-norm layers switch to running statistics, so the backbone stays
/// bitwise unchanged under training.
pub fn freeze_backbone<E: Element>(model: &mut ModelGraph<E>, frozen: bool) -> Result<()> {
    let prefix = model.head_prefix.clone().ok_or(Error::NoHead)?;
    for (name, p) in model.params.iter_mut() {
        if !name.starts_with(&prefix) {
            p.frozen = frozen;
        }
    }
    Ok(())
}

/// Rebuilds a model skeleton from persisted metadata; parameter values are
/// expected to be overwritten by the caller (checkpoint loading).
pub fn rebuild_from_meta<E: Element>(meta: ModelMeta) -> Result<ModelGraph<E>> {
    match meta.kind {
        ModelKind::Generator => {
            build_generator(meta.latent_dim, meta.base_channels, meta.image_size, 0)
        }
        ModelKind::Discriminator => build_discriminator(meta.image_size, meta.base_channels, 0),
        ModelKind::Backbone(kind) => build_backbone(kind, meta.image_size, meta.num_classes, 0),
    }
}
