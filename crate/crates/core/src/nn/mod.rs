//! Layer stacks, model construction and the forward pass.
//!
//! A [`Model`] is a flat sequence of layers. Conv and linear layers own a
//! weight and a bias; only the weight is prunable. Each forward pass is told
//! per prunable slot how its weight enters the tape (see [`SlotMode`]), which
//! is how the same model serves dense training, score search, masked
//! fine-tuning and evaluation.

pub mod optim;
pub mod train;

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::{BatchStats, SteRule, Tape, Var};
use crate::error::{Error, Result};
use crate::masking::BinaryMask;
use crate::tensor::{Scalar, Tensor};

pub use optim::{cosine_lr, Schedule, Sgd, SgdConfig};
pub use train::{pretrain, EpochStats, TrainedCheckpoint};

const MLP_DEFAULT_HIDDEN: usize = 100;
const BN_EPS: f64 = 1e-5;
const BN_MOMENTUM: f64 = 0.1;

/// Desk-scale architectures.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Arch {
    /// Two 5×5 convs with max-pooling and three linear layers.
    Lenet,
    /// Four 3×3 conv + batch-norm blocks and two linear layers.
    Conv4,
    /// One hidden layer of the given width.
    Mlp { hidden: usize },
}

impl fmt::Display for Arch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Arch::Lenet => f.write_str("lenet"),
            Arch::Conv4 => f.write_str("conv4"),
            Arch::Mlp { hidden } => write!(f, "mlp:{}", hidden),
        }
    }
}

impl FromStr for Arch {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lenet" => Ok(Arch::Lenet),
            "conv4" => Ok(Arch::Conv4),
            "mlp" => Ok(Arch::Mlp { hidden: MLP_DEFAULT_HIDDEN }),
            other => match other.strip_prefix("mlp:").map(str::parse::<usize>) {
                Some(Ok(hidden)) if hidden > 0 => Ok(Arch::Mlp { hidden }),
                _ => Err(Error::Config(format!("unknown architecture '{}'", s))),
            },
        }
    }
}

/// Architecture description; input extents are inferred while building.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerSpec {
    Conv { out_channels: usize, kernel: usize, stride: usize, padding: usize },
    Linear { out_features: usize },
    Relu,
    MaxPool { kernel: usize, stride: usize },
    BatchNorm,
    Flatten,
}

impl Arch {
    pub fn layer_specs(self, num_classes: usize) -> Vec<LayerSpec> {
        use LayerSpec::*;
        let conv = |c, k, p| Conv { out_channels: c, kernel: k, stride: 1, padding: p };
        match self {
            Arch::Lenet => vec![
                conv(6, 5, 0),
                Relu,
                MaxPool { kernel: 2, stride: 2 },
                conv(16, 5, 0),
                Relu,
                MaxPool { kernel: 2, stride: 2 },
                Flatten,
                Linear { out_features: 120 },
                Relu,
                Linear { out_features: 84 },
                Relu,
                Linear { out_features: num_classes },
            ],
            Arch::Conv4 => vec![
                conv(32, 3, 1),
                BatchNorm,
                Relu,
                conv(32, 3, 1),
                BatchNorm,
                Relu,
                MaxPool { kernel: 2, stride: 2 },
                conv(64, 3, 1),
                BatchNorm,
                Relu,
                conv(64, 3, 1),
                BatchNorm,
                Relu,
                MaxPool { kernel: 2, stride: 2 },
                Flatten,
                Linear { out_features: 256 },
                Relu,
                Linear { out_features: num_classes },
            ],
            Arch::Mlp { hidden } => vec![
                Flatten,
                Linear { out_features: hidden },
                Relu,
                Linear { out_features: num_classes },
            ],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer<F> {
    Conv { weight: Tensor<F>, bias: Tensor<F>, stride: usize, padding: usize },
    Linear { weight: Tensor<F>, bias: Tensor<F> },
    Relu,
    MaxPool { kernel: usize, stride: usize },
    BatchNorm { gamma: Tensor<F>, beta: Tensor<F>, running_mean: Tensor<F>, running_var: Tensor<F> },
    Flatten,
}

impl<F: Scalar> Layer<F> {
    pub fn kind(&self) -> &'static str {
        match self {
            Layer::Conv { .. } => "conv",
            Layer::Linear { .. } => "linear",
            Layer::Relu => "relu",
            Layer::MaxPool { .. } => "maxpool",
            Layer::BatchNorm { .. } => "batchnorm",
            Layer::Flatten => "flatten",
        }
    }

    pub fn prunable_weight(&self) -> Option<&Tensor<F>> {
        match self {
            Layer::Conv { weight, .. } | Layer::Linear { weight, .. } => Some(weight),
            _ => None,
        }
    }
}

/// Which tensor of a layer a gradient belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ParamKind {
    Weight,
    Bias,
    Gamma,
    Beta,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamKey {
    pub layer: usize,
    pub kind: ParamKind,
}

/// How one prunable weight enters a forward pass.
#[derive(Debug, Clone, Copy)]
pub enum SlotMode<'a, F> {
    /// Plain weight; `train` requests its gradient.
    Dense { train: bool },
    /// `mask ⊙ w`; with `train` the surviving entries get gradients.
    Masked { mask: &'a BinaryMask, train: bool },
    /// `h(scores) ⊙ w` with frozen `w` and a straight-through gradient on the scores.
    Scored { scores: &'a Tensor<F>, mask: &'a BinaryMask, rule: SteRule },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnMode {
    /// Normalise with batch statistics and report them.
    Train,
    /// Normalise with the frozen running statistics.
    Eval,
}

#[derive(Debug, Clone)]
pub struct ForwardCtx<'a, F> {
    /// One entry per prunable slot, in layer order.
    pub slots: Vec<SlotMode<'a, F>>,
    /// Whether biases and batch-norm affine parameters get gradients.
    pub train_aux: bool,
    pub bn: BnMode,
}

impl<'a, F: Scalar> ForwardCtx<'a, F> {
    pub fn eval(model: &Model<F>) -> Self {
        ForwardCtx {
            slots: vec![SlotMode::Dense { train: false }; model.num_prunable()],
            train_aux: false,
            bn: BnMode::Eval,
        }
    }

    pub fn eval_masked(masks: &'a [BinaryMask]) -> Self {
        ForwardCtx {
            slots: masks.iter().map(|mask| SlotMode::Masked { mask, train: false }).collect(),
            train_aux: false,
            bn: BnMode::Eval,
        }
    }

    pub fn train_dense(model: &Model<F>) -> Self {
        ForwardCtx {
            slots: vec![SlotMode::Dense { train: true }; model.num_prunable()],
            train_aux: true,
            bn: BnMode::Train,
        }
    }

    /// Weight-only training under fixed masks; biases and BN train too.
    pub fn finetune(masks: &'a [BinaryMask]) -> Self {
        ForwardCtx {
            slots: masks.iter().map(|mask| SlotMode::Masked { mask, train: true }).collect(),
            train_aux: true,
            bn: BnMode::Train,
        }
    }

    /// Score search: everything frozen except the scores; BN uses its frozen statistics.
    pub fn search(scores: &'a [Tensor<F>], masks: &'a [BinaryMask], rule: SteRule) -> Self {
        ForwardCtx {
            slots: scores
                .iter()
                .zip(masks)
                .map(|(scores, mask)| SlotMode::Scored { scores, mask, rule })
                .collect(),
            train_aux: false,
            bn: BnMode::Eval,
        }
    }
}

pub struct ForwardOut<F> {
    pub logits: Var,
    /// Tape handles of every parameter leaf that requested a gradient.
    pub params: Vec<(ParamKey, Var)>,
    /// Score leaves, one per `Scored` slot in slot order.
    pub scores: Vec<Var>,
    pub bn_stats: Vec<(usize, BatchStats<F>)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model<F> {
    pub arch: Arch,
    /// Per-sample input extents, e.g. `[1, 28, 28]`.
    pub input_shape: Vec<usize>,
    pub num_classes: usize,
    pub layers: Vec<Layer<F>>,
}

/// He-uniform initialisation: `U(−b, b)` with `b = sqrt(6 / fan_in)`.
fn kaiming_uniform<F: Scalar>(shape: &[usize], fan_in: usize, rng: &mut ChaCha8Rng) -> Tensor<F> {
    let bound = (6.0 / fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| F::from_f64_lossy(rng.gen_range(-bound..bound))).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches element count")
}

pub fn build_model<F: Scalar>(arch: Arch, input_shape: &[usize], num_classes: usize, seed: u64) -> Result<Model<F>> {
    Model::from_specs(arch, &arch.layer_specs(num_classes), input_shape, num_classes, seed)
}

impl<F: Scalar> Model<F> {
    pub fn from_specs(arch: Arch, specs: &[LayerSpec], input_shape: &[usize], num_classes: usize, seed: u64) -> Result<Self> {
        if num_classes < 2 {
            return Err(Error::Config(format!("need at least 2 classes, got {}", num_classes)));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut shape = input_shape.to_vec();
        let mut layers = Vec::with_capacity(specs.len());
        let shape_err = |spec: &LayerSpec, shape: &[usize]| {
            Error::Config(format!("layer {:?} does not accept per-sample shape {:?}", spec, shape))
        };
        for spec in specs {
            let layer = match *spec {
                LayerSpec::Conv { out_channels, kernel, stride, padding } => {
                    let [c, h, w] = shape[..] else { return Err(shape_err(spec, &shape)) };
                    if kernel > h + 2 * padding || kernel > w + 2 * padding || stride == 0 {
                        return Err(shape_err(spec, &shape));
                    }
                    let weight = kaiming_uniform(&[out_channels, c, kernel, kernel], c * kernel * kernel, &mut rng);
                    shape = vec![out_channels, (h + 2 * padding - kernel) / stride + 1, (w + 2 * padding - kernel) / stride + 1];
                    Layer::Conv { weight, bias: Tensor::zeros(&[out_channels]), stride, padding }
                }
                LayerSpec::Linear { out_features } => {
                    let [fan_in] = shape[..] else { return Err(shape_err(spec, &shape)) };
                    let weight = kaiming_uniform(&[out_features, fan_in], fan_in, &mut rng);
                    shape = vec![out_features];
                    Layer::Linear { weight, bias: Tensor::zeros(&[out_features]) }
                }
                LayerSpec::Relu => Layer::Relu,
                LayerSpec::MaxPool { kernel, stride } => {
                    let [c, h, w] = shape[..] else { return Err(shape_err(spec, &shape)) };
                    if kernel == 0 || stride == 0 || kernel > h || kernel > w {
                        return Err(shape_err(spec, &shape));
                    }
                    shape = vec![c, (h - kernel) / stride + 1, (w - kernel) / stride + 1];
                    Layer::MaxPool { kernel, stride }
                }
                LayerSpec::BatchNorm => {
                    if shape.is_empty() {
                        return Err(shape_err(spec, &shape));
                    }
                    let c = shape[0];
                    Layer::BatchNorm {
                        gamma: Tensor::full(&[c], F::one()),
                        beta: Tensor::zeros(&[c]),
                        running_mean: Tensor::zeros(&[c]),
                        running_var: Tensor::full(&[c], F::one()),
                    }
                }
                LayerSpec::Flatten => {
                    shape = vec![shape.iter().product()];
                    Layer::Flatten
                }
            };
            layers.push(layer);
        }
        if shape != [num_classes] {
            return Err(Error::Config(format!("model emits {:?}, expected [{}]", shape, num_classes)));
        }
        Ok(Model { arch, input_shape: input_shape.to_vec(), num_classes, layers })
    }

    /// Layer indices of the conv/linear layers, in order.
    pub fn prunable_layers(&self) -> Vec<usize> {
        (0..self.layers.len()).filter(|&i| self.layers[i].prunable_weight().is_some()).collect()
    }

    pub fn num_prunable(&self) -> usize {
        self.layers.iter().filter(|l| l.prunable_weight().is_some()).count()
    }

    pub fn prunable_weights(&self) -> Vec<&Tensor<F>> {
        self.layers.iter().filter_map(Layer::prunable_weight).collect()
    }

    pub fn prunable_weights_mut(&mut self) -> Vec<&mut Tensor<F>> {
        self.layers
            .iter_mut()
            .filter_map(|l| match l {
                Layer::Conv { weight, .. } | Layer::Linear { weight, .. } => Some(weight),
                _ => None,
            })
            .collect()
    }

    pub fn prunable_names(&self) -> Vec<String> {
        self.prunable_layers()
            .into_iter()
            .map(|i| format!("layers.{}.weight", i))
            .collect()
    }

    pub fn prunable_count(&self) -> usize {
        self.prunable_weights().iter().map(|w| w.len()).sum()
    }

    /// Every learnable element: weights, biases and batch-norm affine terms.
    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| match l {
                Layer::Conv { weight, bias, .. } | Layer::Linear { weight, bias } => weight.len() + bias.len(),
                Layer::BatchNorm { gamma, beta, .. } => gamma.len() + beta.len(),
                _ => 0,
            })
            .sum()
    }

    /// Every stored tensor with a stable name, in layer order.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor<F>)> {
        let mut out = Vec::new();
        for (i, l) in self.layers.iter().enumerate() {
            match l {
                Layer::Conv { weight, bias, .. } | Layer::Linear { weight, bias } => {
                    out.push((format!("layers.{}.weight", i), weight));
                    out.push((format!("layers.{}.bias", i), bias));
                }
                Layer::BatchNorm { gamma, beta, running_mean, running_var } => {
                    out.push((format!("layers.{}.gamma", i), gamma));
                    out.push((format!("layers.{}.beta", i), beta));
                    out.push((format!("layers.{}.running_mean", i), running_mean));
                    out.push((format!("layers.{}.running_var", i), running_var));
                }
                _ => {}
            }
        }
        out
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor<F>)> {
        let mut out = Vec::new();
        for (i, l) in self.layers.iter_mut().enumerate() {
            match l {
                Layer::Conv { weight, bias, .. } | Layer::Linear { weight, bias } => {
                    out.push((format!("layers.{}.weight", i), weight));
                    out.push((format!("layers.{}.bias", i), bias));
                }
                Layer::BatchNorm { gamma, beta, running_mean, running_var } => {
                    out.push((format!("layers.{}.gamma", i), gamma));
                    out.push((format!("layers.{}.beta", i), beta));
                    out.push((format!("layers.{}.running_mean", i), running_mean));
                    out.push((format!("layers.{}.running_var", i), running_var));
                }
                _ => {}
            }
        }
        out
    }

    pub fn param_mut(&mut self, key: ParamKey) -> Option<&mut Tensor<F>> {
        match (self.layers.get_mut(key.layer)?, key.kind) {
            (Layer::Conv { weight, .. } | Layer::Linear { weight, .. }, ParamKind::Weight) => Some(weight),
            (Layer::Conv { bias, .. } | Layer::Linear { bias, .. }, ParamKind::Bias) => Some(bias),
            (Layer::BatchNorm { gamma, .. }, ParamKind::Gamma) => Some(gamma),
            (Layer::BatchNorm { beta, .. }, ParamKind::Beta) => Some(beta),
            _ => None,
        }
    }

    /// The same network at another precision.
    pub fn cast<G: Scalar>(&self) -> Model<G> {
        let layers = self
            .layers
            .iter()
            .map(|l| match l {
                Layer::Conv { weight, bias, stride, padding } => Layer::Conv { weight: weight.cast(), bias: bias.cast(), stride: *stride, padding: *padding },
                Layer::Linear { weight, bias } => Layer::Linear { weight: weight.cast(), bias: bias.cast() },
                Layer::Relu => Layer::Relu,
                Layer::MaxPool { kernel, stride } => Layer::MaxPool { kernel: *kernel, stride: *stride },
                Layer::BatchNorm { gamma, beta, running_mean, running_var } => Layer::BatchNorm {
                    gamma: gamma.cast(),
                    beta: beta.cast(),
                    running_mean: running_mean.cast(),
                    running_var: running_var.cast(),
                },
                Layer::Flatten => Layer::Flatten,
            })
            .collect();
        Model { arch: self.arch, input_shape: self.input_shape.clone(), num_classes: self.num_classes, layers }
    }

    pub fn has_batch_norm(&self) -> bool {
        self.layers.iter().any(|l| matches!(l, Layer::BatchNorm { .. }))
    }

    /// Fold batch statistics into the running estimates (unbiased variance).
    pub fn update_running_stats(&mut self, stats: &[(usize, BatchStats<F>)]) {
        let m = F::from_f64_lossy(BN_MOMENTUM);
        for (layer, s) in stats {
            if let Some(Layer::BatchNorm { running_mean, running_var, .. }) = self.layers.get_mut(*layer) {
                let correction = if s.count > 1 { s.count as f64 / (s.count - 1) as f64 } else { 1.0 };
                let correction = F::from_f64_lossy(correction);
                for (r, &b) in running_mean.data_mut().iter_mut().zip(&s.mean) {
                    *r = (F::one() - m) * *r + m * b;
                }
                for (r, &b) in running_var.data_mut().iter_mut().zip(&s.var) {
                    *r = (F::one() - m) * *r + m * b * correction;
                }
            }
        }
    }

    /// Record the forward pass of a `[B, ...input_shape]` batch onto `tape`.
    pub fn forward(&self, tape: &mut Tape<F>, input: Var, ctx: &ForwardCtx<'_, F>) -> Result<ForwardOut<F>> {
        if ctx.slots.len() != self.num_prunable() {
            return Err(Error::Config(format!(
                "{} slot modes for {} prunable layers",
                ctx.slots.len(),
                self.num_prunable()
            )));
        }
        let mut x = input;
        let mut params = Vec::new();
        let mut scores = Vec::new();
        let mut bn_stats = Vec::new();
        let mut slot = 0;
        for (li, layer) in self.layers.iter().enumerate() {
            x = match layer {
                Layer::Conv { weight, bias, .. } | Layer::Linear { weight, bias } => {
                    let w = self.bind_weight(tape, li, weight, ctx.slots[slot], &mut params, &mut scores)?;
                    slot += 1;
                    let y = match layer {
                        Layer::Conv { stride, padding, .. } => tape.conv2d(x, w, *stride, *padding)?,
                        _ => tape.linear(x, w)?,
                    };
                    let b = tape.leaf(bias.clone(), ctx.train_aux);
                    if ctx.train_aux {
                        params.push((ParamKey { layer: li, kind: ParamKind::Bias }, b));
                    }
                    tape.add_bias(y, b)?
                }
                Layer::Relu => tape.relu(x),
                Layer::MaxPool { kernel, stride } => tape.maxpool2d(x, *kernel, *stride)?,
                Layer::Flatten => tape.flatten(x)?,
                Layer::BatchNorm { gamma, beta, running_mean, running_var } => match ctx.bn {
                    BnMode::Train => {
                        let g = tape.leaf(gamma.clone(), ctx.train_aux);
                        let b = tape.leaf(beta.clone(), ctx.train_aux);
                        if ctx.train_aux {
                            params.push((ParamKey { layer: li, kind: ParamKind::Gamma }, g));
                            params.push((ParamKey { layer: li, kind: ParamKind::Beta }, b));
                        }
                        let (y, stats) = tape.batch_norm(x, g, b, F::from_f64_lossy(BN_EPS))?;
                        bn_stats.push((li, stats));
                        y
                    }
                    BnMode::Eval => {
                        let eps = F::from_f64_lossy(BN_EPS);
                        let scale: Vec<F> = gamma
                            .data()
                            .iter()
                            .zip(running_var.data())
                            .map(|(&g, &v)| g / (v + eps).sqrt())
                            .collect();
                        let shift: Vec<F> = beta
                            .data()
                            .iter()
                            .zip(running_mean.data())
                            .zip(&scale)
                            .map(|((&b, &m), &s)| b - m * s)
                            .collect();
                        tape.channel_affine(x, &scale, &shift)?
                    }
                },
            };
        }
        Ok(ForwardOut { logits: x, params, scores, bn_stats })
    }

    fn bind_weight(
        &self,
        tape: &mut Tape<F>,
        layer: usize,
        weight: &Tensor<F>,
        mode: SlotMode<'_, F>,
        params: &mut Vec<(ParamKey, Var)>,
        scores: &mut Vec<Var>,
    ) -> Result<Var> {
        let key = ParamKey { layer, kind: ParamKind::Weight };
        let check = |m: &BinaryMask| {
            if m.shape() != weight.shape() {
                Err(Error::Config(format!(
                    "mask {:?} for layer {} weight {:?}",
                    m.shape(),
                    layer,
                    weight.shape()
                )))
            } else {
                Ok(())
            }
        };
        match mode {
            SlotMode::Dense { train } => {
                let w = tape.leaf(weight.clone(), train);
                if train {
                    params.push((key, w));
                }
                Ok(w)
            }
            SlotMode::Masked { mask, train } => {
                check(mask)?;
                let w = tape.leaf(weight.clone(), train);
                if train {
                    params.push((key, w));
                }
                tape.masked_weight(w, None, mask.bits(), SteRule::WeightScaled)
            }
            SlotMode::Scored { scores: s, mask, rule } => {
                check(mask)?;
                let w = tape.constant(weight.clone());
                let sv = tape.leaf(s.clone(), true);
                scores.push(sv);
                tape.masked_weight(w, Some(sv), mask.bits(), rule)
            }
        }
    }

    /// Forward a batch of images and return the logits tensor (no gradients).
    pub fn logits(&self, images: Tensor<F>, ctx: &ForwardCtx<'_, F>) -> Result<Tensor<F>> {
        let mut tape = Tape::new();
        let x = tape.constant(images);
        let out = self.forward(&mut tape, x, ctx)?;
        Ok(tape.value(out.logits).clone())
    }
}
