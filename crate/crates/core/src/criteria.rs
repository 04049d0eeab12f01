//! Classical pruning criteria used to warm-start the mask search.
//!
//! Every criterion yields one score tensor per prunable weight, and masks are
//! always derived by keeping the largest scores ([`threshold_h`]). GraSP
//! removes the weights with the *largest* raw score `−w ⊙ Hg`, so its scores
//! are returned negated (`w ⊙ Hg`); the keep-largest rule then keeps exactly
//! the weights GraSP would keep.
//!
//! Gradient-based criteria are computed in f64 with batch norm in eval mode,
//! so the loss is a fixed function of the weights and the finite-difference
//! Hessian-vector product is well defined.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Tape;
use crate::data::{Batch, Dataset};
use crate::error::{Error, Result};
use crate::masking::{threshold_h, BinaryMask};
use crate::nn::{build_model, BnMode, ForwardCtx, Model, ParamKind, SlotMode};
use crate::seed::derive_seed;
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Criterion {
    Magnitude,
    Snip,
    Grasp,
    Random,
}

impl Criterion {
    pub const ALL: [Criterion; 4] = [Criterion::Magnitude, Criterion::Snip, Criterion::Grasp, Criterion::Random];

    pub fn name(self) -> &'static str {
        match self {
            Criterion::Magnitude => "magnitude",
            Criterion::Snip => "snip",
            Criterion::Grasp => "grasp",
            Criterion::Random => "random",
        }
    }

    pub fn uses_data(self) -> bool {
        matches!(self, Criterion::Snip | Criterion::Grasp)
    }
}

impl fmt::Display for Criterion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Criterion {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Criterion::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown criterion '{}' (magnitude, snip, grasp, random)", s)))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CriterionConfig {
    /// Number of training batches sampled for SNIP and GraSP.
    pub batches: usize,
    pub batch_size: usize,
    /// Norm of the finite-difference probe step along `g`.
    pub hvp_eps: f64,
    /// Take SNIP/GraSP gradients at a fresh initialisation instead of the
    /// trained weights. The resulting scores still index the trained weights.
    pub at_init: bool,
}

impl Default for CriterionConfig {
    fn default() -> Self {
        CriterionConfig { batches: 10, batch_size: 128, hvp_eps: 1e-3, at_init: false }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CriterionScore<F> {
    pub criterion: Criterion,
    /// One tensor per prunable weight, same shapes.
    pub scores: Vec<Tensor<F>>,
    pub batches_used: usize,
}

impl<F: Scalar> CriterionScore<F> {
    pub fn masks(&self, p: f64) -> Vec<BinaryMask> {
        self.scores.iter().map(|s| threshold_h(s, p)).collect()
    }
}

/// A differentiable loss over a list of weight blocks.
pub trait Objective {
    fn loss_grad(&self, weights: &[Vec<f64>]) -> Result<(f64, Vec<Vec<f64>>)>;
}

impl<T> Objective for T
where
    T: Fn(&[Vec<f64>]) -> Result<(f64, Vec<Vec<f64>>)>,
{
    fn loss_grad(&self, weights: &[Vec<f64>]) -> Result<(f64, Vec<Vec<f64>>)> {
        self(weights)
    }
}

/// Summed mean cross-entropy of a model over fixed batches, as a function of
/// its prunable weights. Everything else stays at the model's values.
pub struct ModelObjective<'a> {
    pub model: &'a Model<f64>,
    pub batches: &'a [Batch<f64>],
}

impl Objective for ModelObjective<'_> {
    fn loss_grad(&self, weights: &[Vec<f64>]) -> Result<(f64, Vec<Vec<f64>>)> {
        let mut model = self.model.clone();
        for (w, src) in model.prunable_weights_mut().into_iter().zip(weights) {
            if w.len() != src.len() {
                return Err(Error::dim(format!("weight block of {} for {:?}", src.len(), w.shape())));
            }
            w.data_mut().copy_from_slice(src);
        }
        let ctx = ForwardCtx { slots: vec![SlotMode::Dense { train: true }; model.num_prunable()], train_aux: false, bn: BnMode::Eval };
        let prunable = model.prunable_layers();
        let mut grads: Vec<Vec<f64>> = weights.iter().map(|w| vec![0.0; w.len()]).collect();
        let mut total = 0.0;
        for b in self.batches {
            let mut tape = Tape::new();
            let x = tape.constant(b.images.clone());
            let out = model.forward(&mut tape, x, &ctx)?;
            let loss = tape.softmax_cross_entropy(out.logits, &b.labels)?;
            total += tape.value(loss).data()[0];
            let mut g = tape.backward(loss)?;
            for (key, var) in &out.params {
                if key.kind != ParamKind::Weight {
                    continue;
                }
                let slot = prunable.iter().position(|&l| l == key.layer).expect("prunable layer");
                for (acc, v) in grads[slot].iter_mut().zip(g.take(*var).expect("weight gradient")) {
                    *acc += v;
                }
            }
        }
        Ok((total, grads))
    }
}

/// `|w ⊙ g|` with `g` the gradient of the objective at `weights`.
pub fn snip_scores<O: Objective + ?Sized>(obj: &O, weights: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    let (_, g) = obj.loss_grad(weights)?;
    Ok(weights
        .iter()
        .zip(&g)
        .map(|(w, g)| w.iter().zip(g).map(|(w, g)| (w * g).abs()).collect())
        .collect())
}

/// Gradient `g` and Hessian-vector product `Hg` by central differences,
/// `Hg ≈ (∇L(w + εg) − ∇L(w − εg)) / 2ε` with `ε = hvp_eps / ‖g‖`.
pub fn grasp_hvp<O: Objective + ?Sized>(obj: &O, weights: &[Vec<f64>], hvp_eps: f64) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    if !(hvp_eps > 0.0 && hvp_eps.is_finite()) {
        return Err(Error::Config(format!("hvp_eps must be positive, got {}", hvp_eps)));
    }
    let (_, g) = obj.loss_grad(weights)?;
    let norm = g.iter().flatten().map(|v| v * v).sum::<f64>().sqrt();
    if norm == 0.0 || !norm.is_finite() {
        return Err(Error::DegenerateGradient(format!("gradient norm is {}", norm)));
    }
    let eps = hvp_eps / norm;
    let shifted = |sign: f64| -> Vec<Vec<f64>> {
        weights
            .iter()
            .zip(&g)
            .map(|(w, g)| w.iter().zip(g).map(|(w, g)| w + sign * eps * g).collect())
            .collect()
    };
    let (_, gp) = obj.loss_grad(&shifted(1.0))?;
    let (_, gm) = obj.loss_grad(&shifted(-1.0))?;
    let hg = gp
        .iter()
        .zip(&gm)
        .map(|(p, m)| p.iter().zip(m).map(|(p, m)| (p - m) / (2.0 * eps)).collect())
        .collect();
    Ok((g, hg))
}

/// GraSP scores in keep-largest form: `w ⊙ Hg`, the negation of `−w ⊙ Hg`.
pub fn grasp_scores<O: Objective + ?Sized>(obj: &O, weights: &[Vec<f64>], hvp_eps: f64) -> Result<Vec<Vec<f64>>> {
    let (_, hg) = grasp_hvp(obj, weights, hvp_eps)?;
    Ok(weights
        .iter()
        .zip(&hg)
        .map(|(w, h)| w.iter().zip(h).map(|(w, h)| w * h).collect())
        .collect())
}

fn to_tensors<F: Scalar>(model: &Model<F>, blocks: Vec<Vec<f64>>) -> Result<Vec<Tensor<F>>> {
    model
        .prunable_weights()
        .iter()
        .zip(blocks)
        .map(|(w, b)| Tensor::from_f64(w.shape(), &b))
        .collect()
}

fn weight_blocks<F: Scalar>(model: &Model<F>) -> Vec<Vec<f64>> {
    model.prunable_weights().iter().map(|w| w.to_f64_vec()).collect()
}

pub fn score_magnitude<F: Scalar>(model: &Model<F>) -> CriterionScore<F> {
    CriterionScore {
        criterion: Criterion::Magnitude,
        scores: model.prunable_weights().iter().map(|w| w.map(|v| v.abs())).collect(),
        batches_used: 0,
    }
}

pub fn score_random<F: Scalar>(model: &Model<F>, seed: u64) -> CriterionScore<F> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "criterion/random"));
    let scores = model
        .prunable_weights()
        .iter()
        .map(|w| {
            let data = (0..w.len()).map(|_| F::from_f64_lossy(rng.gen::<f64>())).collect();
            Tensor::new(w.shape().to_vec(), data).expect("same shape")
        })
        .collect();
    CriterionScore { criterion: Criterion::Random, scores, batches_used: 0 }
}

/// SNIP on `batches`, gradients summed over them.
pub fn score_snip<F: Scalar>(model: &Model<F>, batches: &[Batch<f64>]) -> Result<CriterionScore<F>> {
    score_snip_at(model, &model.cast(), batches)
}

pub fn score_grasp<F: Scalar>(model: &Model<F>, batches: &[Batch<f64>], hvp_eps: f64) -> Result<CriterionScore<F>> {
    score_grasp_at(model, &model.cast(), batches, hvp_eps)
}

/// SNIP with gradients taken at `probe` and weights from `model`.
fn score_snip_at<F: Scalar>(model: &Model<F>, probe: &Model<f64>, batches: &[Batch<f64>]) -> Result<CriterionScore<F>> {
    if batches.is_empty() {
        return Err(Error::Usage("SNIP needs at least one batch".into()));
    }
    let obj = ModelObjective { model: probe, batches };
    let (_, g) = obj.loss_grad(&weight_blocks(probe))?;
    let blocks = weight_blocks(model)
        .iter()
        .zip(&g)
        .map(|(w, g)| w.iter().zip(g).map(|(w, g)| (w * g).abs()).collect())
        .collect();
    Ok(CriterionScore { criterion: Criterion::Snip, scores: to_tensors(model, blocks)?, batches_used: batches.len() })
}

fn score_grasp_at<F: Scalar>(model: &Model<F>, probe: &Model<f64>, batches: &[Batch<f64>], hvp_eps: f64) -> Result<CriterionScore<F>> {
    if batches.is_empty() {
        return Err(Error::Usage("GraSP needs at least one batch".into()));
    }
    let obj = ModelObjective { model: probe, batches };
    let (_, hg) = grasp_hvp(&obj, &weight_blocks(probe), hvp_eps)?;
    let blocks = weight_blocks(model)
        .iter()
        .zip(&hg)
        .map(|(w, h)| w.iter().zip(h).map(|(w, h)| w * h).collect())
        .collect();
    Ok(CriterionScore { criterion: Criterion::Grasp, scores: to_tensors(model, blocks)?, batches_used: batches.len() })
}

/// The first `cfg.batches` batches of a seeded shuffle of `data`, without augmentation.
pub fn sample_batches(data: &Dataset, cfg: &CriterionConfig, seed: u64) -> Result<Vec<Batch<f64>>> {
    if data.is_empty() || cfg.batches == 0 || cfg.batch_size == 0 {
        return Err(Error::Usage("criterion scoring needs a nonempty sample of batches".into()));
    }
    let order = data.epoch_order(derive_seed(seed, "criterion/sample"), 0);
    let take = (cfg.batches * cfg.batch_size).min(order.len());
    Ok(data.batches(&order[..take], cfg.batch_size).collect())
}

/// Score `model` under `criterion`, sampling batches from `data` when needed.
pub fn compute_scores<F: Scalar>(model: &Model<F>, criterion: Criterion, data: &Dataset, cfg: &CriterionConfig, seed: u64) -> Result<CriterionScore<F>> {
    match criterion {
        Criterion::Magnitude => Ok(score_magnitude(model)),
        Criterion::Random => Ok(score_random(model, seed)),
        Criterion::Snip | Criterion::Grasp => {
            let batches = sample_batches(data, cfg, seed)?;
            let probe: Model<f64> = if cfg.at_init {
                build_model(model.arch, &model.input_shape, model.num_classes, derive_seed(seed, "criterion/init"))?
            } else {
                model.cast()
            };
            if criterion == Criterion::Snip {
                score_snip_at(model, &probe, &batches)
            } else {
                score_grasp_at(model, &probe, &batches, cfg.hvp_eps)
            }
        }
    }
}
