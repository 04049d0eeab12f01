//! Score search over frozen weights.
//!
//! The model is only ever borrowed immutably: scores are the sole trainable
//! state. Each step thresholds the scores into hard masks, runs the masked
//! forward pass, pushes straight-through gradients into every score (pruned
//! entries included, so weights can come back), takes an SGD step and clamps
//! the scores to `[0,1]`.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{SteRule, Tape};
use crate::criteria::{compute_scores, Criterion, CriterionConfig, CriterionScore};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::masking::{check_sparsity, clamp_unit, global_sparsity, prune_count, ranks, threshold_h, BinaryMask};
use crate::metrics::{evaluate, mask_overlap};
use crate::nn::{BnMode, ForwardCtx, Model, Schedule, Sgd, SgdConfig, SlotMode};
use crate::seed::derive_seed;
use crate::tensor::{Scalar, Tensor};

const EVAL_BATCH: usize = 500;

/// Where the initial scores come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Warmup {
    /// Uniform random scores.
    None,
    Magnitude,
    Snip,
    Grasp,
}

impl Warmup {
    pub fn criterion(self) -> Option<Criterion> {
        match self {
            Warmup::None => None,
            Warmup::Magnitude => Some(Criterion::Magnitude),
            Warmup::Snip => Some(Criterion::Snip),
            Warmup::Grasp => Some(Criterion::Grasp),
        }
    }

    pub fn name(self) -> &'static str {
        self.criterion().map_or("none", Criterion::name)
    }
}

impl fmt::Display for Warmup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Warmup {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Warmup::None),
            "magnitude" => Ok(Warmup::Magnitude),
            "snip" => Ok(Warmup::Snip),
            "grasp" => Ok(Warmup::Grasp),
            _ => Err(Error::Config(format!("unknown warmup '{}' (none, magnitude, snip, grasp)", s))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SearchConfig {
    pub sparsity: f64,
    pub epochs: usize,
    /// Optimiser for the scores; its `epochs` field is ignored in favour of `epochs` above.
    pub optimizer: SgdConfig,
    pub warmup: Warmup,
    /// Half-width of the uniform noise added to warm-started scores.
    pub init_noise: f64,
    pub seed: u64,
    /// Test accuracy is measured every this many epochs and after the last one.
    pub eval_every: usize,
    pub ste_rule: SteRule,
    /// Apply the optimiser's weight decay to the scores.
    pub score_decay: bool,
    pub criterion: CriterionConfig,
}

impl Default for SearchConfig {
    fn default() -> Self {
        SearchConfig {
            sparsity: 0.9,
            epochs: 30,
            optimizer: default_score_optimizer(),
            warmup: Warmup::Magnitude,
            init_noise: 0.0,
            seed: 0,
            eval_every: 1,
            ste_rule: SteRule::WeightScaled,
            score_decay: true,
            criterion: CriterionConfig::default(),
        }
    }
}

/// Score optimiser used unless configured otherwise. The comparatively large
/// decay keeps scores off the upper clamp, where ties would otherwise be
/// broken by index instead of by gradient history.
pub fn default_score_optimizer() -> SgdConfig {
    SgdConfig { lr0: 0.03, momentum: 0.9, weight_decay: 1e-2, epochs: 30, schedule: Schedule::Cosine, batch_size: 64 }
}

impl SearchConfig {
    pub fn validate(&self) -> Result<()> {
        check_sparsity(self.sparsity)?;
        self.optimizer.validate()?;
        if !(self.init_noise >= 0.0 && self.init_noise.is_finite()) {
            return Err(Error::Config(format!("init_noise must be >= 0, got {}", self.init_noise)));
        }
        if self.eval_every == 0 {
            return Err(Error::Config("eval_every must be positive".into()));
        }
        Ok(())
    }

    fn score_optimizer(&self) -> SgdConfig {
        SgdConfig {
            epochs: self.epochs,
            weight_decay: if self.score_decay { self.optimizer.weight_decay } else { 0.0 },
            ..self.optimizer.clone()
        }
    }
}

/// Initial relaxed scores.
///
/// With criterion scores, each layer's entries are replaced by their rank
/// `(r + 0.5) / k` under the thresholding order, so thresholding the result
/// reproduces the criterion's mask exactly. Noise `U(−init_noise, init_noise)`
/// is then added and the scores clamped to `[0,1]`. Without criterion scores
/// (`Warmup::None`) the scores are `U(0,1)`.
pub fn init_scores<F: Scalar>(
    weights: &[&Tensor<F>],
    criterion: Option<&CriterionScore<F>>,
    warmup: Warmup,
    init_noise: f64,
    seed: u64,
) -> Result<Vec<Tensor<F>>> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "search/init"));
    if warmup == Warmup::None {
        return Ok(weights
            .iter()
            .map(|w| {
                let data = (0..w.len()).map(|_| F::from_f64_lossy(rng.gen::<f64>())).collect();
                Tensor::new(w.shape().to_vec(), data).expect("same shape")
            })
            .collect());
    }
    let crit = criterion.ok_or_else(|| Error::Config(format!("warm-up '{}' needs criterion scores", warmup)))?;
    if crit.scores.len() != weights.len() {
        return Err(Error::Config(format!("{} score tensors for {} prunable layers", crit.scores.len(), weights.len())));
    }
    let mut out = Vec::with_capacity(weights.len());
    for (w, s) in weights.iter().zip(&crit.scores) {
        if s.shape() != w.shape() {
            return Err(Error::Config(format!("criterion scores {:?} for weight {:?}", s.shape(), w.shape())));
        }
        let k = s.len() as f64;
        let mut data: Vec<F> = ranks(s.data())
            .into_iter()
            .map(|r| {
                let mut v = (r as f64 + 0.5) / k;
                if init_noise > 0.0 {
                    v += rng.gen_range(-init_noise..=init_noise);
                }
                F::from_f64_lossy(v)
            })
            .collect();
        clamp_unit(&mut data);
        out.push(Tensor::new(s.shape().to_vec(), data)?);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SearchEpoch {
    /// 0 is the initial state.
    pub epoch: usize,
    pub lr: f64,
    /// Mean training loss over the epoch; absent for epoch 0.
    pub train_loss: Option<f64>,
    pub train_acc: Option<f64>,
    /// Present at evaluation epochs.
    pub test_acc: Option<f64>,
    pub sparsity: f64,
    pub overlap_vs_init: f64,
}

#[derive(Debug, Clone)]
pub struct SearchOutcome<F> {
    pub masks: Vec<BinaryMask>,
    pub scores: Vec<Tensor<F>>,
    pub initial_masks: Vec<BinaryMask>,
    pub history: Vec<SearchEpoch>,
    /// Checksums of the frozen weights, identical before and after the run.
    pub weight_checksums: Vec<[u8; 32]>,
    pub steps: usize,
}

impl<F> SearchOutcome<F> {
    pub fn final_test_acc(&self) -> Option<f64> {
        self.history.iter().rev().find_map(|h| h.test_acc)
    }
}

/// Compute the warm-up criterion (if any) and run the search.
pub fn search<F: Scalar>(model: &Model<F>, train: &Dataset, test: &Dataset, cfg: &SearchConfig) -> Result<SearchOutcome<F>> {
    let crit = match cfg.warmup.criterion() {
        Some(c) => Some(compute_scores(model, c, train, &cfg.criterion, derive_seed(cfg.seed, "search/criterion"))?),
        None => None,
    };
    let scores = init_scores(&model.prunable_weights(), crit.as_ref(), cfg.warmup, cfg.init_noise, cfg.seed)?;
    search_from(model, train, test, cfg, scores)
}

/// Run the search from given initial scores.
pub fn search_from<F: Scalar>(model: &Model<F>, train: &Dataset, test: &Dataset, cfg: &SearchConfig, mut scores: Vec<Tensor<F>>) -> Result<SearchOutcome<F>> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Data("training split is empty".into()));
    }
    let weights = model.prunable_weights();
    if scores.len() != weights.len() || scores.iter().zip(&weights).any(|(s, w)| s.shape() != w.shape()) {
        return Err(Error::Config("initial scores do not match the prunable weights".into()));
    }
    for s in &mut scores {
        clamp_unit(s.data_mut());
    }
    let before: Vec<[u8; 32]> = weights.iter().map(|w| w.checksum()).collect();
    let p = cfg.sparsity;
    let threshold = |scores: &[Tensor<F>]| -> Result<Vec<BinaryMask>> {
        let masks: Vec<BinaryMask> = scores.iter().map(|s| threshold_h(s, p)).collect();
        for m in &masks {
            if m.pruned_count() != prune_count(p, m.len()) {
                return Err(Error::Integrity(format!("mask prunes {} of {}", m.pruned_count(), m.len())));
            }
        }
        Ok(masks)
    };
    let initial_masks = threshold(&scores)?;
    let mut masks = initial_masks.clone();
    let start = evaluate(model, Some(&masks), test, EVAL_BATCH)?;
    let mut history = vec![SearchEpoch {
        epoch: 0,
        lr: 0.0,
        train_loss: None,
        train_acc: None,
        test_acc: Some(start.top1),
        sparsity: global_sparsity(&masks)?,
        overlap_vs_init: 1.0,
    }];
    let opt = cfg.score_optimizer();
    let mut sgd: Sgd<usize, F> = Sgd::new(&opt);
    let mut steps = 0;
    for epoch in 0..cfg.epochs {
        let lr = opt.lr_at(epoch);
        let order = train.epoch_order(derive_seed(cfg.seed, "search/order"), epoch);
        let mut aug = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &format!("search/augment/{epoch}")));
        let (mut loss_sum, mut correct) = (0.0f64, 0usize);
        for idx in order.chunks(opt.batch_size) {
            let batch = train.batch::<F>(idx, Some(&mut aug));
            let mut tape = Tape::new();
            let x = tape.constant(batch.images);
            let out = model.forward(&mut tape, x, &ForwardCtx::search(&scores, &masks, cfg.ste_rule))?;
            correct += crate::nn::train::count_correct(tape.value(out.logits).data(), &batch.labels, model.num_classes);
            let loss = tape.softmax_cross_entropy(out.logits, &batch.labels)?;
            let lv = tape.value(loss).data()[0].as_f64();
            if !lv.is_finite() {
                return Err(Error::Numeric(format!("non-finite search loss in epoch {}", epoch + 1)));
            }
            loss_sum += lv * idx.len() as f64;
            let mut grads = tape.backward(loss)?;
            for (slot, var) in out.scores.iter().enumerate() {
                let g = grads.take(*var).expect("score gradient");
                sgd.step(&slot, scores[slot].data_mut(), &g, lr, None);
                clamp_unit(scores[slot].data_mut());
            }
            masks = threshold(&scores)?;
            steps += 1;
        }
        let evaluate_now = (epoch + 1) % cfg.eval_every == 0 || epoch + 1 == cfg.epochs;
        let test_acc = if evaluate_now { Some(evaluate(model, Some(&masks), test, EVAL_BATCH)?.top1) } else { None };
        history.push(SearchEpoch {
            epoch: epoch + 1,
            lr,
            train_loss: Some(loss_sum / train.len() as f64),
            train_acc: Some(correct as f64 / train.len() as f64),
            test_acc,
            sparsity: global_sparsity(&masks)?,
            overlap_vs_init: mask_overlap(&initial_masks, &masks)?,
        });
    }
    let after: Vec<[u8; 32]> = model.prunable_weights().iter().map(|w| w.checksum()).collect();
    if after != before {
        return Err(Error::Integrity("a frozen weight changed during search".into()));
    }
    Ok(SearchOutcome { masks, scores, initial_masks, history, weight_checksums: before, steps })
}

/// Overlap-with-initial-mask series and its plateau statistics.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OverlapTrajectory {
    pub series: Vec<(usize, f64)>,
    /// `|overlap(E/3) − overlap(0)|`.
    pub first_third_change: f64,
    /// `|overlap(E) − overlap(2E/3)|`.
    pub last_third_change: f64,
}

impl OverlapTrajectory {
    /// Ratio of late to early movement; small when the series has plateaued.
    pub fn plateau_ratio(&self) -> f64 {
        if self.first_third_change == 0.0 {
            if self.last_third_change == 0.0 {
                0.0
            } else {
                f64::INFINITY
            }
        } else {
            self.last_third_change / self.first_third_change
        }
    }
}

pub fn overlap_trajectory(history: &[SearchEpoch]) -> OverlapTrajectory {
    let series: Vec<(usize, f64)> = history.iter().map(|h| (h.epoch, h.overlap_vs_init)).collect();
    let at = |e: usize| -> f64 {
        // closest recorded epoch at or after e
        series.iter().find(|(ep, _)| *ep >= e).or(series.last()).map_or(1.0, |&(_, v)| v)
    };
    let last = series.last().map_or(0, |&(e, _)| e);
    let (t1, t2) = (last / 3, (2 * last).div_ceil(3));
    OverlapTrajectory {
        first_third_change: (at(t1) - at(0)).abs(),
        last_third_change: (at(last) - at(t2)).abs(),
        series,
    }
}

/// Re-estimate batch-norm running statistics under `masks` by averaging
/// per-batch statistics over `data`. Returns the recalibrated copy.
pub fn recalibrate_bn<F: Scalar>(model: &Model<F>, masks: &[BinaryMask], data: &Dataset, batch_size: usize) -> Result<Model<F>> {
    let mut out = model.clone();
    if !model.has_batch_norm() {
        return Ok(out);
    }
    if data.is_empty() {
        return Err(Error::Data("recalibration split is empty".into()));
    }
    let ctx = ForwardCtx {
        slots: masks.iter().map(|mask| SlotMode::Masked { mask, train: false }).collect(),
        train_aux: false,
        bn: BnMode::Train,
    };
    let order: Vec<usize> = (0..data.len()).collect();
    let mut sums: std::collections::BTreeMap<usize, (Vec<f64>, Vec<f64>, usize)> = Default::default();
    for batch in data.batches::<F>(&order, batch_size) {
        let mut tape = Tape::new();
        let x = tape.constant(batch.images);
        let fwd = model.forward(&mut tape, x, &ctx)?;
        for (layer, s) in fwd.bn_stats {
            let e = sums.entry(layer).or_insert_with(|| (vec![0.0; s.mean.len()], vec![0.0; s.var.len()], 0));
            let unbiased = if s.count > 1 { s.count as f64 / (s.count - 1) as f64 } else { 1.0 };
            for (a, v) in e.0.iter_mut().zip(&s.mean) {
                *a += v.as_f64();
            }
            for (a, v) in e.1.iter_mut().zip(&s.var) {
                *a += v.as_f64() * unbiased;
            }
            e.2 += 1;
        }
    }
    for (layer, (mean, var, n)) in sums {
        if let crate::nn::Layer::BatchNorm { running_mean, running_var, .. } = &mut out.layers[layer] {
            for (r, m) in running_mean.data_mut().iter_mut().zip(&mean) {
                *r = F::from_f64_lossy(m / n as f64);
            }
            for (r, v) in running_var.data_mut().iter_mut().zip(&var) {
                *r = F::from_f64_lossy(v / n as f64);
            }
        }
    }
    Ok(out)
}
