//! Dense pre-training and the shared weight-training loop.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::{ForwardCtx, Model, ParamKind, Sgd, SgdConfig};
use crate::autograd::Tape;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::masking::BinaryMask;
use crate::metrics::evaluate;
use crate::seed::derive_seed;
use crate::tensor::Scalar;

const EVAL_BATCH: usize = 500;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EpochStats {
    /// 1-based; epoch 0 is the state before any update.
    pub epoch: usize,
    pub lr: f64,
    /// Absent for epoch 0.
    pub train_loss: Option<f64>,
    pub train_acc: Option<f64>,
    pub test_acc: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainedCheckpoint<F> {
    pub model: Model<F>,
    pub history: Vec<EpochStats>,
    pub seed: u64,
    pub epochs: usize,
}

impl<F: Scalar> TrainedCheckpoint<F> {
    pub fn final_test_acc(&self) -> Option<f64> {
        self.history.last().map(|h| h.test_acc)
    }
}

/// Train every parameter of `model` for `cfg.epochs` epochs.
pub fn pretrain<F: Scalar>(mut model: Model<F>, train: &Dataset, test: &Dataset, cfg: &SgdConfig, seed: u64) -> Result<TrainedCheckpoint<F>> {
    let history = fit(&mut model, None, train, test, cfg, seed)?;
    Ok(TrainedCheckpoint { model, history, seed, epochs: cfg.epochs })
}

/// Weight training, optionally under fixed masks. With masks, pruned weight
/// entries receive no update and do not enter the forward pass.
///
/// Returns one row per epoch, preceded by an epoch-0 row with the starting
/// test accuracy.
pub(crate) fn fit<F: Scalar>(
    model: &mut Model<F>,
    masks: Option<&[BinaryMask]>,
    train: &Dataset,
    test: &Dataset,
    cfg: &SgdConfig,
    seed: u64,
) -> Result<Vec<EpochStats>> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Data("training split is empty".into()));
    }
    let start = evaluate(model, masks, test, EVAL_BATCH)?;
    let mut history = vec![EpochStats { epoch: 0, lr: 0.0, train_loss: None, train_acc: None, test_acc: start.top1 }];
    let mut sgd: Sgd<(usize, ParamKind), F> = Sgd::new(cfg);
    let weight_slot: Vec<Option<usize>> = {
        let prunable = model.prunable_layers();
        (0..model.layers.len()).map(|l| prunable.iter().position(|&p| p == l)).collect()
    };
    for epoch in 0..cfg.epochs {
        let lr = cfg.lr_at(epoch);
        let order = train.epoch_order(derive_seed(seed, "train/order"), epoch);
        let mut aug = ChaCha8Rng::seed_from_u64(derive_seed(seed, &format!("train/augment/{epoch}")));
        let (mut loss_sum, mut correct) = (0.0f64, 0usize);
        for idx in order.chunks(cfg.batch_size) {
            let batch = train.batch::<F>(idx, Some(&mut aug));
            let mut tape = Tape::new();
            let x = tape.constant(batch.images);
            let ctx = match masks {
                Some(m) => ForwardCtx::finetune(m),
                None => ForwardCtx::train_dense(model),
            };
            let out = model.forward(&mut tape, x, &ctx)?;
            correct += count_correct(tape.value(out.logits).data(), &batch.labels, model.num_classes);
            let loss = tape.softmax_cross_entropy(out.logits, &batch.labels)?;
            let lv = tape.value(loss).data()[0].as_f64();
            if !lv.is_finite() {
                return Err(Error::Numeric(format!("non-finite training loss in epoch {}", epoch + 1)));
            }
            loss_sum += lv * idx.len() as f64;
            let mut grads = tape.backward(loss)?;
            for (key, var) in &out.params {
                let g = grads.take(*var).expect("parameter leaf has a gradient");
                let active = match (key.kind, masks) {
                    (ParamKind::Weight, Some(m)) => weight_slot[key.layer].map(|s| m[s].bits()),
                    _ => None,
                };
                let p = model.param_mut(*key).expect("parameter key from forward");
                sgd.step(&(key.layer, key.kind), p.data_mut(), &g, lr, active);
            }
            model.update_running_stats(&out.bn_stats);
        }
        let test_acc = evaluate(model, masks, test, EVAL_BATCH)?.top1;
        history.push(EpochStats {
            epoch: epoch + 1,
            lr,
            train_loss: Some(loss_sum / train.len() as f64),
            train_acc: Some(correct as f64 / train.len() as f64),
            test_acc,
        });
    }
    Ok(history)
}

/// Top-1 hits in a row-major logits block (first maximum wins).
pub(crate) fn count_correct<F: Scalar>(logits: &[F], labels: &[usize], classes: usize) -> usize {
    labels
        .iter()
        .enumerate()
        .filter(|&(r, &l)| {
            let row = &logits[r * classes..(r + 1) * classes];
            let best = (0..classes).fold(0, |b, j| if row[j] > row[b] { j } else { b });
            best == l
        })
        .count()
}
