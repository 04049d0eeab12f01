//! Weight fine-tuning under a fixed mask.
//!
//! Surviving weights train as usual; pruned entries keep their stored values,
//! receive no update and are multiplied out of every forward pass. Biases and
//! batch-norm parameters train too, and batch-norm running statistics update.

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::masking::BinaryMask;
use crate::nn::train::fit;
use crate::nn::{Model, SgdConfig, TrainedCheckpoint};
use crate::tensor::Scalar;

pub fn finetune<F: Scalar>(
    mut model: Model<F>,
    masks: &[BinaryMask],
    train: &Dataset,
    test: &Dataset,
    cfg: &SgdConfig,
    seed: u64,
) -> Result<TrainedCheckpoint<F>> {
    let weights = model.prunable_weights();
    if masks.len() != weights.len() {
        return Err(Error::Config(format!("{} masks for {} prunable layers", masks.len(), weights.len())));
    }
    for (i, (m, w)) in masks.iter().zip(&weights).enumerate() {
        if m.shape() != w.shape() {
            return Err(Error::Config(format!("mask {:?} for layer {} weight {:?}", m.shape(), i, w.shape())));
        }
    }
    let history = fit(&mut model, Some(masks), train, test, cfg, seed)?;
    Ok(TrainedCheckpoint { model, history, seed, epochs: cfg.epochs })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::criteria::score_magnitude;
    use crate::data::synth_gaussian_classes;
    use crate::metrics::evaluate;
    use crate::nn::{build_model, pretrain, Arch, Schedule};

    fn cfg(epochs: usize) -> SgdConfig {
        SgdConfig { lr0: 0.05, momentum: 0.9, weight_decay: 5e-4, epochs, schedule: Schedule::Cosine, batch_size: 16 }
    }

    fn data() -> (Dataset, Dataset) {
        (synth_gaussian_classes(3, 6, 40, 3.0, 0).unwrap(), synth_gaussian_classes(3, 6, 30, 3.0, 1).unwrap())
    }

    #[test]
    fn pruned_weights_and_mask_stay_put() {
        let (train, test) = data();
        let m = build_model::<f64>(Arch::Mlp { hidden: 10 }, &[6], 3, 0).unwrap();
        let masks = score_magnitude(&m).masks(0.7);
        let snapshot = masks.clone();
        let out = finetune(m.clone(), &masks, &train, &test, &cfg(3), 1).unwrap();
        assert_eq!(masks, snapshot);
        let mut changed = 0;
        for ((before, after), mask) in m.prunable_weights().iter().zip(out.model.prunable_weights()).zip(&masks) {
            for ((b, a), keep) in before.data().iter().zip(after.data()).zip(mask.bits()) {
                if !keep {
                    assert_eq!(b.to_bits(), a.to_bits());
                } else if b != a {
                    changed += 1;
                }
            }
        }
        assert!(changed > 0);
    }

    #[test]
    fn zero_epochs_keeps_masked_accuracy() {
        let (train, test) = data();
        let m = build_model::<f64>(Arch::Mlp { hidden: 10 }, &[6], 3, 0).unwrap();
        let masks = score_magnitude(&m).masks(0.5);
        let out = finetune(m.clone(), &masks, &train, &test, &cfg(0), 1).unwrap();
        assert_eq!(out.model, m);
        assert_eq!(out.history[0].test_acc, evaluate(&m, Some(&masks), &test, 9).unwrap().top1);
    }

    #[test]
    fn all_ones_mask_is_dense_training() {
        let (train, test) = data();
        let m = build_model::<f64>(Arch::Mlp { hidden: 10 }, &[6], 3, 0).unwrap();
        let ones: Vec<BinaryMask> = m.prunable_weights().iter().map(|w| BinaryMask::ones(w.shape())).collect();
        let a = finetune(m.clone(), &ones, &train, &test, &cfg(2), 4).unwrap();
        let b = pretrain(m, &train, &test, &cfg(2), 4).unwrap();
        assert_eq!(a.model, b.model);
        assert_eq!(a.history, b.history);
    }

    #[test]
    fn shape_mismatch_is_config_error() {
        let (train, test) = data();
        let m = build_model::<f64>(Arch::Mlp { hidden: 10 }, &[6], 3, 0).unwrap();
        let bad = vec![BinaryMask::ones(&[3])];
        assert!(matches!(finetune(m, &bad, &train, &test, &cfg(1), 0), Err(Error::Config(_))));
    }
}
