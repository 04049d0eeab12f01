//! Mask overlap, accuracy, and run aggregation.

use std::collections::BTreeMap;

use serde::Serialize;

use crate::autograd::softmax_rows;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::masking::BinaryMask;
use crate::nn::{ForwardCtx, Model};
use crate::report::RunSummary;
use crate::tensor::Scalar;

fn check_aligned(a: &[BinaryMask], b: &[BinaryMask]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::Usage(format!("mask sets of {} and {} layers", a.len(), b.len())));
    }
    for (i, (x, y)) in a.iter().zip(b).enumerate() {
        if x.shape() != y.shape() {
            return Err(Error::Usage(format!(
                "layer {} masks have shapes {:?} and {:?}",
                i,
                x.shape(),
                y.shape()
            )));
        }
    }
    Ok(())
}

fn differing(a: &BinaryMask, b: &BinaryMask) -> usize {
    a.bits().iter().zip(b.bits()).filter(|(x, y)| x != y).count()
}

/// `1 − (#positions where the masks differ) / k`, with `k` summed over all layers.
pub fn mask_overlap(a: &[BinaryMask], b: &[BinaryMask]) -> Result<f64> {
    check_aligned(a, b)?;
    let k: usize = a.iter().map(BinaryMask::len).sum();
    if k == 0 {
        return Err(Error::Usage("overlap of empty mask sets".into()));
    }
    let diff: usize = a.iter().zip(b).map(|(x, y)| differing(x, y)).sum();
    Ok(1.0 - diff as f64 / k as f64)
}

/// The same ratio computed layer by layer.
pub fn per_layer_overlap(a: &[BinaryMask], b: &[BinaryMask]) -> Result<Vec<f64>> {
    check_aligned(a, b)?;
    Ok(a.iter()
        .zip(b)
        .map(|(x, y)| {
            if x.is_empty() {
                1.0
            } else {
                1.0 - differing(x, y) as f64 / x.len() as f64
            }
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Evaluation {
    pub top1: f64,
    /// Present when the task has at least five classes.
    pub top5: Option<f64>,
    pub loss: f64,
    pub samples: usize,
}

/// Eval-mode accuracy and mean cross-entropy, optionally under fixed masks.
pub fn evaluate<F: Scalar>(model: &Model<F>, masks: Option<&[BinaryMask]>, split: &Dataset, batch_size: usize) -> Result<Evaluation> {
    if split.is_empty() {
        return Err(Error::Data("evaluation split is empty".into()));
    }
    let ctx = match masks {
        Some(m) => ForwardCtx::eval_masked(m),
        None => ForwardCtx::eval(model),
    };
    let classes = model.num_classes;
    let order: Vec<usize> = (0..split.len()).collect();
    let (mut hit1, mut hit5, mut loss) = (0usize, 0usize, 0.0f64);
    for batch in split.batches::<F>(&order, batch_size) {
        let logits = model.logits(batch.images, &ctx)?;
        let probs = softmax_rows(logits.data(), classes);
        for (row, &label) in batch.labels.iter().enumerate() {
            let z = &logits.data()[row * classes..(row + 1) * classes];
            // rank of the true class: how many logits beat it (ties go to the lower index)
            let better = z
                .iter()
                .enumerate()
                .filter(|&(j, &v)| v > z[label] || (v == z[label] && j < label))
                .count();
            hit1 += (better == 0) as usize;
            hit5 += (better < 5) as usize;
            loss -= probs[row * classes + label].as_f64().max(1e-300).ln();
        }
    }
    let n = split.len() as f64;
    Ok(Evaluation {
        top1: hit1 as f64 / n,
        top5: (classes >= 5).then(|| hit5 as f64 / n),
        loss: loss / n,
        samples: split.len(),
    })
}

/// Grouping used by [`aggregate_runs`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GroupKey {
    Criterion,
    Sparsity,
    CriterionSparsity,
    ArchCriterionSparsity,
}

impl GroupKey {
    pub fn key(self, r: &RunSummary) -> String {
        match self {
            GroupKey::Criterion => r.criterion.clone(),
            GroupKey::Sparsity => format!("{:.4}", r.sparsity),
            GroupKey::CriterionSparsity => format!("{}@{:.4}", r.criterion, r.sparsity),
            GroupKey::ArchCriterionSparsity => format!("{}/{}@{:.4}", r.arch, r.criterion, r.sparsity),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AggregateRow {
    pub group: String,
    pub runs: usize,
    pub mean: f64,
    /// Sample standard deviation (n − 1); zero for a single run.
    pub std: f64,
}

impl AggregateRow {
    /// Percent rendering such as `93.87±0.09`.
    pub fn pct(&self) -> String {
        format!("{:.2}±{:.2}", self.mean * 100.0, self.std * 100.0)
    }
}

pub fn mean_std(values: &[f64]) -> Result<(f64, f64)> {
    if values.is_empty() {
        return Err(Error::Usage("aggregate over an empty group".into()));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = if values.len() > 1 {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    Ok((mean, std))
}

/// Mean ± sample std of final top-1 per group, groups in sorted key order.
pub fn aggregate_runs(reports: &[RunSummary], key: GroupKey) -> Result<Vec<AggregateRow>> {
    if reports.is_empty() {
        return Err(Error::Usage("no runs to aggregate".into()));
    }
    let mut groups: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for r in reports {
        groups.entry(key.key(r)).or_default().push(r.top1);
    }
    groups
        .into_iter()
        .map(|(group, vals)| {
            let (mean, std) = mean_std(&vals)?;
            Ok(AggregateRow { group, runs: vals.len(), mean, std })
        })
        .collect()
}

pub fn write_aggregate_csv(rows: &[AggregateRow], path: impl AsRef<std::path::Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Usage(format!("{:?}", other)),
    })?;
    w.write_record(["group", "runs", "mean", "std", "top1_pct"])?;
    for r in rows {
        w.write_record([r.group.clone(), r.runs.to_string(), r.mean.to_string(), r.std.to_string(), r.pct()])?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{build_model, Arch};
    use proptest::prelude::*;

    fn m(bits: &[u8]) -> BinaryMask {
        BinaryMask::from_bits(&[bits.len()], bits.iter().map(|&b| b == 1).collect()).unwrap()
    }

    #[test]
    fn overlap_examples() {
        assert_eq!(mask_overlap(&[m(&[1, 0, 1])], &[m(&[1, 0, 1])]).unwrap(), 1.0);
        assert_eq!(mask_overlap(&[m(&[1, 1, 0, 0])], &[m(&[1, 0, 1, 0])]).unwrap(), 0.5);
        assert_eq!(mask_overlap(&[m(&[1, 1, 0, 0])], &[m(&[0, 0, 1, 1])]).unwrap(), 0.0);
    }

    #[test]
    fn overlap_uses_global_k() {
        let a = [m(&[1, 1]), m(&[1, 1, 1, 1, 1, 1])];
        let b = [m(&[0, 0]), m(&[1, 1, 1, 1, 1, 1])];
        assert_eq!(mask_overlap(&a, &b).unwrap(), 0.75);
        assert_eq!(per_layer_overlap(&a, &b).unwrap(), vec![0.0, 1.0]);
    }

    #[test]
    fn overlap_shape_mismatch_is_usage_error() {
        assert!(matches!(mask_overlap(&[m(&[1, 0])], &[m(&[1, 0, 1])]), Err(Error::Usage(_))));
        assert!(matches!(mask_overlap(&[m(&[1])], &[]), Err(Error::Usage(_))));
    }

    fn summary(criterion: &str, top1: f64) -> RunSummary {
        RunSummary { criterion: criterion.into(), top1, sparsity: 0.9, ..RunSummary::default() }
    }

    #[test]
    fn aggregate_mean_and_sample_std() {
        let rows = aggregate_runs(&[summary("mag", 0.93), summary("mag", 0.94), summary("mag", 0.95)], GroupKey::Criterion).unwrap();
        assert_eq!(rows.len(), 1);
        assert!((rows[0].mean - 0.94).abs() < 1e-12);
        assert!((rows[0].std - 0.01).abs() < 1e-12);
        assert_eq!(rows[0].pct(), "94.00±1.00");
    }

    #[test]
    fn single_run_has_zero_std() {
        let rows = aggregate_runs(&[summary("snip", 0.5)], GroupKey::CriterionSparsity).unwrap();
        assert_eq!(rows[0].std, 0.0);
        assert_eq!(rows[0].group, "snip@0.9000");
        assert!(matches!(aggregate_runs(&[], GroupKey::Criterion), Err(Error::Usage(_))));
    }

    #[test]
    fn constant_model_on_constant_labels_is_perfect() {
        // zero weights and a bias favouring class 3 predict 3 everywhere
        let mut model = build_model::<f64>(Arch::Mlp { hidden: 4 }, &[2], 5, 0).unwrap();
        for (name, t) in model.named_tensors_mut() {
            for v in t.data_mut() {
                *v = 0.0;
            }
            if name == "layers.3.bias" {
                t.data_mut()[3] = 1.0;
            }
        }
        let data = Dataset {
            name: "c".into(),
            sample_shape: vec![2],
            images: vec![0.5; 20],
            labels: vec![3; 10],
            num_classes: 5,
            augment: None,
        };
        let e = evaluate(&model, None, &data, 4).unwrap();
        assert_eq!(e.top1, 1.0);
        assert_eq!(e.top5, Some(1.0));
    }

    #[test]
    fn random_model_is_near_chance() {
        let d = crate::data::synth_gaussian_classes(10, 20, 100, 3.0, 4).unwrap();
        let mut acc = Vec::new();
        for seed in 0..5 {
            let model = build_model::<f64>(Arch::Mlp { hidden: 16 }, &[20], 10, seed).unwrap();
            acc.push(evaluate(&model, None, &d, 64).unwrap().top1);
        }
        let mean = acc.iter().sum::<f64>() / acc.len() as f64;
        // sd of a single 1000-sample accuracy at p = 0.1 is about 0.0095; a random
        // net is not an unbiased coin, so allow a wide band around chance
        assert!((mean - 0.1).abs() < 0.1, "mean accuracy {mean}");
    }

    #[test]
    fn evaluation_is_batch_size_invariant() {
        let d = crate::data::synth_gaussian_classes(3, 6, 40, 2.0, 1).unwrap();
        let model = build_model::<f64>(Arch::Mlp { hidden: 8 }, &[6], 3, 2).unwrap();
        let a = evaluate(&model, None, &d, 1).unwrap();
        let b = evaluate(&model, None, &d, 17).unwrap();
        let c = evaluate(&model, None, &d, 1000).unwrap();
        assert_eq!(a.top1, b.top1);
        assert_eq!(a.top1, c.top1);
        assert!((a.loss - c.loss).abs() < 1e-9);
    }

    proptest! {
        #[test]
        fn overlap_laws(a in proptest::collection::vec(any::<bool>(), 1..64), b_seed in any::<u64>()) {
            let b: Vec<bool> = a.iter().enumerate().map(|(i, &x)| x ^ ((b_seed >> (i % 64)) & 1 == 1)).collect();
            let ma = [BinaryMask::from_bits(&[a.len()], a.clone()).unwrap()];
            let mb = [BinaryMask::from_bits(&[b.len()], b.clone()).unwrap()];
            let ab = mask_overlap(&ma, &mb).unwrap();
            prop_assert_eq!(ab, mask_overlap(&mb, &ma).unwrap());
            prop_assert!((0.0..=1.0).contains(&ab));
            prop_assert_eq!(ab == 1.0, a == b);
        }
    }
}
