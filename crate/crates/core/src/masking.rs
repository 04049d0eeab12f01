//! Relaxed scores, top-p% hard thresholding and binary masks.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Number of entries a layer of `k` weights loses at sparsity `p`: `floor(p·k)`.
///
/// The product is nudged by 1e-9 before flooring so that values such as
/// `0.29 · 100 = 28.999999999999996` count as the intended 29.
pub fn prune_count(p: f64, k: usize) -> usize {
    let n = (p * k as f64 + 1e-9).floor() as usize;
    n.min(k)
}

pub fn check_sparsity(p: f64) -> Result<()> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::Config(format!("sparsity {} outside [0, 1)", p)));
    }
    Ok(())
}

/// A hard `{0,1}` mask over one parameter tensor.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    shape: Vec<usize>,
    bits: Vec<bool>,
    kept: usize,
}

impl BinaryMask {
    pub fn ones(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        BinaryMask { shape: shape.to_vec(), bits: vec![true; n], kept: n }
    }

    pub fn from_bits(shape: &[usize], bits: Vec<bool>) -> Result<Self> {
        if shape.iter().product::<usize>() != bits.len() {
            return Err(Error::dim(format!("mask shape {:?} with {} bits", shape, bits.len())));
        }
        let kept = bits.iter().filter(|&&b| b).count();
        Ok(BinaryMask { shape: shape.to_vec(), bits, kept })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn kept_count(&self) -> usize {
        self.kept
    }

    pub fn pruned_count(&self) -> usize {
        self.bits.len() - self.kept
    }

    /// Fraction of entries set to zero.
    pub fn sparsity(&self) -> f64 {
        if self.bits.is_empty() {
            0.0
        } else {
            self.pruned_count() as f64 / self.bits.len() as f64
        }
    }

    /// Apply to a tensor of matching shape, zeroing pruned entries.
    pub fn apply<F: Scalar>(&self, t: &Tensor<F>) -> Result<Tensor<F>> {
        if t.shape() != self.shape.as_slice() {
            return Err(Error::dim(format!("mask {:?} on tensor {:?}", self.shape, t.shape())));
        }
        let mut out = t.clone();
        for (v, &b) in out.data_mut().iter_mut().zip(&self.bits) {
            if !b {
                *v = F::zero();
            }
        }
        Ok(out)
    }
}

/// The thresholding function `h`: zero the `floor(p·k)` smallest scores, keep the rest.
///
/// Ties are resolved by flat index, the lower index being pruned first.
pub fn threshold_h<F: Scalar>(scores: &Tensor<F>, p: f64) -> BinaryMask {
    threshold_slice(scores.shape(), scores.data(), p)
}

pub(crate) fn threshold_slice<F: Scalar>(shape: &[usize], scores: &[F], p: f64) -> BinaryMask {
    let k = scores.len();
    let n = prune_count(p, k);
    let mut bits = vec![true; k];
    if n > 0 {
        let mut idx: Vec<usize> = (0..k).collect();
        let cmp = |&a: &usize, &b: &usize| scores[a].order(scores[b]).then(a.cmp(&b));
        if n < k {
            idx.select_nth_unstable_by(n - 1, cmp);
        }
        for &i in &idx[..n] {
            bits[i] = false;
        }
    }
    BinaryMask { shape: shape.to_vec(), bits, kept: k - n }
}

/// Ascending rank of every entry under the same (score, index) order `h` uses.
pub fn ranks<F: Scalar>(scores: &[F]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_unstable_by(|&a, &b| scores[a].order(scores[b]).then(a.cmp(&b)));
    let mut rank = vec![0; scores.len()];
    for (r, &i) in idx.iter().enumerate() {
        rank[i] = r;
    }
    rank
}

/// A frozen pre-trained weight with trainable relaxed scores in `[0,1]`.
///
/// The weight is borrowed from the model, so nothing in a search loop can
/// write to it; [`MaskedParam::checksum`] is recorded alongside as a runtime
/// witness.
#[derive(Debug, Clone)]
pub struct MaskedParam<'w, F> {
    pub frozen_weight: &'w Tensor<F>,
    pub scores: Tensor<F>,
    pub sparsity: f64,
}

impl<'w, F: Scalar> MaskedParam<'w, F> {
    pub fn new(frozen_weight: &'w Tensor<F>, scores: Tensor<F>, sparsity: f64) -> Result<Self> {
        check_sparsity(sparsity)?;
        if frozen_weight.shape() != scores.shape() {
            return Err(Error::dim(format!(
                "scores {:?} for weight {:?}",
                scores.shape(),
                frozen_weight.shape()
            )));
        }
        Ok(MaskedParam { frozen_weight, scores, sparsity })
    }

    /// Element count `k` of the layer.
    pub fn k(&self) -> usize {
        self.frozen_weight.len()
    }

    pub fn mask(&self) -> BinaryMask {
        threshold_h(&self.scores, self.sparsity)
    }

    pub fn checksum(&self) -> [u8; 32] {
        self.frozen_weight.checksum()
    }

    /// Project scores back onto `[0,1]`.
    pub fn clamp_scores(&mut self) {
        clamp_unit(self.scores.data_mut());
    }
}

pub fn clamp_unit<F: Scalar>(v: &mut [F]) {
    for s in v {
        *s = if *s <= F::zero() {
            F::zero()
        } else if *s >= F::one() {
            F::one()
        } else {
            *s
        };
    }
}

/// `1 − kept / k` over every prunable layer.
pub fn global_sparsity(masks: &[BinaryMask]) -> Result<f64> {
    let total: usize = masks.iter().map(BinaryMask::len).sum();
    if total == 0 {
        return Err(Error::Usage("no prunable parameters".into()));
    }
    let kept: usize = masks.iter().map(BinaryMask::kept_count).sum();
    Ok(1.0 - kept as f64 / total as f64)
}

/// Run-length text rendering, one line per layer:
/// `name d0xd1x.. bit:len,bit:len,...`.
pub fn masks_to_rle(names: &[String], masks: &[BinaryMask]) -> String {
    let mut out = String::new();
    for (name, m) in names.iter().zip(masks) {
        let dims: Vec<String> = m.shape.iter().map(usize::to_string).collect();
        let _ = write!(out, "{} {} ", name, dims.join("x"));
        let mut runs = Vec::new();
        let mut i = 0;
        while i < m.bits.len() {
            let b = m.bits[i];
            let start = i;
            while i < m.bits.len() && m.bits[i] == b {
                i += 1;
            }
            runs.push(format!("{}:{}", b as u8, i - start));
        }
        out.push_str(&runs.join(","));
        out.push('\n');
    }
    out
}

pub fn masks_from_rle(text: &str) -> Result<Vec<(String, BinaryMask)>> {
    let mut out = Vec::new();
    let mut offset = 0u64;
    for line in text.lines() {
        let bad = |detail: &str| Error::Format { what: "mask rle".into(), offset, detail: detail.into() };
        let mut parts = line.split_whitespace();
        let (Some(name), Some(dims)) = (parts.next(), parts.next()) else {
            return Err(bad("expected name and shape"));
        };
        let shape = dims
            .split('x')
            .map(|d| d.parse::<usize>())
            .collect::<Result<Vec<_>, _>>()
            .map_err(|_| bad("bad shape"))?;
        let mut bits = Vec::new();
        if let Some(runs) = parts.next() {
            for run in runs.split(',') {
                let (b, n) = run.split_once(':').ok_or_else(|| bad("bad run"))?;
                let n: usize = n.parse().map_err(|_| bad("bad run length"))?;
                let bit = match b {
                    "0" => false,
                    "1" => true,
                    _ => return Err(bad("bad run bit")),
                };
                bits.extend(std::iter::repeat_n(bit, n));
            }
        }
        out.push((name.to_string(), BinaryMask::from_bits(&shape, bits).map_err(|_| bad("length mismatch"))?));
        offset += line.len() as u64 + 1;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn bits(m: &BinaryMask) -> Vec<u8> {
        m.bits().iter().map(|&b| b as u8).collect()
    }

    fn scores(v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(&[v.len()], v).unwrap()
    }

    #[test]
    fn prunes_smallest_half() {
        let m = threshold_h(&scores(&[0.1, 0.5, 0.9, 0.3]), 0.5);
        assert_eq!(bits(&m), vec![0, 1, 1, 0]);
        assert_eq!(m.kept_count(), 2);
    }

    #[test]
    fn zero_sparsity_keeps_everything() {
        let m = threshold_h(&scores(&[0.4, 0.0, 1.0]), 0.0);
        assert_eq!(bits(&m), vec![1, 1, 1]);
    }

    #[test]
    fn ties_prune_lowest_index_first() {
        let m = threshold_h(&scores(&[0.2, 0.2, 0.7, 0.9]), 0.25);
        assert_eq!(bits(&m), vec![0, 1, 1, 1]);
        let m = threshold_h(&scores(&[0.5; 6]), 0.5);
        assert_eq!(bits(&m), vec![0, 0, 0, 1, 1, 1]);
    }

    #[test]
    fn prune_count_uses_floor() {
        assert_eq!(prune_count(0.9, 10), 9);
        assert_eq!(prune_count(0.9, 7), 6);
        assert_eq!(prune_count(0.29, 100), 29);
        assert_eq!(prune_count(0.99, 1), 0);
        assert_eq!(prune_count(0.5, 4096), 2048);
    }

    #[test]
    fn global_sparsity_cases() {
        let two = [threshold_h(&scores(&[0.1; 10]), 0.5), threshold_h(&scores(&[0.3; 10]), 0.5)];
        assert_eq!(global_sparsity(&two).unwrap(), 0.5);
        assert_eq!(global_sparsity(&[BinaryMask::ones(&[5])]).unwrap(), 0.0);
        assert!(matches!(global_sparsity(&[]), Err(Error::Usage(_))));
    }

    #[test]
    fn rle_round_trip() {
        let a = threshold_h(&scores(&[0.1, 0.5, 0.9, 0.3, 0.7, 0.2]), 0.5);
        let b = BinaryMask::ones(&[2, 2]);
        let names = vec!["conv1.weight".to_string(), "fc.weight".to_string()];
        let text = masks_to_rle(&names, &[a.clone(), b.clone()]);
        assert_eq!(text, "conv1.weight 6 0:1,1:2,0:1,1:1,0:1\nfc.weight 2x2 1:4\n");
        let back = masks_from_rle(&text).unwrap();
        assert_eq!(back[0].1, a);
        assert_eq!(back[1].1, b);
    }

    #[test]
    fn masked_param_rejects_shape_mismatch_and_bad_sparsity() {
        let w = Tensor::<f64>::zeros(&[2, 2]);
        assert!(MaskedParam::new(&w, Tensor::zeros(&[4]), 0.5).is_err());
        assert!(MaskedParam::new(&w, Tensor::zeros(&[2, 2]), 1.0).is_err());
        let mut p = MaskedParam::new(&w, Tensor::from_f64(&[2, 2], &[-0.5, 0.5, 1.5, 1.0]).unwrap(), 0.5).unwrap();
        p.clamp_scores();
        assert_eq!(p.scores.data(), &[0.0, 0.5, 1.0, 1.0]);
    }

    proptest! {
        #[test]
        fn exact_prune_count(v in proptest::collection::vec(0.0f64..1.0, 1..300), p in 0.0f64..0.999) {
            let m = threshold_h(&scores(&v), p);
            prop_assert_eq!(m.pruned_count(), prune_count(p, v.len()));
            prop_assert_eq!(m.kept_count(), m.bits().iter().filter(|&&b| b).count());
        }

        #[test]
        fn scale_invariant(v in proptest::collection::vec(0.0f64..1.0, 1..200), p in 0.0f64..0.999, c in 0.01f64..100.0) {
            let scaled: Vec<f64> = v.iter().map(|x| x * c).collect();
            prop_assert_eq!(threshold_h(&scores(&v), p), threshold_h(&scores(&scaled), p));
        }

        #[test]
        fn kept_scores_dominate_pruned(v in proptest::collection::vec(-5.0f64..5.0, 2..200), p in 0.01f64..0.99) {
            let m = threshold_h(&scores(&v), p);
            let max_pruned = v.iter().zip(m.bits()).filter(|(_, &b)| !b).map(|(x, _)| *x).fold(f64::NEG_INFINITY, f64::max);
            let min_kept = v.iter().zip(m.bits()).filter(|(_, &b)| b).map(|(x, _)| *x).fold(f64::INFINITY, f64::min);
            prop_assert!(max_pruned <= min_kept);
        }
    }
}
