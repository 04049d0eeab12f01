//! In-memory classification datasets and deterministic batch iteration.

mod cifar;
mod idx;
mod synth;

pub use cifar::{decode_cifar10_records, load_cifar10, CIFAR_MEAN, CIFAR_RECORD_BYTES, CIFAR_STD};
pub use idx::{load_mnist, parse_idx, read_maybe_gz, MNIST_MEAN, MNIST_STD};
pub use synth::synth_gaussian_classes;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::seed::derive_seed;
use crate::tensor::{Scalar, Tensor};

/// Environment variable consulted for the dataset root when no flag is given.
pub const DATA_DIR_ENV: &str = "JACKPOT_DATA_DIR";

/// Random crop (zero padding of `pad` pixels) followed by a coin-flip mirror.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Augment {
    pub pad: usize,
    pub hflip: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub name: String,
    /// Per-sample extents, e.g. `[1, 28, 28]`.
    pub sample_shape: Vec<usize>,
    /// Normalised pixels, sample-major.
    pub images: Vec<f32>,
    pub labels: Vec<u8>,
    pub num_classes: usize,
    pub augment: Option<Augment>,
}

pub struct Batch<F> {
    pub images: Tensor<F>,
    pub labels: Vec<usize>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn sample_len(&self) -> usize {
        self.sample_shape.iter().product()
    }

    pub fn sample(&self, i: usize) -> &[f32] {
        let n = self.sample_len();
        &self.images[i * n..(i + 1) * n]
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let mut images = Vec::with_capacity(indices.len() * self.sample_len());
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            images.extend_from_slice(self.sample(i));
            labels.push(self.labels[i]);
        }
        Dataset { images, labels, ..self.clone_meta() }
    }

    fn clone_meta(&self) -> Dataset {
        Dataset {
            name: self.name.clone(),
            sample_shape: self.sample_shape.clone(),
            images: Vec::new(),
            labels: Vec::new(),
            num_classes: self.num_classes,
            augment: self.augment,
        }
    }

    /// Class-balanced subset of `n` samples, original order preserved.
    pub fn stratified_subset(&self, n: usize, seed: u64) -> Result<Dataset> {
        if n > self.len() {
            return Err(Error::Data(format!("subset of {} from {} samples", n, self.len())));
        }
        let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); self.num_classes];
        for (i, &l) in self.labels.iter().enumerate() {
            by_class[l as usize].push(i);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "subset"));
        let total = self.len();
        let mut quotas: Vec<usize> = by_class.iter().map(|c| n * c.len() / total).collect();
        let mut short = n - quotas.iter().sum::<usize>();
        for (q, c) in quotas.iter_mut().zip(&by_class) {
            if short == 0 {
                break;
            }
            if *q < c.len() {
                *q += 1;
                short -= 1;
            }
        }
        let mut picked = Vec::with_capacity(n);
        for (mut members, q) in by_class.into_iter().zip(quotas) {
            members.shuffle(&mut rng);
            picked.extend_from_slice(&members[..q]);
        }
        picked.sort_unstable();
        Ok(self.subset(&picked))
    }

    /// Sample order for one epoch: a shuffle that depends only on `(seed, epoch)`.
    pub fn epoch_order(&self, seed: u64, epoch: usize) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &format!("order/{}", epoch)));
        order.shuffle(&mut rng);
        order
    }

    /// Gather a batch. Augmentation runs only when both the dataset enables it
    /// and an RNG is supplied.
    pub fn batch<F: Scalar>(&self, indices: &[usize], rng: Option<&mut ChaCha8Rng>) -> Batch<F> {
        let n = self.sample_len();
        let mut data = Vec::with_capacity(indices.len() * n);
        match (self.augment, rng) {
            (Some(aug), Some(rng)) if self.sample_shape.len() == 3 => {
                for &i in indices {
                    let img = augment_image(self.sample(i), &self.sample_shape, aug, rng);
                    data.extend(img.into_iter().map(|v| F::from_f64_lossy(v as f64)));
                }
            }
            _ => {
                for &i in indices {
                    data.extend(self.sample(i).iter().map(|&v| F::from_f64_lossy(v as f64)));
                }
            }
        }
        let mut shape = vec![indices.len()];
        shape.extend_from_slice(&self.sample_shape);
        Batch {
            images: Tensor::new(shape, data).expect("batch shape"),
            labels: indices.iter().map(|&i| self.labels[i] as usize).collect(),
        }
    }

    /// Consecutive batches over `order`; the last one may be short.
    pub fn batches<'a, F: Scalar>(&'a self, order: &'a [usize], batch_size: usize) -> impl Iterator<Item = Batch<F>> + 'a {
        order.chunks(batch_size.max(1)).map(move |idx| self.batch(idx, None))
    }
}

fn augment_image(src: &[f32], shape: &[usize], aug: Augment, rng: &mut ChaCha8Rng) -> Vec<f32> {
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    let dy = rng.gen_range(0..=2 * aug.pad) as isize - aug.pad as isize;
    let dx = rng.gen_range(0..=2 * aug.pad) as isize - aug.pad as isize;
    let flip = aug.hflip && rng.gen_bool(0.5);
    let mut out = vec![0.0f32; src.len()];
    for ch in 0..c {
        for y in 0..h {
            let sy = y as isize + dy;
            if sy < 0 || sy >= h as isize {
                continue;
            }
            for x in 0..w {
                let xx = if flip { w - 1 - x } else { x };
                let sx = xx as isize + dx;
                if sx < 0 || sx >= w as isize {
                    continue;
                }
                out[(ch * h + y) * w + x] = src[(ch * h + sy as usize) * w + sx as usize];
            }
        }
    }
    out
}
