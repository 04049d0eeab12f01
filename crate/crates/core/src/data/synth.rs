use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::Dataset;
use crate::error::{Error, Result};
use crate::seed::derive_seed;

/// Unit-variance Gaussian blobs whose class means sit `separation` standard
/// deviations apart.
///
/// With `dim >= classes` the means are `separation/√2 · e_c`, so every pair of
/// classes is exactly `separation` apart. With fewer dimensions the means are
/// spaced `separation` apart along the first axis.
/// Samples are interleaved by class (`label = i mod classes`).
pub fn synth_gaussian_classes(classes: usize, dim: usize, n_per_class: usize, separation: f64, seed: u64) -> Result<Dataset> {
    if classes < 2 {
        return Err(Error::Config(format!("need at least 2 classes, got {}", classes)));
    }
    if dim == 0 {
        return Err(Error::Config("dim must be positive".into()));
    }
    if classes > u8::MAX as usize + 1 {
        return Err(Error::Config(format!("at most 256 classes, got {}", classes)));
    }
    let mean = |c: usize, j: usize| -> f64 {
        if dim >= classes {
            if j == c {
                separation / std::f64::consts::SQRT_2
            } else {
                0.0
            }
        } else if j == 0 {
            separation * c as f64
        } else {
            0.0
        }
    };
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "synth"));
    let n = classes * n_per_class;
    let mut images = Vec::with_capacity(n * dim);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let c = i % classes;
        for j in 0..dim {
            let z: f64 = StandardNormal.sample(&mut rng);
            images.push((mean(c, j) + z) as f32);
        }
        labels.push(c as u8);
    }
    Ok(Dataset {
        name: "synthetic".into(),
        sample_shape: vec![dim],
        images,
        labels,
        num_classes: classes,
        augment: None,
    })
}
