// CIFAR-10 binary batches: 3073-byte records, one label byte then 3072 CHW pixels.

use std::path::Path;

use super::{read_maybe_gz, Augment, Dataset};
use crate::error::{Error, Result};

pub const CIFAR_RECORD_BYTES: usize = 3073;
pub const CIFAR_MEAN: [f32; 3] = [0.4914, 0.4822, 0.4465];
pub const CIFAR_STD: [f32; 3] = [0.2470, 0.2435, 0.2616];

pub fn decode_cifar10_records(bytes: &[u8], what: &str) -> Result<Dataset> {
    if bytes.len() % CIFAR_RECORD_BYTES != 0 {
        return Err(Error::Format {
            what: what.to_string(),
            offset: (bytes.len() / CIFAR_RECORD_BYTES * CIFAR_RECORD_BYTES) as u64,
            detail: format!("{} bytes is not a whole number of {}-byte records", bytes.len(), CIFAR_RECORD_BYTES),
        });
    }
    let n = bytes.len() / CIFAR_RECORD_BYTES;
    let mut images = Vec::with_capacity(n * 3072);
    let mut labels = Vec::with_capacity(n);
    for (r, rec) in bytes.chunks_exact(CIFAR_RECORD_BYTES).enumerate() {
        if rec[0] > 9 {
            return Err(Error::Format {
                what: what.to_string(),
                offset: (r * CIFAR_RECORD_BYTES) as u64,
                detail: format!("label byte {}", rec[0]),
            });
        }
        labels.push(rec[0]);
        for (i, &p) in rec[1..].iter().enumerate() {
            let c = i / 1024;
            images.push((p as f32 / 255.0 - CIFAR_MEAN[c]) / CIFAR_STD[c]);
        }
    }
    Ok(Dataset {
        name: "cifar10".into(),
        sample_shape: vec![3, 32, 32],
        images,
        labels,
        num_classes: 10,
        augment: None,
    })
}

fn concat(parts: Vec<Dataset>) -> Dataset {
    let mut iter = parts.into_iter();
    let mut first = iter.next().expect("at least one part");
    for p in iter {
        first.images.extend(p.images);
        first.labels.extend(p.labels);
    }
    first
}

/// Load `(train, test)` from `data_batch_{1..5}.bin` and `test_batch.bin`.
/// The training split carries crop(pad 4) + horizontal-flip augmentation.
pub fn load_cifar10(dir: impl AsRef<Path>) -> Result<(Dataset, Dataset)> {
    let dir = dir.as_ref();
    let mut train = Vec::new();
    for i in 1..=5 {
        let path = dir.join(format!("data_batch_{}.bin", i));
        train.push(decode_cifar10_records(&read_maybe_gz(&path)?, &path.display().to_string())?);
    }
    let test_path = dir.join("test_batch.bin");
    let test = decode_cifar10_records(&read_maybe_gz(&test_path)?, &test_path.display().to_string())?;
    let mut train = concat(train);
    train.augment = Some(Augment { pad: 4, hflip: true });
    Ok((train, test))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn records(n: usize) -> Vec<u8> {
        let mut out = Vec::with_capacity(n * CIFAR_RECORD_BYTES);
        for r in 0..n {
            out.push((r % 10) as u8);
            out.extend((0..3072).map(|i| ((i + r) % 256) as u8));
        }
        out
    }

    #[test]
    fn full_batch_file_holds_ten_thousand_records() {
        let d = decode_cifar10_records(&records(10_000), "data_batch_1.bin").unwrap();
        assert_eq!(d.len(), 10_000);
        assert_eq!(d.sample_shape, vec![3, 32, 32]);
    }

    #[test]
    fn record_size_mismatch_is_format_error() {
        let mut b = records(2);
        b.pop();
        assert!(matches!(decode_cifar10_records(&b, "x"), Err(Error::Format { offset: 3073, .. })));
    }

    #[test]
    fn channels_are_normalised_separately() {
        let mut b = vec![3u8];
        b.extend(std::iter::repeat_n(255u8, 3072));
        let d = decode_cifar10_records(&b, "x").unwrap();
        assert!((d.images[0] - (1.0 - CIFAR_MEAN[0]) / CIFAR_STD[0]).abs() < 1e-6);
        assert!((d.images[2048] - (1.0 - CIFAR_MEAN[2]) / CIFAR_STD[2]).abs() < 1e-6);
    }

    #[test]
    fn loader_reads_six_files_and_enables_augmentation() {
        let dir = tempfile::tempdir().unwrap();
        for i in 1..=5 {
            std::fs::write(dir.path().join(format!("data_batch_{i}.bin")), records(3)).unwrap();
        }
        std::fs::write(dir.path().join("test_batch.bin"), records(2)).unwrap();
        let (train, test) = load_cifar10(dir.path()).unwrap();
        assert_eq!((train.len(), test.len()), (15, 2));
        assert!(train.augment.is_some() && test.augment.is_none());
    }
}
