// Big-endian IDX files (MNIST layout), optionally gzip-compressed.

use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;

use super::Dataset;
use crate::error::{Error, Result};

pub const MNIST_MEAN: f32 = 0.1307;
pub const MNIST_STD: f32 = 0.3081;

const IMAGE_MAGIC: u32 = 0x0000_0803;
const LABEL_MAGIC: u32 = 0x0000_0801;

/// Read `path`, falling back to `path.gz` (decompressed) when the plain file is absent.
pub fn read_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    if path.exists() {
        return fs::read(path).map_err(|e| Error::io(path, e));
    }
    let mut gz = path.as_os_str().to_owned();
    gz.push(".gz");
    let gz = PathBuf::from(gz);
    let file = fs::File::open(&gz).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    GzDecoder::new(file)
        .read_to_end(&mut out)
        .map_err(|e| Error::io(&gz, e))?;
    Ok(out)
}

/// Validate the header and return `(dims, payload)`.
pub fn parse_idx<'a>(bytes: &'a [u8], expected_magic: u32, what: &str) -> Result<(Vec<usize>, &'a [u8])> {
    let fmt = |offset: usize, detail: String| Error::Format { what: what.to_string(), offset: offset as u64, detail };
    if bytes.len() < 4 {
        return Err(fmt(bytes.len(), "truncated magic".into()));
    }
    let magic = u32::from_be_bytes(bytes[..4].try_into().unwrap());
    if magic != expected_magic {
        return Err(fmt(0, format!("magic {:#010x}, expected {:#010x}", magic, expected_magic)));
    }
    let ndims = (magic & 0xff) as usize;
    let header = 4 + 4 * ndims;
    if bytes.len() < header {
        return Err(fmt(bytes.len(), "truncated dimension header".into()));
    }
    let dims: Vec<usize> = (0..ndims)
        .map(|i| u32::from_be_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize)
        .collect();
    let need = header + dims.iter().product::<usize>();
    if bytes.len() < need {
        return Err(fmt(bytes.len(), format!("truncated payload: {} of {} bytes", bytes.len(), need)));
    }
    if bytes.len() > need {
        return Err(fmt(need, format!("{} trailing bytes", bytes.len() - need)));
    }
    Ok((dims, &bytes[header..]))
}

fn load_split(dir: &Path, prefix: &str) -> Result<Dataset> {
    let img_path = dir.join(format!("{}-images-idx3-ubyte", prefix));
    let lbl_path = dir.join(format!("{}-labels-idx1-ubyte", prefix));
    let img_bytes = read_maybe_gz(&img_path)?;
    let lbl_bytes = read_maybe_gz(&lbl_path)?;
    let (dims, pixels) = parse_idx(&img_bytes, IMAGE_MAGIC, &img_path.display().to_string())?;
    let (ldims, labels) = parse_idx(&lbl_bytes, LABEL_MAGIC, &lbl_path.display().to_string())?;
    if ldims[0] != dims[0] {
        return Err(Error::Data(format!("{} images but {} labels", dims[0], ldims[0])));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l > 9) {
        return Err(Error::Data(format!("digit label {} in {}", bad, lbl_path.display())));
    }
    Ok(Dataset {
        name: "mnist".into(),
        sample_shape: vec![1, dims[1], dims[2]],
        images: pixels
            .iter()
            .map(|&p| (p as f32 / 255.0 - MNIST_MEAN) / MNIST_STD)
            .collect(),
        labels: labels.to_vec(),
        num_classes: 10,
        augment: None,
    })
}

/// Load `(train, test)` from the four standard IDX files in `dir`.
pub fn load_mnist(dir: impl AsRef<Path>) -> Result<(Dataset, Dataset)> {
    let dir = dir.as_ref();
    Ok((load_split(dir, "train")?, load_split(dir, "t10k")?))
}
