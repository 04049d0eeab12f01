//! Checkpoint container: a text header followed by little-endian raw buffers.
//!
//! ```text
//! jackpot-checkpoint 1
//! meta arch lenet
//! tensor layers.0.weight f32 6x1x5x5
//! mask layers.0.weight 6x1x5x5
//! data
//! <buffers, in header order, no padding>
//! ```
//!
//! A `tensor` buffer holds `product(shape)` elements of its dtype. A `mask`
//! buffer holds `ceil(k/8)` bytes, bit `i` stored in byte `i/8` at position
//! `i%8` (least significant first); unused high bits are zero. Scalars use
//! the shape `-`. Meta keys and entry names contain no whitespace; meta values
//! run to the end of the line. The full layout is in `docs/checkpoint-format.md`.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::masking::BinaryMask;
use crate::nn::{build_model, Arch, Model};
use crate::tensor::{DType, Scalar, Tensor};

pub const MAGIC: &str = "jackpot-checkpoint 1";

#[derive(Debug, Clone, PartialEq)]
pub enum Entry {
    Tensor { name: String, dtype: DType, shape: Vec<usize>, bytes: Vec<u8> },
    Mask { name: String, mask: BinaryMask },
}

impl Entry {
    pub fn name(&self) -> &str {
        match self {
            Entry::Tensor { name, .. } | Entry::Mask { name, .. } => name,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Container {
    pub meta: BTreeMap<String, String>,
    pub entries: Vec<Entry>,
}

fn check_token(kind: &str, s: &str) -> Result<()> {
    if s.is_empty() || s.chars().any(char::is_whitespace) {
        return Err(Error::Usage(format!("{} '{}' must be nonempty and contain no whitespace", kind, s)));
    }
    Ok(())
}

fn shape_text(shape: &[usize]) -> String {
    if shape.is_empty() {
        "-".into()
    } else {
        shape.iter().map(usize::to_string).collect::<Vec<_>>().join("x")
    }
}

fn parse_shape(s: &str) -> Option<Vec<usize>> {
    if s == "-" {
        return Some(Vec::new());
    }
    s.split('x').map(|d| d.parse().ok()).collect()
}

pub fn pack_bits(bits: &[bool]) -> Vec<u8> {
    let mut out = vec![0u8; bits.len().div_ceil(8)];
    for (i, &b) in bits.iter().enumerate() {
        if b {
            out[i / 8] |= 1 << (i % 8);
        }
    }
    out
}

pub fn unpack_bits(bytes: &[u8], k: usize) -> Vec<bool> {
    (0..k).map(|i| bytes[i / 8] >> (i % 8) & 1 == 1).collect()
}

impl Container {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set_meta(&mut self, key: &str, value: impl ToString) -> Result<()> {
        check_token("meta key", key)?;
        let value = value.to_string();
        if value.contains('\n') || value.contains('\r') {
            return Err(Error::Usage(format!("meta value for '{}' spans lines", key)));
        }
        self.meta.insert(key.to_string(), value);
        Ok(())
    }

    pub fn meta(&self, key: &str) -> Result<&str> {
        self.meta
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| Error::Data(format!("checkpoint has no '{}' metadata", key)))
    }

    fn check_new_name(&self, name: &str) -> Result<()> {
        check_token("entry name", name)?;
        if self.entries.iter().any(|e| e.name() == name) {
            return Err(Error::Usage(format!("duplicate entry '{}'", name)));
        }
        Ok(())
    }

    pub fn push_tensor<F: Scalar>(&mut self, name: &str, t: &Tensor<F>) -> Result<()> {
        self.check_new_name(name)?;
        let mut bytes = Vec::with_capacity(t.len() * F::DTYPE.size());
        for &v in t.data() {
            v.write_le(&mut bytes);
        }
        self.entries.push(Entry::Tensor { name: name.into(), dtype: F::DTYPE, shape: t.shape().to_vec(), bytes });
        Ok(())
    }

    pub fn push_mask(&mut self, name: &str, mask: &BinaryMask) -> Result<()> {
        self.check_new_name(name)?;
        self.entries.push(Entry::Mask { name: name.into(), mask: mask.clone() });
        Ok(())
    }

    fn entry(&self, name: &str) -> Result<&Entry> {
        self.entries
            .iter()
            .find(|e| e.name() == name)
            .ok_or_else(|| Error::Data(format!("checkpoint has no entry '{}'", name)))
    }

    /// Read a tensor, converting from its stored dtype to `F`.
    pub fn tensor<F: Scalar>(&self, name: &str) -> Result<Tensor<F>> {
        match self.entry(name)? {
            Entry::Tensor { dtype, shape, bytes, .. } => {
                let values: Vec<F> = match dtype {
                    DType::F32 => bytes.chunks_exact(4).map(|c| F::from_f64_lossy(f32::read_le(c) as f64)).collect(),
                    DType::F64 => bytes.chunks_exact(8).map(|c| F::from_f64_lossy(f64::read_le(c))).collect(),
                };
                Tensor::new(shape.clone(), values)
            }
            Entry::Mask { .. } => Err(Error::Data(format!("entry '{}' is a mask, not a tensor", name))),
        }
    }

    pub fn mask(&self, name: &str) -> Result<BinaryMask> {
        match self.entry(name)? {
            Entry::Mask { mask, .. } => Ok(mask.clone()),
            Entry::Tensor { .. } => Err(Error::Data(format!("entry '{}' is a tensor, not a mask", name))),
        }
    }

    pub fn masks(&self) -> Vec<(String, BinaryMask)> {
        self.entries
            .iter()
            .filter_map(|e| match e {
                Entry::Mask { name, mask } => Some((name.clone(), mask.clone())),
                _ => None,
            })
            .collect()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut head = String::from(MAGIC);
        head.push('\n');
        for (k, v) in &self.meta {
            head.push_str(&format!("meta {} {}\n", k, v));
        }
        for e in &self.entries {
            match e {
                Entry::Tensor { name, dtype, shape, .. } => head.push_str(&format!("tensor {} {} {}\n", name, dtype.name(), shape_text(shape))),
                Entry::Mask { name, mask } => head.push_str(&format!("mask {} {}\n", name, shape_text(mask.shape()))),
            }
        }
        head.push_str("data\n");
        let mut out = head.into_bytes();
        for e in &self.entries {
            match e {
                Entry::Tensor { bytes, .. } => out.extend_from_slice(bytes),
                Entry::Mask { mask, .. } => out.extend(pack_bits(mask.bits())),
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], what: &str) -> Result<Self> {
        let fmt = |offset: usize, detail: String| Error::Format { what: what.to_string(), offset: offset as u64, detail };
        let mut pos = 0;
        let next_line = |pos: &mut usize| -> Result<(usize, String)> {
            let start = *pos;
            let end = bytes[start..]
                .iter()
                .position(|&b| b == b'\n')
                .map(|i| start + i)
                .ok_or_else(|| fmt(start, "unterminated header line".into()))?;
            *pos = end + 1;
            let line = std::str::from_utf8(&bytes[start..end]).map_err(|_| fmt(start, "header is not UTF-8".into()))?;
            Ok((start, line.to_string()))
        };
        let (_, magic) = next_line(&mut pos)?;
        if magic != MAGIC {
            return Err(fmt(0, format!("expected '{}', found '{}'", MAGIC, magic)));
        }
        enum Pending {
            Tensor(String, DType, Vec<usize>),
            Mask(String, Vec<usize>),
        }
        let mut meta = BTreeMap::new();
        let mut pending = Vec::new();
        loop {
            let (at, line) = next_line(&mut pos)?;
            if line == "data" {
                break;
            }
            let (kind, rest) = line.split_once(' ').unwrap_or((line.as_str(), ""));
            match kind {
                "meta" => {
                    let (k, v) = rest.split_once(' ').unwrap_or((rest, ""));
                    meta.insert(k.to_string(), v.to_string());
                }
                "tensor" => {
                    let parts: Vec<&str> = rest.split(' ').collect();
                    let [name, dtype, shape] = parts[..] else { return Err(fmt(at, format!("bad tensor line '{}'", line))) };
                    let dtype = DType::parse(dtype).ok_or_else(|| fmt(at, format!("unknown dtype '{}'", dtype)))?;
                    let shape = parse_shape(shape).ok_or_else(|| fmt(at, format!("bad shape '{}'", shape)))?;
                    pending.push(Pending::Tensor(name.to_string(), dtype, shape));
                }
                "mask" => {
                    let parts: Vec<&str> = rest.split(' ').collect();
                    let [name, shape] = parts[..] else { return Err(fmt(at, format!("bad mask line '{}'", line))) };
                    let shape = parse_shape(shape).ok_or_else(|| fmt(at, format!("bad shape '{}'", shape)))?;
                    pending.push(Pending::Mask(name.to_string(), shape));
                }
                _ => return Err(fmt(at, format!("unknown header line '{}'", line))),
            }
        }
        let mut entries = Vec::with_capacity(pending.len());
        for p in pending {
            let (len, name) = match &p {
                Pending::Tensor(name, dtype, shape) => (shape.iter().product::<usize>() * dtype.size(), name),
                Pending::Mask(name, shape) => (shape.iter().product::<usize>().div_ceil(8), name),
            };
            if pos + len > bytes.len() {
                return Err(fmt(bytes.len(), format!("buffer for '{}' needs {} bytes, {} left", name, len, bytes.len() - pos)));
            }
            let buf = &bytes[pos..pos + len];
            entries.push(match p {
                Pending::Tensor(name, dtype, shape) => Entry::Tensor { name, dtype, shape, bytes: buf.to_vec() },
                Pending::Mask(name, shape) => {
                    let k = shape.iter().product();
                    Entry::Mask { name, mask: BinaryMask::from_bits(&shape, unpack_bits(buf, k))? }
                }
            });
            pos += len;
        }
        if pos != bytes.len() {
            return Err(fmt(pos, format!("{} trailing bytes", bytes.len() - pos)));
        }
        Ok(Container { meta, entries })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, &path.display().to_string())
    }
}

/// Container holding every tensor of `model` plus the metadata needed to rebuild it.
pub fn model_container<F: Scalar>(model: &Model<F>) -> Result<Container> {
    let mut c = Container::new();
    c.set_meta("arch", model.arch)?;
    c.set_meta("input_shape", shape_text(&model.input_shape))?;
    c.set_meta("num_classes", model.num_classes)?;
    c.set_meta("dtype", F::DTYPE.name())?;
    for (name, t) in model.named_tensors() {
        c.push_tensor(&name, t)?;
    }
    Ok(c)
}

/// Rebuild a model from a container written by [`model_container`].
pub fn model_from_container<F: Scalar>(c: &Container) -> Result<Model<F>> {
    let arch: Arch = c.meta("arch")?.parse()?;
    let input_shape = parse_shape(c.meta("input_shape")?).ok_or_else(|| Error::Data("bad input_shape metadata".into()))?;
    let num_classes: usize = c.meta("num_classes")?.parse().map_err(|_| Error::Data("bad num_classes metadata".into()))?;
    let mut model = build_model::<F>(arch, &input_shape, num_classes, 0)?;
    for (name, t) in model.named_tensors_mut() {
        let stored: Tensor<F> = c.tensor(&name)?;
        if stored.shape() != t.shape() {
            return Err(Error::Data(format!("'{}' has shape {:?}, model expects {:?}", name, stored.shape(), t.shape())));
        }
        *t = stored;
    }
    Ok(model)
}

pub fn save_model<F: Scalar>(path: impl AsRef<Path>, model: &Model<F>, meta: &[(&str, String)]) -> Result<()> {
    let mut c = model_container(model)?;
    for (k, v) in meta {
        c.set_meta(k, v)?;
    }
    c.write(path)
}

pub fn load_model<F: Scalar>(path: impl AsRef<Path>) -> Result<Model<F>> {
    model_from_container(&Container::read(path)?)
}

pub fn save_masks(path: impl AsRef<Path>, names: &[String], masks: &[BinaryMask], meta: &[(&str, String)]) -> Result<()> {
    let mut c = Container::new();
    for (k, v) in meta {
        c.set_meta(k, v)?;
    }
    for (n, m) in names.iter().zip(masks) {
        c.push_mask(n, m)?;
    }
    c.write(path)
}

/// Masks in stored order.
pub fn load_masks(path: impl AsRef<Path>) -> Result<(Vec<String>, Vec<BinaryMask>)> {
    Ok(Container::read(path)?.masks().into_iter().unzip())
}
