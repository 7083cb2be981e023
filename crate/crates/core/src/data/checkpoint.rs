//! Bit-exact model persistence.
//!
//! Checkpoints are flat named-tensor archives in a fixed little-endian
//! layout, so a file written on one machine loads bitwise identically on any
//! other:
//!
//! ```text
//! magic "GDLC" | version: u32 | entry count: u64
//! per entry:
//!   name length: u32 | name: UTF-8 bytes
//!   dtype: u8 (0 = f32, 1 = f64)
//!   rank: u32 | dims: rank × u64
//!   payload: numel × dtype-size raw IEEE-754 bytes
//! ```
//!
//! [`save_checkpoint`]/[`load_checkpoint`] persist a whole model: build
//! metadata rides along as reserved `__meta.*` scalar entries, the model
//! skeleton is rebuilt from it on load, and every parameter (including
//! batch-norm running statistics) is restored byte for byte. Any deviation —
//! wrong magic, unknown version, truncation, dimension overflow, missing or
//! surplus entries, dtype mismatch — is a [`Error::CorruptArchive`]; no
//! partial model is ever returned.

use std::path::Path;

use crate::error::{Error, Result};
use crate::models::{
    freeze_backbone, rebuild_from_meta, ModelGraph, ModelKind, ModelMeta, Param, ParameterSet,
};
use crate::tensor::{DType, Element, Tensor};

pub const MAGIC: [u8; 4] = *b"GDLC";
pub const FORMAT_VERSION: u32 = 1;

/// Rejection threshold for the per-entry rank field. Real models top out at
/// rank 4; anything past this is a damaged or hostile file.
const MAX_RANK: u32 = 8;

/// A tensor of either supported precision, as stored in an archive.
#[derive(Debug, Clone, PartialEq)]
pub enum AnyTensor {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
}

impl AnyTensor {
    pub fn dtype(&self) -> DType {
        match self {
            AnyTensor::F32(_) => DType::F32,
            AnyTensor::F64(_) => DType::F64,
        }
    }

    pub fn shape(&self) -> &[usize] {
        match self {
            AnyTensor::F32(t) => t.shape(),
            AnyTensor::F64(t) => t.shape(),
        }
    }

    fn write_payload(&self, out: &mut Vec<u8>) {
        match self {
            AnyTensor::F32(t) => t.data().iter().for_each(|v| v.write_le(out)),
            AnyTensor::F64(t) => t.data().iter().for_each(|v| v.write_le(out)),
        }
    }
}

/// An ordered list of named tensors — the in-memory form of one archive.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Archive {
    pub entries: Vec<(String, AnyTensor)>,
}

/// Serializes an archive to its on-disk byte layout.
pub fn archive_bytes(archive: &Archive) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(archive.entries.len() as u64).to_le_bytes());
    for (name, tensor) in &archive.entries {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(tensor.dtype().code());
        let shape = tensor.shape();
        out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
        for &d in shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        tensor.write_payload(&mut out);
    }
    out
}

pub fn write_archive(path: &Path, archive: &Archive) -> Result<()> {
    std::fs::write(path, archive_bytes(archive)).map_err(|e| Error::io(path, e))
}

/// Byte reader that turns every overrun into a truncation error.
struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::CorruptArchive(format!("truncated while reading {what} at byte {}", self.pos))
        })?;
        let slice = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(slice)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }
}

/// Parses the on-disk byte layout back into an archive.
pub fn parse_archive(bytes: &[u8]) -> Result<Archive> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::CorruptArchive("bad magic (expected GDLC)".into()));
    }
    let version = r.u32("version")?;
    if version != FORMAT_VERSION {
        return Err(Error::CorruptArchive(format!(
            "unsupported format version {version} (expected {FORMAT_VERSION})"
        )));
    }
    let count = r.u64("entry count")?;
    let mut entries = Vec::new();
    for i in 0..count {
        let name_len = r.u32("name length")? as usize;
        let name = std::str::from_utf8(r.take(name_len, "name")?)
            .map_err(|_| Error::CorruptArchive(format!("entry {i} name is not UTF-8")))?
            .to_string();
        let dtype_code = r.u8("dtype")?;
        let dtype = DType::from_code(dtype_code).ok_or_else(|| {
            Error::CorruptArchive(format!("entry `{name}` has unknown dtype code {dtype_code}"))
        })?;
        let rank = r.u32("rank")?;
        if rank > MAX_RANK {
            return Err(Error::CorruptArchive(format!(
                "entry `{name}` claims rank {rank} (limit {MAX_RANK})"
            )));
        }
        let mut shape = Vec::with_capacity(rank as usize);
        let mut numel = 1usize;
        for _ in 0..rank {
            let d: usize = r
                .u64("dimension")?
                .try_into()
                .map_err(|_| Error::CorruptArchive(format!("entry `{name}` dimension overflow")))?;
            numel = numel.checked_mul(d).ok_or_else(|| {
                Error::CorruptArchive(format!("entry `{name}` dimension overflow"))
            })?;
            shape.push(d);
        }
        let payload_len = numel.checked_mul(dtype.size_bytes()).ok_or_else(|| {
            Error::CorruptArchive(format!("entry `{name}` dimension overflow"))
        })?;
        let payload = r.take(payload_len, "payload")?;
        let tensor = match dtype {
            DType::F32 => AnyTensor::F32(decode_tensor::<f32>(&name, shape, payload)?),
            DType::F64 => AnyTensor::F64(decode_tensor::<f64>(&name, shape, payload)?),
        };
        entries.push((name, tensor));
    }
    if r.remaining() != 0 {
        return Err(Error::CorruptArchive(format!(
            "{} trailing byte(s) after the last entry",
            r.remaining()
        )));
    }
    Ok(Archive { entries })
}

fn decode_tensor<E: Element>(name: &str, shape: Vec<usize>, payload: &[u8]) -> Result<Tensor<E>> {
    let data: Vec<E> =
        payload.chunks_exact(E::DTYPE.size_bytes()).map(E::read_le).collect();
    Tensor::from_vec(shape, data)
        .map_err(|_| Error::CorruptArchive(format!("entry `{name}` has an invalid shape")))
}

pub fn read_archive(path: &Path) -> Result<Archive> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_archive(&bytes)
}

/// Re-types a tensor through the byte codec — bit-exact, unlike a numeric
/// cast, which need not preserve NaN payloads.
fn wrap_tensor<E: Element>(t: &Tensor<E>) -> AnyTensor {
    let mut bytes = Vec::with_capacity(t.numel() * E::DTYPE.size_bytes());
    t.data().iter().for_each(|v| v.write_le(&mut bytes));
    let shape = t.shape().to_vec();
    match E::DTYPE {
        DType::F32 => AnyTensor::F32(
            Tensor::from_vec(shape, bytes.chunks_exact(4).map(f32::read_le).collect())
                .expect("same shape, same element count"),
        ),
        DType::F64 => AnyTensor::F64(
            Tensor::from_vec(shape, bytes.chunks_exact(8).map(f64::read_le).collect())
                .expect("same shape, same element count"),
        ),
    }
}

fn unwrap_tensor<E: Element>(name: &str, t: &AnyTensor) -> Result<Tensor<E>> {
    if t.dtype() != E::DTYPE {
        return Err(Error::CorruptArchive(format!(
            "entry `{name}` is {}, expected {}",
            t.dtype(),
            E::DTYPE
        )));
    }
    let mut bytes = Vec::new();
    t.write_payload(&mut bytes);
    let data = bytes.chunks_exact(E::DTYPE.size_bytes()).map(E::read_le).collect();
    Ok(Tensor::from_vec(t.shape().to_vec(), data).expect("same shape, same element count"))
}

/// Saves a bare parameter set, entries in name order.
pub fn save_params<E: Element>(params: &ParameterSet<E>, path: &Path) -> Result<()> {
    let entries =
        params.iter().map(|(name, p)| (name.clone(), wrap_tensor(&p.tensor))).collect();
    write_archive(path, &Archive { entries })
}

/// Loads a bare parameter set. Flags are not stored in the archive, so every
/// parameter comes back trainable and unfrozen; [`load_checkpoint`] restores
/// flags structurally from model metadata instead.
pub fn load_params<E: Element>(path: &Path) -> Result<ParameterSet<E>> {
    let archive = read_archive(path)?;
    let mut params = ParameterSet::new();
    for (name, tensor) in &archive.entries {
        let tensor = unwrap_tensor::<E>(name, tensor)?;
        params.insert(name.clone(), Param { tensor, trainable: true, frozen: false });
    }
    Ok(params)
}

/// Reserved entry-name prefix for model metadata.
const META_PREFIX: &str = "__meta.";

fn meta_entry(name: &str, value: u64) -> (String, AnyTensor) {
    (format!("{META_PREFIX}{name}"), AnyTensor::F64(Tensor::scalar(value as f64)))
}

/// Saves a complete model: metadata entries first, then every parameter in
/// name order.
pub fn save_checkpoint<E: Element>(model: &ModelGraph<E>, path: &Path) -> Result<()> {
    let meta = model.meta;
    let mut entries = vec![
        meta_entry("kind", meta.kind.code()),
        meta_entry("latent_dim", meta.latent_dim as u64),
        meta_entry("base_channels", meta.base_channels as u64),
        meta_entry("image_size", meta.image_size as u64),
        meta_entry("num_classes", meta.num_classes as u64),
        meta_entry("frozen", u64::from(model.backbone_frozen())),
    ];
    entries.extend(
        model.params.iter().map(|(name, p)| (name.clone(), wrap_tensor(&p.tensor))),
    );
    write_archive(path, &Archive { entries })
}

/// Restores a model saved by [`save_checkpoint`]: rebuilds the skeleton from
/// the metadata entries, then overwrites every parameter bitwise. The loaded
/// model's parameter checksum equals the saved model's.
pub fn load_checkpoint<E: Element>(path: &Path) -> Result<ModelGraph<E>> {
    let archive = read_archive(path)?;
    let mut meta_values = std::collections::BTreeMap::new();
    let mut tensors = std::collections::BTreeMap::new();
    for (name, tensor) in &archive.entries {
        if let Some(key) = name.strip_prefix(META_PREFIX) {
            let scalar = match tensor {
                AnyTensor::F64(t) if t.numel() == 1 => t.data()[0],
                _ => {
                    return Err(Error::CorruptArchive(format!(
                        "metadata entry `{name}` is not an f64 scalar"
                    )))
                }
            };
            if scalar < 0.0 || scalar.fract() != 0.0 {
                return Err(Error::CorruptArchive(format!(
                    "metadata entry `{name}` holds {scalar}, not a whole number"
                )));
            }
            meta_values.insert(key.to_string(), scalar as u64);
        } else {
            tensors.insert(name.clone(), tensor);
        }
    }
    let mut meta_value = |key: &str| {
        meta_values
            .remove(key)
            .ok_or_else(|| Error::CorruptArchive(format!("missing metadata entry `{META_PREFIX}{key}`")))
    };
    let kind_code = meta_value("kind")?;
    let kind = ModelKind::from_code(kind_code).ok_or_else(|| {
        Error::CorruptArchive(format!("unknown model kind code {kind_code}"))
    })?;
    let meta = ModelMeta {
        kind,
        latent_dim: meta_value("latent_dim")? as usize,
        base_channels: meta_value("base_channels")? as usize,
        image_size: meta_value("image_size")? as usize,
        num_classes: meta_value("num_classes")? as usize,
    };
    let frozen = meta_value("frozen")? != 0;

    let mut model = rebuild_from_meta::<E>(meta)
        .map_err(|e| Error::CorruptArchive(format!("metadata does not describe a buildable model: {e}")))?;
    for (name, p) in model.params.iter_mut() {
        let stored = tensors.remove(name).ok_or_else(|| {
            Error::CorruptArchive(format!("missing parameter entry `{name}`"))
        })?;
        let tensor = unwrap_tensor::<E>(name, stored)?;
        if tensor.shape() != p.tensor.shape() {
            return Err(Error::CorruptArchive(format!(
                "parameter `{name}` has shape {:?}, expected {:?}",
                tensor.shape(),
                p.tensor.shape()
            )));
        }
        p.tensor = tensor;
    }
    if let Some((name, _)) = tensors.into_iter().next() {
        return Err(Error::CorruptArchive(format!("unexpected entry `{name}`")));
    }
    if frozen {
        if model.head_prefix.is_none() {
            return Err(Error::CorruptArchive(
                "frozen flag set on a model without a fine-tune head".into(),
            ));
        }
        freeze_backbone(&mut model, true)?;
    }
    Ok(model)
}
