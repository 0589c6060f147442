//! `HQF1` feature containers and weight checkpoints.
//!
//! Layout (all integers little-endian `u32`):
//!
//! | offset | field                                   |
//! |--------|-----------------------------------------|
//! | 0      | magic `HQF1`                            |
//! | 4      | frames `T` (≥ 1)                        |
//! | 8      | tokens per frame `N_v`                  |
//! | 12     | token dim `D_vis`                       |
//! | 16     | precision code: 0 = f32, 1 = f64        |
//! | 20     | `T·N_v·D_vis` floats, (t, token, dim)   |
//!
//! A checkpoint is a single-frame container holding every parameter
//! concatenated, plus a JSON manifest next to it naming each slice.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::{AblationFlags, ModelConfig, Precision};
use crate::error::{HierarqError, Result};
use crate::model::HierarQ;
use crate::modulator::FrameFeature;
use crate::tensor::{Scalar, Tensor};

pub const MAGIC: &[u8; 4] = b"HQF1";
pub const HEADER_BYTES: usize = 20;

fn code_of(p: Precision) -> u32 {
    match p {
        Precision::F32 => 0,
        Precision::F64 => 1,
    }
}

pub fn precision_of<T: Scalar>() -> Precision {
    if T::BYTES == 8 {
        Precision::F64
    } else {
        Precision::F32
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Header {
    pub frames: usize,
    pub tokens: usize,
    pub dim: usize,
    pub precision: Precision,
}

fn format_err(offset: usize, message: impl Into<String>) -> HierarqError {
    HierarqError::Format {
        offset: offset as u64,
        message: message.into(),
    }
}

fn u32_at(bytes: &[u8], offset: usize) -> u32 {
    u32::from_le_bytes(bytes[offset..offset + 4].try_into().unwrap())
}

/// Validate the header and payload length of an in-memory container.
pub fn parse_header(bytes: &[u8]) -> Result<Header> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        let got = &bytes[..bytes.len().min(4)];
        return Err(format_err(0, format!("bad magic {got:?}, expected \"HQF1\"")));
    }
    if bytes.len() < HEADER_BYTES {
        return Err(format_err(bytes.len(), format!("header truncated at {} bytes", bytes.len())));
    }
    let frames = u32_at(bytes, 4) as usize;
    let tokens = u32_at(bytes, 8) as usize;
    let dim = u32_at(bytes, 12) as usize;
    if frames == 0 {
        return Err(format_err(4, "container holds zero frames"));
    }
    if tokens == 0 || dim == 0 {
        return Err(format_err(8, format!("degenerate frame shape {tokens}x{dim}")));
    }
    let precision = match u32_at(bytes, 16) {
        0 => Precision::F32,
        1 => Precision::F64,
        c => return Err(format_err(16, format!("unknown precision code {c}"))),
    };
    let width = if precision == Precision::F64 { 8 } else { 4 };
    let expected = frames
        .checked_mul(tokens)
        .and_then(|v| v.checked_mul(dim))
        .and_then(|v| v.checked_mul(width))
        .ok_or_else(|| format_err(4, "header size overflows"))?;
    let payload = bytes.len() - HEADER_BYTES;
    if payload < expected {
        return Err(format_err(
            bytes.len(),
            format!("payload truncated: {payload} of {expected} bytes"),
        ));
    }
    if payload > expected {
        return Err(format_err(
            HEADER_BYTES + expected,
            format!("{} trailing bytes after payload", payload - expected),
        ));
    }
    Ok(Header {
        frames,
        tokens,
        dim,
        precision,
    })
}

fn decode<T: Scalar>(bytes: &[u8], precision: Precision) -> Vec<T> {
    match precision {
        Precision::F32 => bytes.chunks_exact(4).map(|c| T::lit(f64::from(f32::read_le(c)))).collect(),
        Precision::F64 => bytes.chunks_exact(8).map(|c| T::lit(f64::read_le(c))).collect(),
    }
}

/// Decode a container; values are converted to `T` when the stored
/// precision differs.
pub fn decode_features<T: Scalar>(bytes: &[u8]) -> Result<(Header, Vec<FrameFeature<T>>)> {
    let h = parse_header(bytes)?;
    let values = decode::<T>(&bytes[HEADER_BYTES..], h.precision);
    let per = h.tokens * h.dim;
    let frames = values
        .chunks_exact(per)
        .enumerate()
        .map(|(t, chunk)| FrameFeature::new(t, Tensor::new(&[h.tokens, h.dim], chunk.to_vec())?))
        .collect::<Result<Vec<_>>>()?;
    Ok((h, frames))
}

pub fn encode_features<T: Scalar>(frames: &[FrameFeature<T>]) -> Result<Vec<u8>> {
    let first = frames
        .first()
        .ok_or_else(|| HierarqError::Input("cannot write a container with zero frames".into()))?;
    let shape = first.tokens.shape().to_vec();
    let mut out = Vec::with_capacity(HEADER_BYTES + frames.len() * first.tokens.len() * T::BYTES);
    out.extend_from_slice(MAGIC);
    for v in [frames.len(), shape[0], shape[1]] {
        let v = u32::try_from(v).map_err(|_| HierarqError::Input(format!("dimension {v} exceeds u32")))?;
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.extend_from_slice(&code_of(precision_of::<T>()).to_le_bytes());
    for f in frames {
        if f.tokens.shape() != shape.as_slice() {
            return Err(HierarqError::dim("encode_features", &shape, f.tokens.shape()));
        }
        for &v in f.tokens.data() {
            v.write_le(&mut out);
        }
    }
    Ok(out)
}

pub fn read_features<T: Scalar>(path: &Path) -> Result<Vec<FrameFeature<T>>> {
    let bytes = std::fs::read(path).map_err(|e| HierarqError::io(path, e))?;
    Ok(decode_features(&bytes)?.1)
}

pub fn write_features<T: Scalar>(path: &Path, frames: &[FrameFeature<T>]) -> Result<()> {
    let bytes = encode_features(frames)?;
    std::fs::write(path, bytes).map_err(|e| HierarqError::io(path, e))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub offset: usize,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub model: ModelConfig,
    pub flags: AblationFlags,
    pub tensors: BTreeMap<String, ManifestEntry>,
}

/// Manifest path stored next to a checkpoint file.
pub fn manifest_path(checkpoint: &Path) -> PathBuf {
    let mut name = checkpoint.as_os_str().to_owned();
    name.push(".manifest.json");
    PathBuf::from(name)
}

pub fn save_checkpoint<T: Scalar>(path: &Path, model: &HierarQ<T>) -> Result<()> {
    let mut flat = Vec::with_capacity(model.params.numel());
    let mut tensors = BTreeMap::new();
    for (_, name, t) in model.params.iter() {
        tensors.insert(
            name.to_string(),
            ManifestEntry {
                offset: flat.len(),
                shape: t.shape().to_vec(),
            },
        );
        flat.extend_from_slice(t.data());
    }
    let n = flat.len();
    write_features(path, &[FrameFeature::new(0, Tensor::new(&[1, n], flat)?)?])?;
    let manifest = Manifest {
        model: model.arch.cfg.clone(),
        flags: model.arch.flags.clone(),
        tensors,
    };
    let mpath = manifest_path(path);
    let text = serde_json::to_string_pretty(&manifest)?;
    std::fs::write(&mpath, text).map_err(|e| HierarqError::io(&mpath, e))
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<HierarQ<T>> {
    let mpath = manifest_path(path);
    let text = std::fs::read_to_string(&mpath).map_err(|e| HierarqError::io(&mpath, e))?;
    let manifest: Manifest = serde_json::from_str(&text)?;
    let frames = read_features::<T>(path)?;
    let flat = frames[0].tokens.data();
    let mut model = HierarQ::<T>::new(&manifest.model, &manifest.flags)?;
    if manifest.tensors.len() != model.params.len() {
        return Err(HierarqError::Input(format!(
            "checkpoint has {} tensors, model expects {}",
            manifest.tensors.len(),
            model.params.len()
        )));
    }
    let ids: Vec<_> = model.params.ids().collect();
    for id in ids {
        let name = model.params.name(id).to_string();
        let entry = manifest
            .tensors
            .get(&name)
            .ok_or_else(|| HierarqError::Input(format!("checkpoint lacks tensor {name}")))?;
        let len: usize = entry.shape.iter().product();
        let slice = flat.get(entry.offset..entry.offset + len).ok_or_else(|| {
            HierarqError::Input(format!("tensor {name} lies outside the checkpoint payload"))
        })?;
        model.params.set(id, Tensor::new(&entry.shape, slice.to_vec())?)?;
    }
    Ok(model)
}
