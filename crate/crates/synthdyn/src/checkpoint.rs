//! Binary parameter container shared by the transformer and the baselines.
//!
//! Layout (all integers little endian):
//!
//! | bytes | content                                   |
//! |-------|-------------------------------------------|
//! | 8     | magic `SYNDYNCK`                          |
//! | 4     | container version (`u32`)                 |
//! | 8     | manifest length `n` (`u64`)               |
//! | n     | manifest, UTF-8 JSON                      |
//! | rest  | tensor data, concatenated, `f32` or `f64` |
//!
//! The manifest lists every tensor's name, shape, dtype and byte offset, the
//! kind tag, the element type and the SHA-256 of the data section.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use synthdyn_core::baselines::{RegressorKind, WindowedRegressor};
use synthdyn_core::model::{ModelConfig, TransformerModel};
use synthdyn_core::tensor::{DType, ParamSet, Real, Tensor};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"SYNDYNCK";
pub const CONTAINER_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Kind {
    Transformer,
    Linear,
    Fnn,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: DType,
    /// Offset into the data section, in bytes.
    pub byte_offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub kind: Kind,
    pub dtype: DType,
    pub d_x: usize,
    pub d_u: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<ModelConfig>,
    pub tensors: Vec<TensorEntry>,
    pub data_sha256: String,
    /// Free-form provenance (training report, source dataset hash, ...).
    #[serde(default)]
    pub metadata: serde_json::Value,
}

fn encode<T: Real>(params: &ParamSet<T>) -> (Vec<TensorEntry>, Vec<u8>) {
    let mut entries = Vec::with_capacity(params.len());
    let mut bytes = Vec::with_capacity(params.count() * T::DTYPE.size());
    let mut offset = 0;
    for (name, t) in params.iter() {
        entries.push(TensorEntry { name: name.to_string(), shape: t.shape().to_vec(), dtype: T::DTYPE, byte_offset: offset });
        offset += t.numel() * T::DTYPE.size();
        for &v in t.data() {
            match T::DTYPE {
                DType::F32 => bytes.extend_from_slice(&(v.as_f64() as f32).to_le_bytes()),
                DType::F64 => bytes.extend_from_slice(&v.as_f64().to_le_bytes()),
            }
        }
    }
    (entries, bytes)
}

fn to_bytes(manifest: &Manifest, data: &[u8]) -> Result<Vec<u8>> {
    let json = serde_json::to_vec(manifest).map_err(Error::json("checkpoint manifest"))?;
    let mut out = Vec::with_capacity(20 + json.len() + data.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&CONTAINER_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(data);
    Ok(out)
}

/// Splits a container into its manifest and its tensors (widened to `f64`,
/// which is exact for `f32` data).
pub fn decode(bytes: &[u8]) -> Result<(Manifest, ParamSet<f64>)> {
    let bad = |m: &str| Error::Format(format!("not a valid checkpoint: {m}"));
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(bad("missing magic header"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != CONTAINER_VERSION {
        return Err(bad(&format!("unsupported container version {version}")));
    }
    let n = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let json = bytes.get(20..20 + n).ok_or_else(|| bad("truncated manifest"))?;
    let manifest: Manifest = serde_json::from_slice(json).map_err(Error::json("checkpoint manifest"))?;
    let data = &bytes[20 + n..];
    if hex::encode(Sha256::digest(data)) != manifest.data_sha256 {
        return Err(bad("data section does not match its checksum"));
    }
    let size = manifest.dtype.size();
    let mut params = ParamSet::new();
    let mut expected = 0;
    for e in &manifest.tensors {
        if e.byte_offset != expected * size {
            return Err(bad(&format!("tensor {} is not contiguous", e.name)));
        }
        if e.dtype != manifest.dtype {
            return Err(bad(&format!("tensor {} has dtype {:?} in a {:?} container", e.name, e.dtype, manifest.dtype)));
        }
        let numel: usize = e.shape.iter().product();
        let raw = data.get(e.byte_offset..e.byte_offset + numel * size).ok_or_else(|| bad("truncated data"))?;
        let values: Vec<f64> = match manifest.dtype {
            DType::F32 => raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4")) as f64).collect(),
            DType::F64 => raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8"))).collect(),
        };
        params.push(e.name.clone(), Tensor::new(e.shape.clone(), values)?);
        expected += numel;
    }
    if expected * size != data.len() {
        return Err(bad("trailing bytes after the last tensor"));
    }
    Ok((manifest, params))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(Error::io(path))
}

pub fn encode_model<T: Real>(model: &TransformerModel<T>, metadata: serde_json::Value) -> Result<Vec<u8>> {
    let (tensors, data) = encode(model.params());
    let cfg = model.config();
    let manifest = Manifest {
        kind: Kind::Transformer,
        dtype: T::DTYPE,
        d_x: cfg.d_x,
        d_u: cfg.d_u,
        model: Some(cfg.clone()),
        tensors,
        data_sha256: hex::encode(Sha256::digest(&data)),
        metadata,
    };
    to_bytes(&manifest, &data)
}

pub fn save_model<T: Real>(path: &Path, model: &TransformerModel<T>, metadata: serde_json::Value) -> Result<()> {
    write_file(path, &encode_model(model, metadata)?)
}

/// A transformer checkpoint in its stored precision.
#[derive(Debug, Clone, PartialEq)]
pub enum LoadedModel {
    F32(TransformerModel<f32>),
    F64(TransformerModel<f64>),
}

impl LoadedModel {
    pub fn cast<T: Real>(&self) -> TransformerModel<T> {
        match self {
            LoadedModel::F32(m) => m.cast(),
            LoadedModel::F64(m) => m.cast(),
        }
    }

    pub fn config(&self) -> &ModelConfig {
        match self {
            LoadedModel::F32(m) => m.config(),
            LoadedModel::F64(m) => m.config(),
        }
    }
}

pub fn decode_model(bytes: &[u8]) -> Result<(LoadedModel, Manifest)> {
    let (manifest, params) = decode(bytes)?;
    if manifest.kind != Kind::Transformer {
        return Err(Error::Format(format!("expected a transformer checkpoint, found {:?}", manifest.kind)));
    }
    let cfg = manifest.model.clone().ok_or_else(|| Error::Format("transformer checkpoint without model config".into()))?;
    let model = match manifest.dtype {
        DType::F32 => LoadedModel::F32(TransformerModel::from_params(cfg, params.cast())?),
        DType::F64 => LoadedModel::F64(TransformerModel::from_params(cfg, params)?),
    };
    Ok((model, manifest))
}

pub fn load_model(path: &Path) -> Result<(LoadedModel, Manifest)> {
    decode_model(&fs::read(path).map_err(Error::io(path))?)
}

pub fn encode_regressor(reg: &WindowedRegressor, metadata: serde_json::Value) -> Result<Vec<u8>> {
    let (tensors, data) = encode(&reg.to_param_set());
    let manifest = Manifest {
        kind: match reg.kind() {
            RegressorKind::Linear => Kind::Linear,
            RegressorKind::Fnn => Kind::Fnn,
        },
        dtype: DType::F64,
        d_x: reg.d_x(),
        d_u: reg.d_u(),
        model: None,
        tensors,
        data_sha256: hex::encode(Sha256::digest(&data)),
        metadata,
    };
    to_bytes(&manifest, &data)
}

pub fn save_regressor(path: &Path, reg: &WindowedRegressor, metadata: serde_json::Value) -> Result<()> {
    write_file(path, &encode_regressor(reg, metadata)?)
}

pub fn decode_regressor(bytes: &[u8]) -> Result<WindowedRegressor> {
    let (manifest, params) = decode(bytes)?;
    let kind = match manifest.kind {
        Kind::Linear => RegressorKind::Linear,
        Kind::Fnn => RegressorKind::Fnn,
        Kind::Transformer => return Err(Error::Format("expected a baseline checkpoint, found a transformer".into())),
    };
    Ok(WindowedRegressor::from_param_set(kind, manifest.d_x, manifest.d_u, params)?)
}

pub fn load_regressor(path: &Path) -> Result<WindowedRegressor> {
    decode_regressor(&fs::read(path).map_err(Error::io(path))?)
}
