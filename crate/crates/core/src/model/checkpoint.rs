//! Single-file checkpoints: an 8-byte magic, a little-endian `u64` manifest
//! length, a JSON manifest, then every tensor as little-endian `f32`.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::ModelConfig;
use super::forward::Model;
use super::params::ParameterStore;
use crate::error::{Error, Result};
use crate::tensor::{DType, Scalar, Tensor};

const MAGIC: &[u8; 8] = b"PLIFTCK1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TensorKind {
    Param,
    Buffer,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub path: String,
    pub kind: TensorKind,
    pub shape: Vec<usize>,
    pub dtype: DType,
    /// Byte offset into the blob.
    pub offset: usize,
    /// Element count.
    pub len: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config: ModelConfig,
    pub tensors: Vec<TensorEntry>,
    /// Free-form run metadata (epoch, scores).
    #[serde(default)]
    pub meta: BTreeMap<String, serde_json::Value>,
}

fn bad(path: &Path, msg: impl Into<String>) -> Error {
    Error::Checkpoint(format!("{}: {}", path.display(), msg.into()))
}

/// Serializes a model to bytes. Values are stored as `f32`.
pub fn encode<F: Scalar>(model: &Model<F>, meta: BTreeMap<String, serde_json::Value>) -> Result<Vec<u8>> {
    let store = model.params();
    let mut tensors = Vec::new();
    let mut blob = Vec::new();
    let groups = [(TensorKind::Param, store.params()), (TensorKind::Buffer, store.buffers())];
    for (kind, map) in groups {
        for (path, t) in map {
            tensors.push(TensorEntry {
                path: path.clone(),
                kind,
                shape: t.shape().to_vec(),
                dtype: DType::F32,
                offset: blob.len(),
                len: t.numel(),
            });
            for &v in t.data() {
                blob.extend_from_slice(&(v.widen() as f32).to_le_bytes());
            }
        }
    }
    let manifest = Manifest { config: model.config().clone(), tensors, meta };
    let json = serde_json::to_vec(&manifest)?;
    let mut out = Vec::with_capacity(16 + json.len() + blob.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&blob);
    Ok(out)
}

pub fn save<F: Scalar>(model: &Model<F>, meta: BTreeMap<String, serde_json::Value>, path: &Path) -> Result<()> {
    fs::write(path, encode(model, meta)?)?;
    Ok(())
}

/// Parses checkpoint bytes; `origin` is used only in error messages.
pub fn decode(bytes: &[u8], origin: &Path) -> Result<(Model<f32>, Manifest)> {
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(bad(origin, "not a checkpoint (bad magic)"));
    }
    let mlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let body = &bytes[16..];
    if mlen > body.len() {
        return Err(bad(origin, format!("manifest length {mlen} exceeds file size")));
    }
    let manifest: Manifest =
        serde_json::from_slice(&body[..mlen]).map_err(|e| bad(origin, format!("manifest: {e}")))?;
    let blob = &body[mlen..];
    let mut params = BTreeMap::new();
    let mut buffers = BTreeMap::new();
    for e in &manifest.tensors {
        if e.dtype != DType::F32 {
            return Err(bad(origin, format!("`{}` has unsupported dtype", e.path)));
        }
        let end = e.offset.checked_add(e.len * 4).filter(|&end| end <= blob.len());
        let Some(end) = end else {
            return Err(bad(origin, format!("`{}` runs past the end of the data", e.path)));
        };
        let data: Vec<f32> =
            blob[e.offset..end].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
        let t = Tensor::new(e.shape.clone(), data).map_err(|err| bad(origin, format!("`{}`: {err}", e.path)))?;
        let dest = match e.kind {
            TensorKind::Param => &mut params,
            TensorKind::Buffer => &mut buffers,
        };
        if dest.insert(e.path.clone(), t).is_some() {
            return Err(bad(origin, format!("duplicate tensor `{}`", e.path)));
        }
    }
    let store = ParameterStore::from_maps(&manifest.config, params, buffers)?;
    let model = Model::with_params(manifest.config.clone(), store)?;
    Ok((model, manifest))
}

pub fn load(path: &Path) -> Result<(Model<f32>, Manifest)> {
    let bytes = fs::read(path)?;
    decode(&bytes, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::SkeletonSpec;

    #[test]
    fn round_trip_is_bit_exact() {
        let cfg = ModelConfig::custom(1, 8, 3, 2, SkeletonSpec::five_joint());
        let model = Model::<f32>::new(cfg, 11).unwrap();
        let mut meta = BTreeMap::new();
        meta.insert("epoch".to_string(), serde_json::json!(3));
        let bytes = encode(&model, meta.clone()).unwrap();
        let (back, manifest) = decode(&bytes, Path::new("mem")).unwrap();
        assert_eq!(back, model);
        assert_eq!(manifest.meta, meta);
        assert_eq!(encode(&back, meta).unwrap(), bytes);
    }

    #[test]
    fn rejects_corruption() {
        let cfg = ModelConfig::custom(1, 8, 3, 2, SkeletonSpec::five_joint());
        let model = Model::<f32>::new(cfg, 0).unwrap();
        let bytes = encode(&model, BTreeMap::new()).unwrap();
        assert!(decode(&bytes[..bytes.len() - 4], Path::new("x")).is_err());
        let mut wrong = bytes.clone();
        wrong[0] = b'X';
        assert!(decode(&wrong, Path::new("x")).is_err());
    }
}
