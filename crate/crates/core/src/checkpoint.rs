//! Flat binary tensor files used for model weights and resumable training state.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic    8 bytes  "FORMACKP"
//! version  u32
//! hlen     u64      length of the JSON header in bytes
//! header   hlen     {"meta": ..., "tensors": [{"name": ..., "shape": [...]}, ...]}
//! data     f64 LE   every tensor in header order, row-major, back to back
//! ```

use std::io::{Read, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::model::Forma;
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"FORMACKP";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Prefix of model parameter entries in the tensor table.
pub const PARAM_PREFIX: &str = "param/";

#[derive(Serialize, Deserialize)]
struct TableEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header<M> {
    meta: M,
    tensors: Vec<TableEntry>,
}

/// Writes `meta` and the named tensors; the file is replaced atomically.
pub fn write_tensor_file<M: Serialize>(path: &Path, meta: &M, tensors: &[(String, &Tensor)]) -> Result<()> {
    let header = Header {
        meta,
        tensors: tensors
            .iter()
            .map(|(n, t)| TableEntry {
                name: n.clone(),
                shape: t.shape().to_vec(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header).map_err(|e| Error::format(path, e.to_string()))?;
    let total: usize = tensors.iter().map(|(_, t)| t.len()).sum();
    let mut buf = Vec::with_capacity(20 + json.len() + 8 * total);
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
    buf.extend_from_slice(&json);
    for (_, t) in tensors {
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let tmp = path.with_extension("partial");
    let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(&buf).map_err(|e| Error::io(&tmp, e))?;
    drop(f);
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Reads a file written by [`write_tensor_file`].
pub fn read_tensor_file<M: DeserializeOwned>(path: &Path) -> Result<(M, Vec<(String, Tensor)>)> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    let bad = |msg: &str| Error::format(path, msg.to_string());
    if bytes.len() < 20 || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(bad("not a checkpoint (bad magic)"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(bad(&format!("unsupported checkpoint version {version}")));
    }
    let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let body = bytes.get(20..20 + hlen).ok_or_else(|| bad("truncated header"))?;
    let header: Header<M> = serde_json::from_slice(body).map_err(|e| bad(&e.to_string()))?;
    let mut data = &bytes[20 + hlen..];
    let mut tensors = Vec::with_capacity(header.tensors.len());
    for e in header.tensors {
        let n: usize = e.shape.iter().product();
        if data.len() < 8 * n {
            return Err(bad(&format!("truncated data for tensor {}", e.name)));
        }
        let vals = data[..8 * n]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        data = &data[8 * n..];
        tensors.push((e.name, Tensor::new(&e.shape, vals)?));
    }
    if !data.is_empty() {
        return Err(bad("trailing bytes after the last tensor"));
    }
    Ok((header.meta, tensors))
}

/// Named parameter tensors of a model, prefixed for the tensor table.
pub fn model_tensors(model: &Forma) -> Vec<(String, &Tensor)> {
    model
        .store
        .iter()
        .map(|(_, name, t)| (format!("{PARAM_PREFIX}{name}"), t))
        .collect()
}

/// Rebuilds a model from its configuration and loads every parameter from `tensors`.
pub fn restore_model(cfg: ModelConfig, tensors: &[(String, Tensor)], path: &Path) -> Result<Forma> {
    let mut model = Forma::new(cfg, 0)?;
    let mut loaded = 0;
    for (name, t) in tensors {
        if let Some(p) = name.strip_prefix(PARAM_PREFIX) {
            model
                .store
                .load(p, t.clone())
                .map_err(|e| Error::format(path, e.to_string()))?;
            loaded += 1;
        }
    }
    if loaded != model.store.len() {
        return Err(Error::format(
            path,
            format!("{loaded} parameter tensors for a model with {}", model.store.len()),
        ));
    }
    Ok(model)
}

#[derive(Serialize, Deserialize)]
struct ModelMeta {
    model: ModelConfig,
}

/// Weights-only checkpoint.
pub fn save_model(path: &Path, model: &Forma) -> Result<()> {
    let meta = ModelMeta {
        model: model.cfg.clone(),
    };
    write_tensor_file(path, &meta, &model_tensors(model))
}

/// Loads the model part of any checkpoint (weights-only or training).
pub fn load_model(path: &Path) -> Result<Forma> {
    let (meta, tensors): (ModelMeta, _) = read_tensor_file(path)?;
    restore_model(meta.model, &tensors, path)
}
