//! Binary checkpoint container.
//!
//! Layout: 8-byte magic `MKSTCKPT`, little-endian `u32` format version,
//! `u64` header length, a JSON header (model config, dataset metadata,
//! tensor names and shapes), then every tensor's values as little-endian
//! `f64` in header order. Values are stored verbatim, so a save/load round
//! trip is bit-exact.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forecaster::{Model, ModelConfig, ModelMeta};
use crate::params::ParamSet;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"MKSTCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    meta: ModelMeta,
    tensors: Vec<TensorEntry>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

pub fn to_bytes(model: &Model) -> Result<Vec<u8>> {
    let header = Header {
        config: model.config.clone(),
        meta: model.meta.clone(),
        tensors: model.params.iter().map(|(name, t)| TensorEntry { name: name.to_string(), shape: t.shape().to_vec() }).collect(),
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(20 + json.len() + 8 * model.params.num_scalars());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for t in model.params.tensors() {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn from_bytes(bytes: &[u8]) -> Result<Model> {
    let bad = |msg: &str| Error::Checkpoint(msg.to_string());
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(bad("not a checkpoint file (bad magic)"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}, expected {CHECKPOINT_VERSION}")));
    }
    let hlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    let body = bytes.get(20..).unwrap_or_default();
    let json = body.get(..hlen).ok_or_else(|| bad("truncated header"))?;
    let header: Header = serde_json::from_slice(json)?;
    let mut values = body[hlen..].chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap()));
    let expected: usize = header.tensors.iter().map(|e| e.shape.iter().product::<usize>()).sum();
    if (body.len() - hlen) != expected * 8 {
        return Err(Error::Checkpoint(format!(
            "payload holds {} bytes, header describes {} values",
            body.len() - hlen,
            expected
        )));
    }
    let mut params = ParamSet::new();
    for e in header.tensors {
        let n = e.shape.iter().product();
        let data: Vec<f64> = values.by_ref().take(n).collect();
        params.add(e.name, Tensor::new(e.shape, data)?);
    }
    if !params.all_finite() {
        return Err(bad("stored parameters contain non-finite values"));
    }
    Model::from_parts(header.config, params, header.meta)
}

/// Write atomically: the file appears only once fully written.
pub fn save(model: &Model, path: &Path) -> Result<()> {
    let bytes = to_bytes(model)?;
    let tmp = path.with_extension("tmp");
    let write = || -> std::io::Result<()> {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
        std::fs::rename(&tmp, path)
    };
    write().map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<Model> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}
