//! Checkpoints: `<stem>.ckpt.json` header plus `<stem>.ckpt.raw` payload of
//! little-endian f64 tensors in header order.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{expected_shapes, MlpConfig, Model, EMBED_SCHEMA};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &str = "PSCK1";
const DTYPE: &str = "f64le";

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CheckpointHeader {
    magic: String,
    dtype: String,
    config: MlpConfig,
    embed_schema: Vec<String>,
    tensors: Vec<TensorEntry>,
    meta: serde_json::Value,
}

fn paths(path: &Path) -> (PathBuf, PathBuf) {
    let s = path.to_string_lossy();
    let stem = s
        .strip_suffix(".ckpt.json")
        .or_else(|| s.strip_suffix(".ckpt.raw"))
        .unwrap_or(&s)
        .to_string();
    (PathBuf::from(format!("{stem}.ckpt.json")), PathBuf::from(format!("{stem}.ckpt.raw")))
}

pub fn save_checkpoint(model: &Model, path: impl AsRef<Path>, meta: serde_json::Value) -> Result<()> {
    model.weights.check_finite()?;
    let (json_path, raw_path) = paths(path.as_ref());
    let header = CheckpointHeader {
        magic: CHECKPOINT_MAGIC.into(),
        dtype: DTYPE.into(),
        config: model.config.clone(),
        embed_schema: EMBED_SCHEMA.iter().map(|s| s.to_string()).collect(),
        tensors: model
            .weights
            .shapes()
            .into_iter()
            .map(|(name, shape)| TensorEntry { name, shape })
            .collect(),
        meta,
    };
    let mut payload = Vec::with_capacity(model.weights.n_params() * 8);
    for (_, t) in model.weights.tensors() {
        for v in t {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    }
    if let Some(dir) = json_path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut text = serde_json::to_string_pretty(&header)?;
    text.push('\n');
    fs::write(&json_path, text).map_err(|e| Error::io(&json_path, e))?;
    fs::write(&raw_path, payload).map_err(|e| Error::io(&raw_path, e))?;
    Ok(())
}

/// Loads a checkpoint and returns the model with the header metadata.
pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(Model, serde_json::Value)> {
    let (json_path, raw_path) = paths(path.as_ref());
    let text = fs::read_to_string(&json_path).map_err(|e| Error::io(&json_path, e))?;
    let header: CheckpointHeader = serde_json::from_str(&text).map_err(|e| Error::MalformedHeader {
        path: json_path.clone(),
        reason: e.to_string(),
    })?;
    let bad = |reason: String| Error::MalformedHeader {
        path: json_path.clone(),
        reason,
    };
    if header.magic != CHECKPOINT_MAGIC {
        return Err(bad(format!("magic {:?}", header.magic)));
    }
    if header.dtype != DTYPE {
        return Err(bad(format!("dtype {:?}", header.dtype)));
    }
    if header.embed_schema != EMBED_SCHEMA {
        return Err(bad(format!("embedding schema {:?}", header.embed_schema)));
    }
    header.config.validate()?;
    let listed: Vec<(String, Vec<usize>)> = header.tensors.iter().map(|t| (t.name.clone(), t.shape.clone())).collect();
    if listed != expected_shapes(&header.config) {
        return Err(bad("tensor list does not match the configuration".into()));
    }
    let bytes = fs::read(&raw_path).map_err(|e| Error::io(&raw_path, e))?;
    let n: usize = listed.iter().map(|(_, s)| s.iter().product::<usize>()).sum();
    if bytes.len() != n * 8 {
        return Err(Error::PayloadLength {
            expected: n * 8,
            actual: bytes.len(),
        });
    }
    let mut weights = super::ModelWeights::init(&header.config, &mut crate::seed::rng_for(0, &[]))?;
    let mut values = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
    for (_, t) in weights.tensors_mut() {
        for v in t.iter_mut() {
            *v = values.next().expect("length checked");
        }
    }
    let model = Model::from_parts(header.config, weights)?;
    Ok((model, header.meta))
}
