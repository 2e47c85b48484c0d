//! Named-tensor checkpoints.
//!
//! A checkpoint is a directory holding `manifest.json` (names, shapes and
//! offsets, plus caller metadata) and `tensors.bin`, the concatenated values
//! as little-endian IEEE-754 doubles. Values round-trip bit-exactly.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::Tensor;

pub const FORMAT: &str = "volkd-checkpoint/1";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const DATA_FILE: &str = "tensors.bin";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint I/O error at {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("checkpoint format error: {0}")]
    Format(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Offset into the data file, counted in values.
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub dtype: String,
    pub param_count: usize,
    pub tensors: Vec<TensorEntry>,
    #[serde(default)]
    pub metadata: serde_json::Value,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CheckpointError + '_ {
    move |source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    }
}

pub fn save(
    dir: &Path,
    tensors: &[(String, &Tensor)],
    metadata: serde_json::Value,
) -> Result<Manifest, CheckpointError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut entries = Vec::with_capacity(tensors.len());
    let mut bytes = Vec::new();
    let mut offset = 0;
    for (name, t) in tensors {
        entries.push(TensorEntry {
            name: name.clone(),
            shape: t.shape().to_vec(),
            offset,
        });
        offset += t.numel();
        for v in t.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    let manifest = Manifest {
        format: FORMAT.to_string(),
        dtype: "f64-le".to_string(),
        param_count: offset,
        tensors: entries,
        metadata,
    };
    let json = serde_json::to_string_pretty(&manifest)
        .map_err(|e| CheckpointError::Format(e.to_string()))?;
    let mpath = dir.join(MANIFEST_FILE);
    fs::write(&mpath, json).map_err(io_err(&mpath))?;
    let dpath = dir.join(DATA_FILE);
    fs::write(&dpath, bytes).map_err(io_err(&dpath))?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<Manifest, CheckpointError> {
    let mpath = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&mpath).map_err(io_err(&mpath))?;
    let manifest: Manifest = serde_json::from_str(&text)
        .map_err(|e| CheckpointError::Format(format!("corrupt manifest: {e}")))?;
    if manifest.format != FORMAT || manifest.dtype != "f64-le" {
        return Err(CheckpointError::Format(format!(
            "unsupported checkpoint {} / {}",
            manifest.format, manifest.dtype
        )));
    }
    Ok(manifest)
}

/// Load every tensor listed in the manifest, in manifest order.
pub fn load(dir: &Path) -> Result<(Manifest, Vec<(String, Tensor)>), CheckpointError> {
    let manifest = read_manifest(dir)?;
    let dpath = dir.join(DATA_FILE);
    let bytes = fs::read(&dpath).map_err(io_err(&dpath))?;
    if bytes.len() != manifest.param_count * 8 {
        return Err(CheckpointError::Format(format!(
            "data file holds {} bytes, manifest expects {} values",
            bytes.len(),
            manifest.param_count
        )));
    }
    let values: Vec<f64> = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect();
    let mut out = Vec::with_capacity(manifest.tensors.len());
    let mut expected_offset = 0;
    for e in &manifest.tensors {
        let n: usize = e.shape.iter().product();
        if e.offset != expected_offset || e.offset + n > values.len() {
            return Err(CheckpointError::Format(format!(
                "tensor `{}` has an inconsistent offset",
                e.name
            )));
        }
        expected_offset += n;
        let t = Tensor::parameter(e.shape.clone(), values[e.offset..e.offset + n].to_vec())
            .map_err(|err| CheckpointError::Format(format!("tensor `{}`: {err}", e.name)))?;
        out.push((e.name.clone(), t));
    }
    if expected_offset != manifest.param_count {
        return Err(CheckpointError::Format(
            "manifest param_count disagrees with tensor shapes".into(),
        ));
    }
    Ok((manifest, out))
}
