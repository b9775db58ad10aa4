//! Checkpoint pair `<name>.manifest.json` + `<name>.weights.bin`.
//!
//! The blob holds little-endian `f32` values, tensors concatenated in manifest
//! order. Training runs in `f64`, so a round trip reproduces parameters at
//! `f32` precision.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::config::ModelConfig;
use super::params::ParameterSet;
use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const CHECKPOINT_FORMAT: &str = "eksft-checkpoint-v1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the weights blob.
    pub offset: usize,
    /// Byte length in the weights blob.
    pub bytes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format: String,
    pub run_id: String,
    pub seed: u64,
    pub version: u64,
    pub config: ModelConfig,
    pub config_hash: String,
    pub dtype: String,
    pub weights_file: String,
    pub total_bytes: usize,
    pub tensors: Vec<TensorEntry>,
}

/// `(manifest, weights)` paths for a checkpoint base path such as `ckpt/final`.
///
/// A path that already ends in `.manifest.json` is accepted too.
pub fn checkpoint_paths(base: &Path) -> (PathBuf, PathBuf) {
    let s = base.to_string_lossy();
    let stem = s.strip_suffix(".manifest.json").unwrap_or(&s).to_string();
    (
        PathBuf::from(format!("{stem}.manifest.json")),
        PathBuf::from(format!("{stem}.weights.bin")),
    )
}

/// Writes the manifest and weight blob for `params`.
pub fn save_checkpoint(params: &ParameterSet, base: &Path) -> Result<CheckpointManifest> {
    let (manifest_path, weights_path) = checkpoint_paths(base);
    if let Some(dir) = manifest_path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut blob = Vec::with_capacity(params.num_scalars() * 4);
    let mut tensors = Vec::new();
    for (name, t) in params.iter() {
        let offset = blob.len();
        for &v in t.data() {
            blob.extend_from_slice(&(v as f32).to_le_bytes());
        }
        tensors.push(TensorEntry {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            offset,
            bytes: blob.len() - offset,
        });
    }
    let manifest = CheckpointManifest {
        format: CHECKPOINT_FORMAT.into(),
        run_id: params.run_id.clone(),
        seed: params.config().seed,
        version: params.version,
        config: params.config().clone(),
        config_hash: params.config_hash(),
        dtype: "f32-le".into(),
        weights_file: weights_path
            .file_name()
            .map(|f| f.to_string_lossy().into_owned())
            .unwrap_or_default(),
        total_bytes: blob.len(),
        tensors,
    };
    let mut json = serde_json::to_string_pretty(&manifest)?;
    json.push('\n');
    fs::write(&weights_path, &blob).map_err(|e| Error::io(&weights_path, e))?;
    fs::write(&manifest_path, json).map_err(|e| Error::io(&manifest_path, e))?;
    Ok(manifest)
}

/// Reads a checkpoint written by [`save_checkpoint`].
pub fn load_checkpoint(base: &Path) -> Result<ParameterSet> {
    let (manifest_path, weights_path) = checkpoint_paths(base);
    let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let manifest: CheckpointManifest = serde_json::from_str(&text).map_err(|e| Error::CorruptManifest {
        path: manifest_path.clone(),
        reason: e.to_string(),
    })?;
    if manifest.format != CHECKPOINT_FORMAT || manifest.dtype != "f32-le" {
        return Err(Error::CorruptManifest {
            path: manifest_path,
            reason: format!("unsupported format {} / {}", manifest.format, manifest.dtype),
        });
    }
    let computed = manifest.config.config_hash();
    if computed != manifest.config_hash {
        return Err(Error::ConfigHashMismatch {
            manifest: manifest.config_hash,
            computed,
        });
    }
    let blob = fs::read(&weights_path).map_err(|e| Error::io(&weights_path, e))?;
    if blob.len() < manifest.total_bytes {
        return Err(Error::Truncated {
            path: weights_path,
            expected: manifest.total_bytes,
            found: blob.len(),
        });
    }
    let mut named = Vec::with_capacity(manifest.tensors.len());
    for entry in &manifest.tensors {
        let n: usize = entry.shape.iter().product();
        if entry.bytes != n * 4 {
            return Err(Error::CorruptManifest {
                path: manifest_path.clone(),
                reason: format!("tensor {} declares {} bytes for {n} values", entry.name, entry.bytes),
            });
        }
        let end = entry.offset + entry.bytes;
        if end > blob.len() {
            return Err(Error::Truncated {
                path: weights_path.clone(),
                expected: end,
                found: blob.len(),
            });
        }
        let data: Vec<f64> = blob[entry.offset..end]
            .chunks_exact(4)
            .map(|c| f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]])))
            .collect();
        let tensor = Tensor::new(entry.shape.clone(), data)?;
        named.push((entry.name.clone(), tensor));
    }
    let mut params = ParameterSet::from_tensors(manifest.config, named)?;
    params.version = manifest.version;
    params.run_id = manifest.run_id;
    Ok(params)
}

/// Rounds every parameter to `f32`, the precision checkpoints store.
pub fn to_storage_precision(params: &ParameterSet) -> ParameterSet {
    let flat: Vec<f64> = params.flatten().into_iter().map(|v| f64::from(v as f32)).collect();
    params.with_flat(&flat).expect("same length")
}
