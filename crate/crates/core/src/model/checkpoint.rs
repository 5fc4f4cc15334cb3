//! Two-file checkpoint container.
//!
//! `<stem>.manifest.json` holds the format version, the model config, the
//! ordered parameter list and a CRC32 of the payload. `<stem>.params.bin` is the
//! raw payload: little-endian `f32` values of every parameter concatenated in
//! manifest order. `offset` and `length` in the manifest count values, not bytes.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use super::{Model, ModelConfig};
use crate::params::ParamStore;
use crate::tensor::Tensor;
use crate::Result;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("io error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed manifest: {0}")]
    Manifest(String),
    #[error("unsupported checkpoint format version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("shape mismatch for {name}: expected {expected:?}, found {found:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("truncated payload: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("oversized payload: expected {expected} bytes, found {found}")]
    Oversized { expected: usize, found: usize },
    #[error("payload checksum mismatch: manifest {expected:08x}, payload {found:08x}")]
    Checksum { expected: u32, found: u32 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestParam {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub length: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub config: ModelConfig,
    pub params: Vec<ManifestParam>,
    pub checksum: u32,
    #[serde(default)]
    pub created_unix_s: u64,
    /// Free-form training metrics recorded alongside the weights.
    #[serde(default)]
    pub metrics: Option<serde_json::Value>,
}

pub fn manifest_path(stem: &Path) -> PathBuf {
    with_suffix(stem, ".manifest.json")
}

pub fn payload_path(stem: &Path) -> PathBuf {
    with_suffix(stem, ".params.bin")
}

fn with_suffix(stem: &Path, suffix: &str) -> PathBuf {
    let mut s = stem.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CheckpointError + '_ {
    move |source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Writes the manifest/payload pair for `model` next to `stem`.
pub fn save_checkpoint(
    model: &Model,
    stem: &Path,
    metrics: Option<serde_json::Value>,
) -> Result<Manifest> {
    let mut payload = Vec::with_capacity(model.params().scalar_count() * 4);
    let mut params = Vec::with_capacity(model.params().len());
    let mut offset = 0;
    for p in model.params().iter() {
        for &v in p.value.values() {
            payload.extend_from_slice(&(v as f32).to_le_bytes());
        }
        params.push(ManifestParam {
            name: p.name.clone(),
            shape: p.value.shape().to_vec(),
            offset,
            length: p.value.len(),
        });
        offset += p.value.len();
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        config: model.config().clone(),
        params,
        checksum: crc32fast::hash(&payload),
        created_unix_s: SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0),
        metrics,
    };
    let json = serde_json::to_vec_pretty(&manifest)
        .map_err(|e| CheckpointError::Manifest(e.to_string()))?;

    let payload_file = payload_path(stem);
    let manifest_file = manifest_path(stem);
    fs::write(&payload_file, &payload).map_err(io_err(&payload_file))?;
    fs::write(&manifest_file, json).map_err(io_err(&manifest_file))?;
    Ok(manifest)
}

/// Reads and validates a checkpoint pair. Version, payload size, checksum and
/// parameter shapes are all checked before the model is returned.
pub fn load_checkpoint(stem: &Path) -> Result<(Model, Manifest)> {
    let manifest_file = manifest_path(stem);
    let raw = fs::read(&manifest_file).map_err(io_err(&manifest_file))?;
    let header: serde_json::Value =
        serde_json::from_slice(&raw).map_err(|e| CheckpointError::Manifest(e.to_string()))?;
    let version = header
        .get("format_version")
        .and_then(|v| v.as_u64())
        .ok_or_else(|| CheckpointError::Manifest("missing format_version".into()))?;
    if version != FORMAT_VERSION as u64 {
        return Err(CheckpointError::Version {
            found: version as u32,
            expected: FORMAT_VERSION,
        }
        .into());
    }
    let manifest: Manifest =
        serde_json::from_value(header).map_err(|e| CheckpointError::Manifest(e.to_string()))?;

    let payload_file = payload_path(stem);
    let payload = fs::read(&payload_file).map_err(io_err(&payload_file))?;
    let values: usize = manifest.params.iter().map(|p| p.length).sum();
    let expected = values * 4;
    if payload.len() < expected {
        return Err(CheckpointError::Truncated {
            expected,
            found: payload.len(),
        }
        .into());
    }
    if payload.len() > expected {
        return Err(CheckpointError::Oversized {
            expected,
            found: payload.len(),
        }
        .into());
    }
    let found = crc32fast::hash(&payload);
    if found != manifest.checksum {
        return Err(CheckpointError::Checksum {
            expected: manifest.checksum,
            found,
        }
        .into());
    }

    let mut store = ParamStore::new();
    for p in &manifest.params {
        let declared: usize = p.shape.iter().product();
        if declared != p.length || p.offset + p.length > values {
            return Err(CheckpointError::ShapeMismatch {
                name: p.name.clone(),
                expected: p.shape.clone(),
                found: vec![p.length],
            }
            .into());
        }
        let bytes = &payload[p.offset * 4..(p.offset + p.length) * 4];
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        let tensor =
            Tensor::new(p.shape.clone(), data).map_err(|_| CheckpointError::ShapeMismatch {
                name: p.name.clone(),
                expected: p.shape.clone(),
                found: vec![p.length],
            })?;
        store.push(p.name.clone(), tensor);
    }
    let model = Model::from_params(manifest.config.clone(), store)?;
    Ok((model, manifest))
}

/// [`load_checkpoint`], then rejects models whose channel count differs from
/// `channels`.
pub fn load_checkpoint_expecting(stem: &Path, channels: usize) -> Result<(Model, Manifest)> {
    let (model, manifest) = load_checkpoint(stem)?;
    model.ensure_channels(channels)?;
    Ok((model, manifest))
}
