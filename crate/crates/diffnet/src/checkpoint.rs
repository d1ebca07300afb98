//! Checkpoints: a JSON manifest (`<stem>.json`) plus a flat little-endian
//! `f64` blob (`<stem>.bin`) holding every tensor in manifest order.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{DiffnetError, Result};
use crate::optim::AdamHyper;
use crate::params::ParamStore;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: [usize; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format_version: u32,
    pub tensors: Vec<TensorEntry>,
    pub optimizer: Option<AdamHyper>,
    pub checksum: String,
    /// Caller-defined fields (architecture, normaliser statistics, ...).
    #[serde(default)]
    pub extra: serde_json::Value,
}

pub fn manifest_path(stem: &Path) -> PathBuf {
    stem.with_extension("json")
}

pub fn blob_path(stem: &Path) -> PathBuf {
    stem.with_extension("bin")
}

pub fn save_checkpoint(
    stem: &Path,
    store: &ParamStore,
    optimizer: Option<AdamHyper>,
    extra: serde_json::Value,
) -> Result<CheckpointManifest> {
    let manifest = CheckpointManifest {
        format_version: FORMAT_VERSION,
        tensors: store
            .iter()
            .map(|(name, t)| TensorEntry {
                name: name.to_string(),
                shape: [t.nrows(), t.ncols()],
            })
            .collect(),
        optimizer,
        checksum: store.checksum(),
        extra,
    };
    let mut blob = Vec::with_capacity(store.num_scalars() * 8);
    for (_, t) in store.iter() {
        for v in t.iter() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }
    if let Some(dir) = stem.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    fs::write(manifest_path(stem), serde_json::to_vec_pretty(&manifest)?)?;
    fs::write(blob_path(stem), blob)?;
    Ok(manifest)
}

pub fn load_checkpoint(stem: &Path) -> Result<(ParamStore, CheckpointManifest)> {
    let manifest: CheckpointManifest = serde_json::from_slice(&fs::read(manifest_path(stem))?)?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(DiffnetError::Checkpoint(format!(
            "unsupported format version {}",
            manifest.format_version
        )));
    }
    let blob = fs::read(blob_path(stem))?;
    let expected: usize = manifest.tensors.iter().map(|t| t.shape[0] * t.shape[1]).sum();
    if blob.len() != expected * 8 {
        return Err(DiffnetError::Checkpoint(format!(
            "blob holds {} bytes, manifest needs {}",
            blob.len(),
            expected * 8
        )));
    }
    let mut values = blob
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")));
    let mut store = ParamStore::new();
    for t in &manifest.tensors {
        let n = t.shape[0] * t.shape[1];
        let data: Vec<f64> = values.by_ref().take(n).collect();
        let arr = Array2::from_shape_vec((t.shape[0], t.shape[1]), data)
            .map_err(|e| DiffnetError::Checkpoint(e.to_string()))?;
        store.add(t.name.clone(), arr);
    }
    if store.checksum() != manifest.checksum {
        return Err(DiffnetError::Checkpoint("checksum mismatch".into()));
    }
    Ok((store, manifest))
}
