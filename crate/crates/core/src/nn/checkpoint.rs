//! Checkpoint container: a JSON manifest next to one little-endian f32 blob.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{NnError, ParamStore, Tensor};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub byte_offset: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format_version: u32,
    /// Blob file name, relative to the manifest's directory.
    pub blob: String,
    pub tensors: Vec<TensorEntry>,
    #[serde(default)]
    pub metadata: BTreeMap<String, String>,
}

fn blob_path(manifest: &Path) -> PathBuf {
    manifest.with_extension("bin")
}

/// Writes `<path>` (manifest) and `<path>.bin` (payload).
pub fn save_checkpoint(
    store: &ParamStore,
    manifest_path: impl AsRef<Path>,
    metadata: BTreeMap<String, String>,
) -> Result<CheckpointManifest, NnError> {
    let manifest_path = manifest_path.as_ref();
    let blob = blob_path(manifest_path);
    let mut payload = Vec::with_capacity(store.scalar_count(false) * 4);
    let mut tensors = Vec::with_capacity(store.len());
    for p in store.iter() {
        tensors.push(TensorEntry {
            name: p.name.clone(),
            shape: p.value.shape().to_vec(),
            dtype: "f32".into(),
            byte_offset: payload.len() as u64,
        });
        for v in p.value.data() {
            payload.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    let manifest = CheckpointManifest {
        format_version: FORMAT_VERSION,
        blob: blob
            .file_name()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default(),
        tensors,
        metadata,
    };
    fs::write(&blob, payload)?;
    fs::write(manifest_path, serde_json::to_vec_pretty(&manifest)?)?;
    Ok(manifest)
}

pub fn load_checkpoint(
    manifest_path: impl AsRef<Path>,
) -> Result<(CheckpointManifest, Vec<(String, Tensor)>), NnError> {
    let manifest_path = manifest_path.as_ref();
    let manifest: CheckpointManifest = serde_json::from_slice(&fs::read(manifest_path)?)?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(NnError::Checkpoint(format!(
            "unsupported format version {}",
            manifest.format_version
        )));
    }
    let dir = manifest_path.parent().unwrap_or_else(|| Path::new("."));
    let payload = fs::read(dir.join(&manifest.blob))?;
    let mut out = Vec::with_capacity(manifest.tensors.len());
    for entry in &manifest.tensors {
        if entry.dtype != "f32" {
            return Err(NnError::Checkpoint(format!("{}: dtype {}", entry.name, entry.dtype)));
        }
        let n: usize = entry.shape.iter().product();
        let start = entry.byte_offset as usize;
        let bytes = payload
            .get(start..start + n * 4)
            .ok_or_else(|| NnError::Checkpoint(format!("{}: payload truncated", entry.name)))?;
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        out.push((entry.name.clone(), Tensor::new(&entry.shape, data)?));
    }
    Ok((manifest, out))
}
