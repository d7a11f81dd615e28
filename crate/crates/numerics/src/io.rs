//! Weight sidecar format: a flat little-endian `f32` blob plus a JSON manifest
//! mapping `group → slot → {offset, shape}` (offsets in bytes). Groups are
//! layer ids for model weights and network names for agent checkpoints.

use std::fs;
use std::path::Path;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::tensor::{numel, Tensor};
use crate::{NumericsError, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Entry {
    pub offset: usize,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub dtype: String,
    pub entries: IndexMap<String, IndexMap<String, Entry>>,
}

pub type TensorGroups = IndexMap<String, IndexMap<String, Tensor>>;

/// Serializes groups into `(blob, manifest)` without touching the filesystem.
pub fn encode(groups: &TensorGroups) -> (Vec<u8>, Manifest) {
    let mut blob = Vec::new();
    let mut entries = IndexMap::new();
    for (group, slots) in groups {
        let mut m = IndexMap::new();
        for (slot, t) in slots {
            m.insert(
                slot.clone(),
                Entry {
                    offset: blob.len(),
                    shape: t.shape().to_vec(),
                },
            );
            for &v in t.data() {
                blob.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        entries.insert(group.clone(), m);
    }
    (
        blob,
        Manifest {
            dtype: "f32le".into(),
            entries,
        },
    )
}

pub fn decode(blob: &[u8], manifest: &Manifest) -> Result<TensorGroups> {
    if manifest.dtype != "f32le" {
        return Err(NumericsError::Format(format!(
            "unsupported dtype `{}`",
            manifest.dtype
        )));
    }
    let mut groups = IndexMap::new();
    for (group, slots) in &manifest.entries {
        let mut out = IndexMap::new();
        for (slot, e) in slots {
            let n = numel(&e.shape);
            let end = e.offset + 4 * n;
            if e.offset % 4 != 0 || end > blob.len() {
                return Err(NumericsError::Format(format!(
                    "{group}.{slot}: range {}..{end} outside blob of {} bytes",
                    e.offset,
                    blob.len()
                )));
            }
            let data = blob[e.offset..end]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
                .collect();
            out.insert(slot.clone(), Tensor::new(e.shape.clone(), data)?);
        }
        groups.insert(group.clone(), out);
    }
    Ok(groups)
}

/// Writes `<blob_path>` and its manifest at `manifest_path`.
pub fn save(groups: &TensorGroups, blob_path: &Path, manifest_path: &Path) -> Result<()> {
    let (blob, manifest) = encode(groups);
    fs::write(blob_path, blob)?;
    fs::write(manifest_path, serde_json::to_string_pretty(&manifest)? + "\n")?;
    Ok(())
}

pub fn load(blob_path: &Path, manifest_path: &Path) -> Result<TensorGroups> {
    let manifest: Manifest = serde_json::from_str(&fs::read_to_string(manifest_path)?)?;
    let blob = fs::read(blob_path)?;
    decode(&blob, &manifest)
}

/// Conventional manifest location for a blob: `weights.bin` → `weights.json`.
pub fn manifest_path_for(blob_path: &Path) -> std::path::PathBuf {
    blob_path.with_extension("json")
}
