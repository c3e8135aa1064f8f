//! On-disk parameter format: a JSON manifest plus one little-endian f32 blob.

use super::{BackboneSpec, NetError, ParameterStore};
use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

const CHECKPOINT_SCHEMA: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    schema_version: u32,
    backbone: BackboneSpec,
    seed: u64,
    provenance: Vec<String>,
    dtype: String,
    tensors: Vec<TensorEntry>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    /// Byte offset into weights.bin.
    offset: u64,
}

fn io_err(path: &Path, source: std::io::Error) -> NetError {
    NetError::Io { path: path.to_path_buf(), source }
}

/// Writes `manifest.json` and `weights.bin` into `dir`. Tensors are stored
/// as little-endian f32 in name order; in-memory f64 values are narrowed.
pub fn save_params(store: &ParameterStore, dir: &Path) -> Result<(), NetError> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    let mut tensors = Vec::with_capacity(store.len());
    let mut blob: Vec<u8> = Vec::new();
    for (name, arr) in store.iter() {
        tensors.push(TensorEntry {
            name: name.clone(),
            shape: arr.shape().to_vec(),
            offset: blob.len() as u64,
        });
        for &v in arr.iter() {
            blob.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    let manifest = Manifest {
        schema_version: CHECKPOINT_SCHEMA,
        backbone: store.spec.clone(),
        seed: store.seed,
        provenance: store.provenance.clone(),
        dtype: "f32".into(),
        tensors,
    };
    let weights_path = dir.join("weights.bin");
    fs::write(&weights_path, &blob).map_err(|e| io_err(&weights_path, e))?;
    let mut text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    text.push('\n');
    let manifest_path = dir.join("manifest.json");
    fs::write(&manifest_path, text).map_err(|e| io_err(&manifest_path, e))?;
    Ok(())
}

/// Reads a checkpoint written by [`save_params`]. Stored f32 values widen to
/// f64 exactly, so a load-save cycle reproduces the files byte for byte.
pub fn load_params(dir: &Path) -> Result<ParameterStore, NetError> {
    let manifest_path = dir.join("manifest.json");
    let text = fs::read_to_string(&manifest_path).map_err(|e| io_err(&manifest_path, e))?;
    let manifest: Manifest =
        serde_json::from_str(&text).map_err(|e| NetError::Format(format!("manifest.json: {e}")))?;
    if manifest.schema_version != CHECKPOINT_SCHEMA {
        return Err(NetError::Format(format!(
            "unsupported schema version {}",
            manifest.schema_version
        )));
    }
    if manifest.dtype != "f32" {
        return Err(NetError::Format(format!("unsupported dtype '{}'", manifest.dtype)));
    }
    manifest.backbone.validate()?;

    let weights_path = dir.join("weights.bin");
    let blob = fs::read(&weights_path).map_err(|e| io_err(&weights_path, e))?;
    let mut params = BTreeMap::new();
    let mut expect_offset = 0usize;
    for entry in &manifest.tensors {
        if entry.offset as usize != expect_offset {
            return Err(NetError::Format(format!(
                "tensor '{}': offset {} out of order (expected {expect_offset})",
                entry.name, entry.offset
            )));
        }
        let count: usize = entry.shape.iter().product();
        let end = expect_offset + count * 4;
        if end > blob.len() {
            return Err(NetError::Format(format!(
                "weights.bin truncated: tensor '{}' needs bytes {expect_offset}..{end} of {}",
                entry.name,
                blob.len()
            )));
        }
        let mut vals = Vec::with_capacity(count);
        for chunk in blob[expect_offset..end].chunks_exact(4) {
            vals.push(f32::from_le_bytes(chunk.try_into().expect("4-byte chunk")) as f64);
        }
        let arr = ArrayD::from_shape_vec(IxDyn(&entry.shape), vals)
            .map_err(|e| NetError::Format(format!("tensor '{}': {e}", entry.name)))?;
        if params.insert(entry.name.clone(), arr).is_some() {
            return Err(NetError::Format(format!("duplicate tensor '{}'", entry.name)));
        }
        expect_offset = end;
    }
    if expect_offset != blob.len() {
        return Err(NetError::Format(format!(
            "weights.bin has {} trailing bytes",
            blob.len() - expect_offset
        )));
    }
    Ok(ParameterStore::from_parts(
        manifest.backbone,
        manifest.seed,
        manifest.provenance,
        params,
    ))
}
