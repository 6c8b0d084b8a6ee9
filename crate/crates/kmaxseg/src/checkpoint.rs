//! Checkpoint directories: `manifest.json` plus a `state.bin` blob.
//!
//! The blob is the magic `KMXS`, the optimizer step as a little-endian `u64`,
//! then every parameter value, first moment and second moment as
//! little-endian `f64` in store order.

use std::fs;
use std::path::Path;

use kmaxseg_core::model::Model;
use kmaxseg_core::trainer::{TrainConfig, TrainState};
use kmaxseg_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::config::config_hash;
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"KMXS";
pub const MANIFEST: &str = "manifest.json";
pub const BLOB: &str = "state.bin";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config_hash: String,
    pub step: u64,
    pub seed: u64,
    pub config: TrainConfig,
    pub params: Vec<ParamEntry>,
}

pub fn save_checkpoint(dir: &Path, config: &TrainConfig, state: &TrainState) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let manifest = Manifest {
        config_hash: config_hash(config),
        step: state.step,
        seed: config.seed,
        config: config.clone(),
        params: state
            .params
            .iter()
            .map(|p| ParamEntry { name: p.name.clone(), shape: p.value.shape().to_vec() })
            .collect(),
    };
    let mut blob = Vec::with_capacity(12 + 24 * state.params.scalar_count());
    blob.extend_from_slice(MAGIC);
    blob.extend_from_slice(&state.optimizer.step.to_le_bytes());
    let tensors = state.params.iter().map(|p| &p.value).chain(&state.optimizer.m).chain(&state.optimizer.v);
    for t in tensors {
        for v in t.data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }
    let blob_path = dir.join(BLOB);
    fs::write(&blob_path, blob).map_err(|e| Error::io(&blob_path, e))?;
    let manifest_path = dir.join(MANIFEST);
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes") + "\n";
    fs::write(&manifest_path, text).map_err(|e| Error::io(&manifest_path, e))
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: Manifest = serde_json::from_str(&text)
        .map_err(|e| Error::format(&path, format!("line {} column {}: {e}", e.line(), e.column())))?;
    let actual = config_hash(&manifest.config);
    if actual != manifest.config_hash {
        return Err(Error::Mismatch(format!(
            "{} records config hash {} but its embedded config hashes to {actual}",
            path.display(),
            manifest.config_hash
        )));
    }
    Ok(manifest)
}

/// Rebuilds the model and restores the exact training state.
pub fn load_checkpoint(dir: &Path) -> Result<(Manifest, Model, TrainState)> {
    let manifest = read_manifest(dir)?;
    let config = &manifest.config;
    let (model, params) = Model::build(config.model.clone(), config.seed)?;
    let mut state = TrainState::new(params, config);
    let layout: Vec<ParamEntry> = state
        .params
        .iter()
        .map(|p| ParamEntry { name: p.name.clone(), shape: p.value.shape().to_vec() })
        .collect();
    if layout != manifest.params {
        return Err(Error::Mismatch(format!(
            "{}: parameter layout does not match the model built from its config",
            dir.display()
        )));
    }
    let path = dir.join(BLOB);
    let blob = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let n = state.params.scalar_count();
    let expected = 12 + 24 * n;
    if blob.len() != expected || &blob[..4] != MAGIC {
        return Err(Error::format(&path, format!("state blob has {} bytes, expected {expected} with magic KMXS", blob.len())));
    }
    state.optimizer.step = u64::from_le_bytes(blob[4..12].try_into().expect("8 bytes"));
    let values: Vec<f64> = blob[12..]
        .chunks_exact(8)
        .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
        .collect();
    state.params.load_flat(&values[..n])?;
    let mut at = n;
    for t in state.optimizer.m.iter_mut().chain(state.optimizer.v.iter_mut()) {
        let len = t.len();
        *t = Tensor::from_vec(t.shape(), values[at..at + len].to_vec())?;
        at += len;
    }
    state.step = manifest.step;
    Ok((manifest, model, state))
}
