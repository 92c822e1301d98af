//! Checkpoint directories: `manifest.json`, `params.safetensors`, `optimizer.safetensors`.

use std::path::{Path, PathBuf};

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::data::DataShape;
use crate::error::{Error, Result};
use crate::params::{ParamStore, DEVICE};

use super::adam::Adam;

pub const MANIFEST: &str = "manifest.json";
pub const PARAMS: &str = "params.safetensors";
pub const OPTIMIZER: &str = "optimizer.safetensors";

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub config_hash: String,
    pub config: RunConfig,
    pub shape: DataShape,
    /// Completed optimization steps.
    pub iteration: usize,
    pub best_validation_loss: Option<f64>,
    pub best_iteration: Option<usize>,
    /// Iterations since the last validation improvement.
    pub since_best: usize,
    pub adam_steps: u64,
    pub rng: ChaCha8Rng,
}

/// Writes a checkpoint into `dir` atomically: everything goes to a temporary
/// sibling directory that is renamed into place.
pub fn save(dir: &Path, manifest: &Manifest, params: &ParamStore, adam: &Adam) -> Result<()> {
    let parent = dir
        .parent()
        .ok_or_else(|| Error::Checkpoint(format!("{} has no parent directory", dir.display())))?;
    std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    let name = dir
        .file_name()
        .and_then(|n| n.to_str())
        .ok_or_else(|| Error::Checkpoint(format!("bad checkpoint path {}", dir.display())))?;
    let tmp = parent.join(format!(".{name}.tmp"));
    let old = parent.join(format!(".{name}.old"));
    for p in [&tmp, &old] {
        if p.exists() {
            std::fs::remove_dir_all(p).map_err(|e| Error::io(p, e))?;
        }
    }
    std::fs::create_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;
    candle_core::safetensors::save(&params.to_tensors(), tmp.join(PARAMS))?;
    candle_core::safetensors::save(&adam.state_tensors(), tmp.join(OPTIMIZER))?;
    let mp = tmp.join(MANIFEST);
    std::fs::write(&mp, serde_json::to_vec_pretty(manifest)?).map_err(|e| Error::io(&mp, e))?;
    if dir.exists() {
        std::fs::rename(dir, &old).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::rename(&tmp, dir).map_err(|e| Error::io(dir, e))?;
    if old.exists() {
        std::fs::remove_dir_all(&old).map_err(|e| Error::io(&old, e))?;
    }
    Ok(())
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let mp = dir.join(MANIFEST);
    let bytes = std::fs::read(&mp).map_err(|e| Error::io(&mp, e))?;
    serde_json::from_slice(&bytes)
        .map_err(|e| Error::Checkpoint(format!("unreadable manifest {}: {e}", mp.display())))
}

pub fn load_params(dir: &Path, params: &ParamStore) -> Result<()> {
    let p = dir.join(PARAMS);
    if !p.exists() {
        return Err(Error::Checkpoint(format!("missing {}", p.display())));
    }
    params.load_tensors(&candle_core::safetensors::load(&p, &DEVICE)?)
}

pub fn load_optimizer(dir: &Path, manifest: &Manifest, adam: &mut Adam) -> Result<()> {
    let p = dir.join(OPTIMIZER);
    if !p.exists() {
        return Err(Error::Checkpoint(format!("missing {}", p.display())));
    }
    adam.load_state(manifest.adam_steps, candle_core::safetensors::load(&p, &DEVICE)?)
}

/// Standard locations inside a run directory.
pub fn best_dir(run_dir: &Path) -> PathBuf {
    run_dir.join("checkpoints").join("best")
}

pub fn latest_dir(run_dir: &Path) -> PathBuf {
    run_dir.join("checkpoints").join("latest")
}
