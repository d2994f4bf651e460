//! Model checkpoints: a safetensors container keyed by layer-registry
//! parameter names (`backbone.conv1.weight`, ...) whose metadata holds the
//! format version, the architecture and the producing config digest. The
//! checkpoint digest is the SHA-256 of the file.

use std::path::Path;

use milx_core::milnet::{MilModel, ModelConfig};
use milx_core::trainer::TrainingLog;
use serde::{Deserialize, Serialize};

use crate::container;
use crate::digest::sha256_hex;
use crate::error::{Error, Result};

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub format_version: u32,
    pub model: ModelConfig,
    pub config_digest: String,
    pub best_epoch: usize,
    pub best_val_loss: f64,
}

pub struct Checkpoint {
    pub model: MilModel,
    pub meta: CheckpointMeta,
    pub digest: String,
}

/// Writes the checkpoint and returns its digest.
pub fn save(path: &Path, model: &MilModel, log: &TrainingLog, config_digest: &str) -> Result<String> {
    let meta = CheckpointMeta {
        format_version: CHECKPOINT_FORMAT_VERSION,
        model: model.config().clone(),
        config_digest: config_digest.into(),
        best_epoch: log.best_epoch,
        best_val_loss: log.best_val_loss,
    };
    let tensors: Vec<(String, &milx_core::Tensor)> = model.params().iter().map(|(n, t)| (n.to_string(), t)).collect();
    let bytes = container::write(path, &tensors, &meta)?;
    Ok(sha256_hex(&bytes))
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let (decoded, bytes) = container::read::<serde_json::Value>(path)?;
    let version = decoded.metadata.get("format_version").and_then(|v| v.as_u64());
    if version != Some(CHECKPOINT_FORMAT_VERSION as u64) {
        return Err(Error::Data(format!(
            "{}: checkpoint format version {version:?} is not supported (expected {CHECKPOINT_FORMAT_VERSION})",
            path.display()
        )));
    }
    let meta: CheckpointMeta =
        serde_json::from_value(decoded.metadata).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let mut named: Vec<_> = decoded.tensors.into_iter().collect();
    named.sort_by(|a, b| a.0.cmp(&b.0));
    let model = MilModel::from_parts(meta.model.clone(), named)?;
    Ok(Checkpoint { model, meta, digest: sha256_hex(&bytes) })
}

/// The checkpoint's architecture must match the one in the run config.
pub fn check_architecture(ckpt: &Checkpoint, expected: &ModelConfig) -> Result<()> {
    if &ckpt.meta.model != expected {
        return Err(Error::Config(
            "checkpoint architecture does not match the `[model]` table of the config".into(),
        ));
    }
    Ok(())
}
