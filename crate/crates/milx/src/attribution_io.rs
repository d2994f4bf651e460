//! Attribution result files: one safetensors container per bag, tensors
//! `map.000`, `map.001`, ... in instance order, metadata with the method, its
//! hyperparameters (calibration statistics left out), the target class and
//! the provenance digests.

use std::path::Path;

use milx_core::attributions::{AttributionResult, Method, MethodConfig};
use serde::{Deserialize, Serialize};

use crate::container;
use crate::digest::Provenance;
use crate::error::{Error, Result};

pub const ATTRIBUTION_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributionMeta {
    pub format_version: u32,
    pub method: Method,
    pub bag_id: String,
    pub target_class: usize,
    pub signed: bool,
    pub instance_ids: Vec<String>,
    pub config: MethodConfig,
    pub provenance: Provenance,
}

fn key(i: usize) -> String {
    format!("map.{i:03}")
}

pub fn encode(result: &AttributionResult, instance_ids: &[String], provenance: &Provenance) -> Result<Vec<u8>> {
    let meta = AttributionMeta {
        format_version: ATTRIBUTION_FORMAT_VERSION,
        method: result.method,
        bag_id: result.bag_id.clone(),
        target_class: result.target_class,
        signed: result.signed,
        instance_ids: instance_ids.to_vec(),
        config: result.metadata.for_metadata(),
        provenance: provenance.clone(),
    };
    let tensors: Vec<_> = result.maps.iter().enumerate().map(|(i, m)| (key(i), m)).collect();
    container::encode(&tensors, &meta)
}

pub fn write(path: &Path, result: &AttributionResult, instance_ids: &[String], provenance: &Provenance) -> Result<()> {
    let bytes = encode(result, instance_ids, provenance)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read(path: &Path) -> Result<(AttributionMeta, AttributionResult)> {
    let (mut decoded, _) = container::read::<AttributionMeta>(path)?;
    let meta = decoded.metadata;
    if meta.format_version != ATTRIBUTION_FORMAT_VERSION {
        return Err(Error::Data(format!(
            "{}: attribution format version {} is not supported (expected {ATTRIBUTION_FORMAT_VERSION})",
            path.display(),
            meta.format_version
        )));
    }
    let maps = (0..meta.instance_ids.len())
        .map(|i| decoded.tensors.remove(&key(i)).ok_or_else(|| Error::Data(format!("{}: missing `{}`", path.display(), key(i)))))
        .collect::<Result<Vec<_>>>()?;
    let result = AttributionResult {
        method: meta.method,
        bag_id: meta.bag_id.clone(),
        target_class: meta.target_class,
        maps,
        signed: meta.signed,
        metadata: meta.config.clone(),
    };
    Ok((meta, result))
}
