//! safetensors containers of `f64` arrays with one JSON metadata entry.
//!
//! The header metadata map holds a single key, `milx`, whose value is the
//! JSON-encoded metadata; a single key keeps the header byte-stable.

use std::collections::HashMap;
use std::path::Path;

use milx_core::Tensor;
use safetensors::tensor::{Dtype, SafeTensors, TensorView};
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};

pub const METADATA_KEY: &str = "milx";

fn le_bytes(t: &Tensor) -> Vec<u8> {
    t.data().iter().flat_map(|v| v.to_le_bytes()).collect()
}

pub fn encode<M: Serialize>(tensors: &[(String, &Tensor)], metadata: &M) -> Result<Vec<u8>> {
    let bytes: Vec<(String, Vec<u8>, Vec<usize>)> = tensors.iter().map(|(n, t)| (n.clone(), le_bytes(t), t.shape().to_vec())).collect();
    let views = bytes
        .iter()
        .map(|(n, b, s)| {
            TensorView::new(Dtype::F64, s.clone(), b).map(|v| (n.clone(), v)).map_err(|e| Error::Runtime(format!("tensor `{n}`: {e}")))
        })
        .collect::<Result<Vec<_>>>()?;
    let json = serde_json::to_string(metadata).map_err(|e| Error::Runtime(e.to_string()))?;
    let meta = Some(HashMap::from([(METADATA_KEY.to_string(), json)]));
    safetensors::serialize(views, &meta).map_err(|e| Error::Runtime(e.to_string()))
}

pub fn write<M: Serialize>(path: &Path, tensors: &[(String, &Tensor)], metadata: &M) -> Result<Vec<u8>> {
    let bytes = encode(tensors, metadata)?;
    std::fs::write(path, &bytes).map_err(|e| Error::io(path, e))?;
    Ok(bytes)
}

/// Decoded container: metadata plus tensors keyed by name.
pub struct Decoded<M> {
    pub metadata: M,
    pub tensors: HashMap<String, Tensor>,
}

pub fn decode<M: DeserializeOwned>(bytes: &[u8], origin: &str) -> Result<Decoded<M>> {
    let bad = |m: String| Error::Data(format!("{origin}: {m}"));
    let (_, header) = SafeTensors::read_metadata(bytes).map_err(|e| bad(e.to_string()))?;
    let json = header
        .metadata()
        .as_ref()
        .and_then(|m| m.get(METADATA_KEY))
        .ok_or_else(|| bad(format!("missing `{METADATA_KEY}` metadata")))?;
    let metadata = serde_json::from_str(json).map_err(|e| bad(format!("metadata: {e}")))?;
    let st = SafeTensors::deserialize(bytes).map_err(|e| bad(e.to_string()))?;
    let mut tensors = HashMap::new();
    for (name, view) in st.tensors() {
        if view.dtype() != Dtype::F64 {
            return Err(bad(format!("tensor `{name}` is {:?}, expected F64", view.dtype())));
        }
        let data = view.data().chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        tensors.insert(name, Tensor::from_vec(view.shape(), data));
    }
    Ok(Decoded { metadata, tensors })
}

pub fn read<M: DeserializeOwned>(path: &Path) -> Result<(Decoded<M>, Vec<u8>)> {
    let bytes = std::fs::read(path).map_err(|e| Error::read(path, e))?;
    Ok((decode(&bytes, &path.display().to_string())?, bytes))
}
