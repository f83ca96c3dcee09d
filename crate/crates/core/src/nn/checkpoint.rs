//! Checkpoints are safetensors archives: parameters under `param.<name>`,
//! optional optimizer moments under `optim.<m|v>.<name>`, and string
//! metadata (the model config lives under `config`).

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use candle_core::{Device, Tensor};

use super::{Adam, ParamStore};
use crate::error::{Error, Result};

const OPTIM_STEP: &str = "optim_step";

pub fn save_checkpoint(
    path: impl AsRef<Path>,
    store: &ParamStore,
    metadata: &BTreeMap<String, String>,
    optimizer: Option<&Adam>,
) -> Result<()> {
    let mut tensors: Vec<(String, Tensor)> =
        store.named_vars().map(|(n, v)| (format!("param.{n}"), v.as_tensor().clone())).collect();
    let mut meta: HashMap<String, String> = metadata.iter().map(|(k, v)| (k.clone(), v.clone())).collect();
    if let Some(opt) = optimizer {
        tensors.extend(opt.state().into_iter().map(|(n, t)| (format!("optim.{n}"), t)));
        meta.insert(OPTIM_STEP.into(), opt.steps_taken().to_string());
    }
    let path = path.as_ref();
    let bytes = safetensors::serialize(tensors, Some(meta)).map_err(|e| Error::format(path, e.to_string()))?;
    std::fs::write(path, sorted_header(&bytes).map_err(|e| Error::format(path, e))?)?;
    Ok(())
}

/// Rewrites the JSON header with sorted keys; the metadata map would
/// otherwise come out in hash order and make identical checkpoints differ.
fn sorted_header(bytes: &[u8]) -> std::result::Result<Vec<u8>, String> {
    let n = bytes.get(..8).map(|b| u64::from_le_bytes(b.try_into().unwrap()) as usize).ok_or("short archive")?;
    let header = bytes.get(8..8 + n).ok_or("truncated header")?;
    let mut h: BTreeMap<String, serde_json::Value> = serde_json::from_slice(header).map_err(|e| e.to_string())?;
    if let Some(m) = h.remove("__metadata__") {
        let m: BTreeMap<String, String> = serde_json::from_value(m).map_err(|e| e.to_string())?;
        h.insert("__metadata__".into(), serde_json::to_value(m).map_err(|e| e.to_string())?);
    }
    let mut text = serde_json::to_string(&h).map_err(|e| e.to_string())?;
    while text.len() % 8 != 0 {
        text.push(' ');
    }
    let mut out = Vec::with_capacity(8 + text.len() + bytes.len() - 8 - n);
    out.extend_from_slice(&(text.len() as u64).to_le_bytes());
    out.extend_from_slice(text.as_bytes());
    out.extend_from_slice(&bytes[8 + n..]);
    Ok(out)
}

pub fn read_checkpoint_config(path: impl AsRef<Path>) -> Result<BTreeMap<String, String>> {
    let path = path.as_ref();
    let bytes = std::fs::read(path)?;
    let (_, meta) = safetensors::SafeTensors::read_metadata(&bytes).map_err(|e| Error::format(path, e.to_string()))?;
    Ok(meta.metadata().clone().unwrap_or_default().into_iter().collect())
}

/// Loads parameters into `store` (and moments into `optimizer`), returning
/// the metadata.
pub fn load_checkpoint(
    path: impl AsRef<Path>,
    store: &ParamStore,
    optimizer: Option<&mut Adam>,
) -> Result<BTreeMap<String, String>> {
    let path = path.as_ref();
    let meta = read_checkpoint_config(path)?;
    let bytes = std::fs::read(path)?;
    let all = candle_core::safetensors::load_buffer(&bytes, &Device::Cpu)?;
    let mut params = HashMap::new();
    let mut optim = HashMap::new();
    for (name, t) in all {
        if let Some(n) = name.strip_prefix("param.") {
            params.insert(n.to_string(), t);
        } else if let Some(n) = name.strip_prefix("optim.") {
            optim.insert(n.to_string(), t);
        }
    }
    store.assign(&params)?;
    if let Some(opt) = optimizer {
        let step = meta
            .get(OPTIM_STEP)
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::format(path, "checkpoint has no optimizer state"))?;
        opt.restore(step, &optim)?;
    }
    Ok(meta)
}
