//! Flat tensor archives.
//!
//! Weights are stored as safetensors: a little-endian JSON header mapping
//! each name to dtype, shape and byte range, followed by the raw
//! little-endian f32 payload. Backbone archives use bare names such as
//! `stage3.layer14.weight` or `stage3.layer15.running_var`; full model
//! checkpoints prefix them with `backbone.` and add `decoder.*` entries.

use std::collections::HashMap;
use std::path::Path;

use candle_core::{DType, Tensor};

use crate::{Error, Result};

pub const BACKBONE_PREFIX: &str = "backbone.";

/// Write named tensors as f32.
pub fn save_tensors(path: impl AsRef<Path>, tensors: &[(String, Tensor)]) -> Result<()> {
    let map = tensors
        .iter()
        .map(|(k, t)| Ok((k.clone(), t.to_dtype(DType::F32)?)))
        .collect::<Result<HashMap<_, _>>>()?;
    candle_core::safetensors::save(&map, path.as_ref())?;
    Ok(())
}

pub fn load_tensors(path: impl AsRef<Path>) -> Result<HashMap<String, Tensor>> {
    let path = path.as_ref();
    if !path.exists() {
        return Err(Error::ingestion(path, "weight archive not found"));
    }
    Ok(candle_core::safetensors::load(path, &crate::device())?)
}

/// Whether a name follows the `stage{1..5}.layer{m}.{weight|bias|running_mean|running_var}` scheme.
pub fn is_backbone_key(name: &str) -> bool {
    let parts: Vec<&str> = name.split('.').collect();
    if parts.len() != 3 {
        return false;
    }
    let stage_ok = parts[0]
        .strip_prefix("stage")
        .and_then(|s| s.parse::<usize>().ok())
        .is_some_and(|s| (1..=5).contains(&s));
    let layer_ok = parts[1]
        .strip_prefix("layer")
        .and_then(|s| s.parse::<usize>().ok())
        .is_some_and(|m| m < 44);
    stage_ok && layer_ok && matches!(parts[2], "weight" | "bias" | "running_mean" | "running_var")
}
