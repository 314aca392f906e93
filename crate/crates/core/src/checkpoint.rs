//! Checkpoints: safetensors archives whose metadata carries the full run
//! configuration.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use safetensors::SafeTensors;

use crate::config::{Config, ModelConfig};
use crate::error::{Error, Result};
use crate::model::TextSpotter;

const FORMAT: &str = "textspotter-checkpoint-1";

pub fn save(model: &TextSpotter, config: &Config, path: &Path) -> Result<()> {
    let mut cfg = config.clone();
    cfg.model = model.config().clone();
    let tensors: BTreeMap<String, Tensor> = model.params().tensors();
    let mut meta = HashMap::new();
    meta.insert("format".to_string(), FORMAT.to_string());
    meta.insert("config".to_string(), serde_json::to_string(&cfg)?);
    let data: Vec<(&String, &Tensor)> = tensors.iter().collect();
    safetensors::serialize_to_file(data, Some(meta), path)
        .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))
}

/// Stored parameters and configuration.
#[derive(Debug)]
pub struct Checkpoint {
    pub config: Config,
    pub tensors: HashMap<String, Tensor>,
}

pub fn read(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path)?;
    let bad = |m: String| Error::Checkpoint(format!("{}: {m}", path.display()));
    let (_, header) = SafeTensors::read_metadata(&bytes).map_err(|e| bad(e.to_string()))?;
    let meta = header
        .metadata()
        .as_ref()
        .ok_or_else(|| bad("no metadata block".into()))?;
    if meta.get("format").map(String::as_str) != Some(FORMAT) {
        return Err(bad("not a textspotter checkpoint".into()));
    }
    let config: Config = serde_json::from_str(meta.get("config").ok_or_else(|| bad("no config".into()))?)?;
    let tensors = candle_core::safetensors::load_buffer(&bytes, &Device::Cpu)?;
    Ok(Checkpoint { config, tensors })
}

/// Loads the model exactly as it was saved.
pub fn load(path: &Path) -> Result<(TextSpotter, Config)> {
    let ck = read(path)?;
    let model = TextSpotter::from_tensors(&ck.config.model, ck.tensors, DType::F32)?;
    Ok((model, ck.config))
}

/// Loads the model, refusing when its architecture differs from `expected`.
pub fn load_matching(path: &Path, expected: &ModelConfig) -> Result<(TextSpotter, Config)> {
    let ck = read(path)?;
    let config = ck.config.clone();
    Ok((ck.into_model(expected)?, config))
}

impl Checkpoint {
    /// Builds the stored model if its architecture equals `expected`, and
    /// otherwise reports every differing field.
    pub fn into_model(self, expected: &ModelConfig) -> Result<TextSpotter> {
        let diff = model_diff(&self.config.model, expected)?;
        if !diff.is_empty() {
            return Err(Error::Checkpoint(format!(
                "checkpoint model does not match the configuration: {}",
                diff.join("; ")
            )));
        }
        TextSpotter::from_tensors(&self.config.model, self.tensors, DType::F32)
    }
}

/// `field: checkpoint X, config Y` for every differing model field.
pub fn model_diff(stored: &ModelConfig, expected: &ModelConfig) -> Result<Vec<String>> {
    let a = serde_json::to_value(stored)?;
    let b = serde_json::to_value(expected)?;
    let (Some(a), Some(b)) = (a.as_object(), b.as_object()) else {
        return Ok(Vec::new());
    };
    let mut out = Vec::new();
    for (k, va) in a {
        let vb = b.get(k).cloned().unwrap_or_default();
        if *va != vb {
            out.push(format!("model.{k}: checkpoint {va}, config {vb}"));
        }
    }
    Ok(out)
}
