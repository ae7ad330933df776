use std::path::{Path, PathBuf};

use serde_json::Value;

use super::config::ModelConfig;
use super::network::is_backbone_path;
use crate::error::{Error, Result};
use crate::tensor::ParamTree;

/// Path of the config record stored next to a parameter container.
pub fn config_path(params: &Path) -> PathBuf {
    let mut name = params.as_os_str().to_owned();
    name.push(".json");
    PathBuf::from(name)
}

pub fn save_checkpoint(path: &Path, params: &ParamTree, cfg: &ModelConfig) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    params.save(path)?;
    let cfg_path = config_path(path);
    let json = serde_json::to_string_pretty(cfg).expect("config serializes");
    std::fs::write(&cfg_path, json + "\n").map_err(|e| Error::io(&cfg_path, e))
}

pub fn read_checkpoint_config(path: &Path) -> Result<ModelConfig> {
    let cfg_path = config_path(path);
    let text = std::fs::read_to_string(&cfg_path).map_err(|e| Error::io(&cfg_path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::format(&cfg_path, e.to_string()))
}

/// First field (in declaration order) where two configs differ, restricted to `fields` when given.
pub fn first_divergent_field(a: &ModelConfig, b: &ModelConfig, fields: Option<&[&str]>) -> Option<String> {
    let (Value::Object(va), Value::Object(vb)) = (serde_json::to_value(a).unwrap(), serde_json::to_value(b).unwrap())
    else {
        unreachable!("configs serialize to objects")
    };
    va.iter()
        .filter(|(k, _)| fields.is_none_or(|f| f.contains(&k.as_str())))
        .find(|(k, v)| vb.get(*k) != Some(v))
        .map(|(k, _)| k.clone())
}

/// Loads parameters; the stored config must equal `expected` in every field.
pub fn load_checkpoint(path: &Path, expected: &ModelConfig) -> Result<ParamTree> {
    let stored = read_checkpoint_config(path)?;
    if let Some(field) = first_divergent_field(&stored, expected, None) {
        return Err(Error::Config(format!(
            "checkpoint {} was saved with a different model.{field}",
            path.display()
        )));
    }
    ParamTree::load(path)
}

/// Fields that shape the backbone parameters.
pub const BACKBONE_FIELDS: [&str; 11] = [
    "mel_bins",
    "frames",
    "patch_height",
    "patch_width",
    "stride_freq",
    "stride_time",
    "time_pad",
    "embed_dim",
    "pte_depth",
    "pte_heads",
    "mlp_ratio",
];

/// Overwrites the backbone leaves of `target` with those of a pretrained
/// checkpoint; every other leaf keeps its fresh initialization.
pub fn load_backbone_into(path: &Path, cfg: &ModelConfig, target: &mut ParamTree) -> Result<usize> {
    let stored = read_checkpoint_config(path)?;
    if let Some(field) = first_divergent_field(&stored, cfg, Some(&BACKBONE_FIELDS)) {
        return Err(Error::Config(format!(
            "backbone checkpoint {} was saved with a different model.{field}",
            path.display()
        )));
    }
    let source = ParamTree::load(path)?;
    let mut copied = 0;
    for (p, v) in source.iter().filter(|(p, _)| is_backbone_path(p)) {
        target.set(p, v.clone())?;
        copied += 1;
    }
    Ok(copied)
}
