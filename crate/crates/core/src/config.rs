//! Run configuration: typed sections merged from a `key = value` file, the
//! environment and command-line overrides, validated as a whole.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::datagen::DatasetManifest;
use crate::error::{Error, Result};
use crate::features::FrontendConfig;
use crate::model::ModelConfig;
use crate::pipeline::EvalSettings;
use crate::training::{AugmentConfig, BatchSpec, PretrainConfig, TrainSchedule};

/// Prefix of environment variables read as overrides. `__` separates
/// sections, so `ASTSED_MODEL__EMBED_DIM=16` sets `model.embed_dim`.
pub const ENV_PREFIX: &str = "ASTSED_";

/// File name of the resolved-config echo written to the output directory.
pub const RESOLVED_NAME: &str = "resolved_config.cfg";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSection {
    pub seed: u64,
    /// Worker cap; 1 keeps every floating-point reduction in a fixed order.
    pub threads: usize,
    pub data_dir: PathBuf,
    pub out_dir: PathBuf,
}

impl Default for RunSection {
    fn default() -> Self {
        RunSection { seed: 0, threads: 1, data_dir: "data".into(), out_dir: "runs/default".into() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub run: RunSection,
    pub data: DatasetManifest,
    pub features: FrontendConfig,
    pub model: ModelConfig,
    pub train: TrainSchedule,
    pub batch: BatchSpec,
    pub augment: AugmentConfig,
    pub pretrain: PretrainConfig,
    pub eval: EvalSettings,
}

/// Defaults target the desk-scale toy setup rather than the full-size model.
impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            run: RunSection::default(),
            data: DatasetManifest::default(),
            features: FrontendConfig::default(),
            model: ModelConfig::toy(),
            train: TrainSchedule::toy(),
            batch: BatchSpec::default(),
            augment: AugmentConfig::default(),
            pretrain: PretrainConfig::default(),
            eval: EvalSettings::default(),
        }
    }
}

/// Parses a right-hand side: JSON when it parses as JSON, a bare string otherwise.
fn parse_value(raw: &str) -> Value {
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

/// Reads `key = value` lines. Blank lines and `#` comments are skipped.
pub fn parse_pairs(text: &str, origin: &str) -> Result<Vec<(String, Value)>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("{origin}:{}: expected `key = value`, got `{line}`", n + 1)))?;
        out.push((k.trim().to_string(), parse_value(v.trim())));
    }
    Ok(out)
}

/// Parses one `--set key=value` override.
pub fn parse_assignment(s: &str) -> Result<(String, Value)> {
    let (k, v) = s.split_once('=').ok_or_else(|| Error::Config(format!("override `{s}` is not `key=value`")))?;
    Ok((k.trim().to_string(), parse_value(v.trim())))
}

/// Overrides taken from `ASTSED_*` variables.
pub fn env_pairs(vars: impl IntoIterator<Item = (String, String)>) -> Vec<(String, Value)> {
    let mut out: Vec<(String, Value)> = vars
        .into_iter()
        .filter_map(|(k, v)| {
            let rest = k.strip_prefix(ENV_PREFIX)?;
            Some((rest.to_lowercase().replace("__", "."), parse_value(&v)))
        })
        .collect();
    out.sort_by(|a, b| a.0.cmp(&b.0));
    out
}

/// Sets `key` inside `tree`. Only paths present in the defaults are accepted;
/// numeric segments index arrays.
fn set_path(tree: &mut Value, key: &str, value: Value) -> Result<()> {
    let mut node = tree;
    let segments: Vec<&str> = key.split('.').collect();
    for (i, seg) in segments.iter().enumerate() {
        let next = match node {
            Value::Object(map) => map.get_mut(*seg),
            Value::Array(items) => seg.parse::<usize>().ok().and_then(|j| items.get_mut(j)),
            _ => None,
        };
        node = next.ok_or_else(|| {
            Error::Config(format!("unknown config key `{key}` (no `{}`)", segments[..=i].join(".")))
        })?;
    }
    *node = value;
    Ok(())
}

fn flatten(prefix: &str, v: &Value, out: &mut Vec<String>) {
    match v {
        Value::Object(map) => {
            for (k, child) in map {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(&key, child, out);
            }
        }
        other => out.push(format!("{prefix} = {other}")),
    }
}

impl RunConfig {
    /// Applies overrides in order (later wins) on top of the defaults.
    pub fn resolve(layers: &[(String, Value)]) -> Result<Self> {
        let mut tree = serde_json::to_value(RunConfig::default()).map_err(|e| Error::Config(e.to_string()))?;
        for (k, v) in layers {
            set_path(&mut tree, k, v.clone())?;
        }
        let mut cfg: RunConfig =
            serde_json::from_value(tree).map_err(|e| Error::Config(format!("invalid configuration value: {e}")))?;
        // The dataset seed follows the run seed so `--seed` drives everything.
        cfg.data.seed = cfg.run.seed;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config file and resolves it with further overrides.
    pub fn load(file: Option<&Path>, env: Vec<(String, Value)>, flags: Vec<(String, Value)>) -> Result<Self> {
        let mut layers = Vec::new();
        if let Some(path) = file {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            layers.extend(parse_pairs(&text, &path.display().to_string())?);
        }
        layers.extend(env);
        layers.extend(flags);
        Self::resolve(&layers)
    }

    /// Every section plus the cross-section consistency checks.
    pub fn validate(&self) -> Result<()> {
        if self.run.threads == 0 {
            return Err(Error::Config("run.threads must be at least 1".into()));
        }
        self.data.validate()?;
        let fe = &self.features;
        if fe.sample_rate == 0 || !(fe.window > 0.0) || !(fe.hop > 0.0) || fe.mel_bins == 0 || !(fe.floor_eps > 0.0) {
            return Err(Error::Config("features.* must all be positive".into()));
        }
        self.model.validate()?;
        self.train.validate()?;
        self.batch.validate()?;
        self.pretrain.validate()?;
        let a = &self.augment;
        for (k, p) in [("mixup", a.mixup), ("time_shift", a.time_shift), ("time_mask", a.time_mask), ("filter_augment", a.filter_augment)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("augment.{k} is a probability, got {p}")));
            }
        }
        if !(a.mixup_beta > 0.0) || !(0.0..=1.0).contains(&a.mask_max_fraction) || a.filter_db < 0.0 {
            return Err(Error::Config("augment.mixup_beta must be positive and augment.mask_max_fraction in [0, 1]".into()));
        }
        if a.filter_segments.0 == 0 || a.filter_segments.0 > a.filter_segments.1 {
            return Err(Error::Config(format!("augment.filter_segments {:?} is not a valid range", a.filter_segments)));
        }
        let k = self.data.vocabulary.len();
        self.eval.decode.validate(k)?;
        self.eval.matching.validate()?;
        self.eval.psds.validate()?;

        let m = &self.model;
        if fe.sample_rate != self.data.synth.sample_rate {
            return Err(Error::Config(format!(
                "features.sample_rate {} differs from data.synth.sample_rate {}",
                fe.sample_rate, self.data.synth.sample_rate
            )));
        }
        if m.mel_bins != fe.mel_bins {
            return Err(Error::Config(format!("model.mel_bins {} differs from features.mel_bins {}", m.mel_bins, fe.mel_bins)));
        }
        let samples = (self.data.synth.clip_length * fe.sample_rate as f64).round() as usize;
        match fe.frames_for(samples) {
            Some(t) if t == m.frames => {}
            other => {
                return Err(Error::Config(format!(
                    "model.frames {} but a {} s clip yields {:?} frames",
                    m.frames, self.data.synth.clip_length, other
                )))
            }
        }
        if (m.clip_duration - self.data.synth.clip_length).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "model.clip_duration {} differs from data.synth.clip_length {}",
                m.clip_duration, self.data.synth.clip_length
            )));
        }
        if m.num_classes != k {
            return Err(Error::Config(format!("model.num_classes {} but data.vocabulary has {k} templates", m.num_classes)));
        }
        Ok(())
    }

    /// The resolved configuration as `key = value` lines, readable by [`RunConfig::load`].
    pub fn to_cfg(&self) -> String {
        let tree = serde_json::to_value(self).expect("config serializes");
        let mut lines = Vec::new();
        flatten("", &tree, &mut lines);
        lines.join("\n") + "\n"
    }

    /// Writes [`RunConfig::to_cfg`] into `dir`.
    pub fn echo(&self, dir: &Path) -> Result<PathBuf> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(RESOLVED_NAME);
        std::fs::write(&path, self.to_cfg()).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }
}
