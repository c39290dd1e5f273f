//! Run configuration: one JSON document covering data, preprocessing, model and
//! federation settings, with dotted-key overrides and a canonical hash.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::datagen::SynthSpec;
use crate::error::{Error, Result};
use crate::federation::FederationConfig;
use crate::imaging::PreprocessConfig;
use crate::model::ModelConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Dataset root containing `manifest.jsonl`.
    pub dataset_dir: PathBuf,
    pub train_fraction: f64,
    pub val_fraction: f64,
    pub split_seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            dataset_dir: PathBuf::from("data/processed"),
            train_fraction: 0.7,
            val_fraction: 0.15,
            split_seed: 2024,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    /// Root holding one directory per run.
    pub runs_dir: PathBuf,
    /// Defaults to `<mode>-<config hash>` when unset.
    pub run_id: Option<String>,
}

impl Default for OutputConfig {
    fn default() -> Self {
        OutputConfig {
            runs_dir: PathBuf::from("runs"),
            run_id: None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataConfig,
    pub preprocess: PreprocessConfig,
    pub model: ModelConfig,
    pub federation: FederationConfig,
    pub synth: SynthSpec,
    pub output: OutputConfig,
}

impl RunConfig {
    pub fn from_value(v: Value) -> Result<RunConfig> {
        let cfg: RunConfig = serde_json::from_value(v).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let v: Value = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        RunConfig::from_value(v)
    }

    pub fn validate(&self) -> Result<()> {
        self.federation.validate()?;
        self.synth.validate()?;
        let d = &self.data;
        if !(d.train_fraction > 0.0 && d.val_fraction >= 0.0)
            || d.train_fraction + d.val_fraction >= 1.0
        {
            return Err(Error::Config(
                "data: need train_fraction > 0 and train + val < 1".into(),
            ));
        }
        Ok(())
    }

    /// Compact JSON with recursively sorted keys.
    pub fn canonical_json(&self) -> String {
        let v = serde_json::to_value(self).expect("config is serializable");
        serde_json::to_string(&v).expect("value is serializable")
    }

    pub fn hash(&self) -> u64 {
        fnv1a64(self.canonical_json().as_bytes())
    }

    pub fn run_id(&self) -> String {
        self.output
            .run_id
            .clone()
            .unwrap_or_else(|| format!("{}-{:016x}", self.federation.mode.as_str(), self.hash()))
    }
}

/// 64-bit FNV-1a.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325u64, |h, &b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

/// Applies `a.b.c=value` to a JSON tree. The value is parsed as JSON when possible and
/// taken as a string otherwise. Unknown keys are caught later by deserialization.
pub fn apply_override(root: &mut Value, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{assignment}` is not KEY=VALUE")))?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("bad override key `{key}`")));
    }
    let mut node = root;
    for part in &parts[..parts.len() - 1] {
        if !node.is_object() {
            return Err(Error::Config(format!(
                "override `{key}`: `{part}` is not a section"
            )));
        }
        node = node
            .as_object_mut()
            .unwrap()
            .entry(part.to_string())
            .or_insert_with(|| Value::Object(Default::default()));
    }
    match node.as_object_mut() {
        Some(obj) => {
            obj.insert(parts[parts.len() - 1].to_string(), value);
            Ok(())
        }
        None => Err(Error::Config(format!(
            "override `{key}` targets a non-object"
        ))),
    }
}
