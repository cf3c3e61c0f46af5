//! The run configuration: one JSON document with a section per stage.
//! Every field is optional in the file and falls back to its default.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::io::IoError;
use crate::model::ModelConfig;
use crate::objective::DistillConfig;
use crate::probe::ProbeConfig;
use crate::sampling::ViewConfig;
use crate::trainer::TrainConfig;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Dataset directory or manifest file.
    pub dataset: Option<String>,
    /// Output directory for checkpoints and logs.
    pub out_dir: Option<String>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub view: ViewConfig,
    pub model: ModelConfig,
    pub distill: DistillConfig,
    pub train: TrainConfig,
    pub probe: ProbeConfig,
    pub data: DataConfig,
}

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error(transparent)]
    Io(#[from] IoError),
    #[error("unknown config keys: {}", .0.join(", "))]
    UnknownKeys(Vec<String>),
    #[error("config does not parse: {0}")]
    Parse(String),
    #[error("invalid config:\n  {}", .0.join("\n  "))]
    Invalid(Vec<String>),
}

/// Dotted paths of keys in `given` that have no counterpart in `known`.
/// Arrays are leaves.
fn unknown_keys(given: &Value, known: &Value, prefix: &str, out: &mut Vec<String>) {
    let (Value::Object(g), Value::Object(k)) = (given, known) else {
        return;
    };
    for (key, value) in g {
        let path = if prefix.is_empty() { key.clone() } else { format!("{prefix}.{key}") };
        match k.get(key) {
            None => out.push(path),
            Some(sub) => unknown_keys(value, sub, &path, out),
        }
    }
}

impl RunConfig {
    pub fn from_json_str(text: &str) -> Result<Self, ConfigError> {
        let given: Value = serde_json::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        if !given.is_object() {
            return Err(ConfigError::Parse("top level must be a JSON object".into()));
        }
        let known = serde_json::to_value(RunConfig::default()).expect("defaults serialize");
        let mut unknown = Vec::new();
        unknown_keys(&given, &known, "", &mut unknown);
        if !unknown.is_empty() {
            return Err(ConfigError::UnknownKeys(unknown));
        }
        let cfg: RunConfig = serde_json::from_value(given).map_err(|e| ConfigError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = fs::read_to_string(path).map_err(|e| IoError::io(path, e))?;
        Self::from_json_str(&text).map_err(|e| match e {
            ConfigError::Parse(m) => ConfigError::Parse(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_json_string(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Checks every section and the constraints between them, reporting
    /// all problems at once.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let mut problems = Vec::new();
        if let Err(e) = self.view.validate() {
            problems.push(format!("view: {e}"));
        }
        if let Err(e) = self.model.validate() {
            problems.push(format!("model: {e}"));
        }
        if let Err(e) = self.distill.validate() {
            problems.push(format!("distill: {e}"));
        }
        if let Err(e) = self.train.validate() {
            problems.push(format!("train: {e}"));
        }
        if let Err(e) = self.probe.validate() {
            problems.push(format!("probe: {e}"));
        }
        let p = self.model.patch_size;
        let mut sizes = vec![("view.global_size", self.view.global_size), ("view.local_size", self.view.local_size)];
        sizes.extend(self.probe.local_views.iter().map(|v| ("probe.local_views", v.size)));
        for (name, (h, w)) in sizes {
            if p > 0 && (h % p != 0 || w % p != 0) {
                problems.push(format!("{name} {h}x{w} is not divisible by model.patch_size {p}"));
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(ConfigError::Invalid(problems))
        }
    }
}
