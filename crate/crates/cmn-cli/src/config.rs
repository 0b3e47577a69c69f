//! Config resolution: built-in defaults, then a named preset, then a
//! `--config` file, then individual flags. Merging happens on the JSON
//! tree so partial files override only the fields they mention.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use cmn_core::data::SyntheticSpec;
use cmn_core::network::TrainConfig;
use cmn_core::SCHEMA_VERSION;

use crate::CliError;

/// Preset values live in the repository's config files; they are embedded
/// here so the binary can be invoked from anywhere.
const PRESET_FINE_GRAINED: &str = include_str!("../../../configs/fine_grained.json");
const PRESET_COARSE: &str = include_str!("../../../configs/coarse.json");

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResolvedConfig {
    pub schema_version: u32,
    pub data: SyntheticSpec,
    pub train: TrainConfig,
}

impl Default for ResolvedConfig {
    fn default() -> Self {
        ResolvedConfig {
            schema_version: SCHEMA_VERSION,
            data: SyntheticSpec::default(),
            train: TrainConfig::default(),
        }
    }
}

fn preset_text(name: &str) -> Result<&'static str, CliError> {
    match name {
        "fine-grained" | "fine_grained" => Ok(PRESET_FINE_GRAINED),
        "coarse" => Ok(PRESET_COARSE),
        other => Err(CliError::usage(format!(
            "unknown preset {other:?}; available presets: fine-grained, coarse"
        ))),
    }
}

fn merge(base: &mut Value, update: &Value) {
    match (base, update) {
        (Value::Object(b), Value::Object(u)) => {
            for (key, val) in u {
                merge(b.entry(key.clone()).or_insert(Value::Null), val);
            }
        }
        (b, u) => *b = u.clone(),
    }
}

/// Builds the resolved config from defaults, an optional preset, and an
/// optional config file (flag overrides are applied by the caller).
pub fn resolve(preset: Option<&str>, config_path: Option<&Path>) -> Result<ResolvedConfig, CliError> {
    let mut tree = serde_json::to_value(ResolvedConfig::default()).expect("defaults serialize");
    if let Some(name) = preset {
        let parsed: Value = serde_json::from_str(preset_text(name)?)
            .expect("embedded preset is valid JSON");
        merge(&mut tree, &parsed);
    }
    if let Some(path) = config_path {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::usage(format!("{}: {e}", path.display())))?;
        let parsed: Value = serde_json::from_str(&text)
            .map_err(|e| CliError::usage(format!("{}: {e}", path.display())))?;
        merge(&mut tree, &parsed);
    }
    let resolved: ResolvedConfig = serde_json::from_value(tree)
        .map_err(|e| CliError::usage(format!("invalid config: {e}")))?;
    if resolved.schema_version != SCHEMA_VERSION {
        return Err(CliError::usage(format!(
            "unsupported config schema_version {} (expected {SCHEMA_VERSION})",
            resolved.schema_version
        )));
    }
    Ok(resolved)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_parse_and_validate() {
        for name in ["fine-grained", "coarse"] {
            let cfg = resolve(Some(name), None).unwrap();
            cfg.data.validate().unwrap();
            cfg.train.validate().unwrap();
        }
        assert!(resolve(Some("nope"), None).is_err());
    }

    #[test]
    fn file_overrides_preset_partially() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("override.json");
        fs::write(&path, r#"{"train": {"epochs": 3, "lr_decay_epoch": 2}}"#).unwrap();
        let cfg = resolve(Some("fine-grained"), Some(&path)).unwrap();
        assert_eq!(cfg.train.epochs, 3);
        assert_eq!(cfg.data.num_classes, 20, "preset data section survives");
    }

    #[test]
    fn unknown_fields_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("typo.json");
        fs::write(&path, r#"{"train": {"epocks": 3}}"#).unwrap();
        assert!(resolve(None, Some(&path)).is_err());
    }
}
