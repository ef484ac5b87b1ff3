//! JSON run configuration: a named preset plus strict partial overrides.

use std::path::Path;

use anyhow::{bail, Context};
use serde::Deserialize;
use serde_json::{Map, Value};
use swat_core::train::{DatasetSpec, OptimizerConfig};
use swat_core::{InitScheme, ModelConfig};

/// Preset names and the model each expands to.
pub const PRESETS: &[&str] = &[
    "deit-ti",
    "deit-s",
    "deit-b32",
    "mixer-s16",
    "mixer-ti",
    "swat-deit-ti",
    "swat-deit-s",
    "swat-deit-b32",
    "swat-mixer-s16",
    "swat-mixer-ti",
    "tiny-deit",
    "tiny-mixer",
    "tiny-deit-swat",
    "tiny-mixer-swat",
];

pub fn preset(name: &str) -> anyhow::Result<ModelConfig> {
    let (base, swat) = match name.strip_prefix("swat-") {
        Some(rest) => (rest, true),
        None => match name.strip_suffix("-swat") {
            Some(rest) => (rest, true),
            None => (name, false),
        },
    };
    let cfg = match base {
        "deit-ti" => ModelConfig::deit_ti(),
        "deit-s" => ModelConfig::deit_s(),
        "deit-b32" => ModelConfig::deit_b32(),
        "mixer-s16" => ModelConfig::mixer_s16(),
        "mixer-ti" => ModelConfig::mixer_ti(),
        "tiny-deit" => ModelConfig::tiny_deit(),
        "tiny-mixer" => ModelConfig::tiny_mixer(),
        _ => bail!("unknown preset {name:?}; expected one of {}", PRESETS.join(", ")),
    };
    if !PRESETS.contains(&name) {
        bail!("unknown preset {name:?}; expected one of {}", PRESETS.join(", "));
    }
    Ok(if swat { cfg.swat() } else { cfg })
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    preset: Option<String>,
    /// Full model (without a preset) or overrides of the preset's fields.
    #[serde(default)]
    model: Option<Map<String, Value>>,
    #[serde(default)]
    dataset: Option<DatasetSpec>,
    #[serde(default)]
    optimizer: Option<OptimizerConfig>,
    seed: Option<u64>,
    init: Option<InitScheme>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConfigFile {
    pub model: ModelConfig,
    pub dataset: DatasetSpec,
    pub optimizer: OptimizerConfig,
    pub seed: Option<u64>,
    pub init: Option<InitScheme>,
}

impl ConfigFile {
    pub fn from_preset(name: &str) -> anyhow::Result<Self> {
        Self::from_json(&serde_json::json!({ "preset": name }).to_string())
    }

    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        Self::from_json(&text).with_context(|| format!("in config {}", path.display()))
    }

    pub fn from_json(text: &str) -> anyhow::Result<Self> {
        let raw: RawConfig = serde_json::from_str(text)?;
        let mut model = match &raw.preset {
            Some(name) => serde_json::to_value(preset(name)?)?,
            None => Value::Object(Map::new()),
        };
        if let (Value::Object(base), Some(overrides)) = (&mut model, raw.model) {
            base.extend(overrides);
        }
        let model: ModelConfig = serde_json::from_value(model).context("model section")?;
        model.validate()?;
        // the dataset follows the model geometry unless stated otherwise
        let dataset = raw.dataset.unwrap_or_else(|| DatasetSpec {
            classes: model.classes,
            image_size: model.image_size,
            p: model.patch,
            alpha: model.alpha,
            ..DatasetSpec::default()
        });
        Ok(Self { model, dataset, optimizer: raw.optimizer.unwrap_or_default(), seed: raw.seed, init: raw.init })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_preset_expands_and_validates() {
        for name in PRESETS {
            let cfg = ConfigFile::from_preset(name).unwrap();
            assert_eq!(cfg.model.any_swat(), name.contains("swat"), "{name}");
        }
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(ConfigFile::from_json(r#"{"preset":"deit-ti","colour":1}"#).is_err());
        assert!(ConfigFile::from_json(r#"{"preset":"deit-ti","model":{"depthh":3}}"#).is_err());
        assert!(ConfigFile::from_json(r#"{"preset":"deit-ti","optimizer":{"momentum":0.9}}"#).is_err());
    }

    #[test]
    fn overrides_apply_on_top_of_presets() {
        let cfg = ConfigFile::from_json(r#"{"preset":"tiny-deit","model":{"pos_emb":false}}"#).unwrap();
        assert!(!cfg.model.pos_emb);
        assert_eq!(cfg.model.embed, 16);
    }

    #[test]
    fn model_without_preset_needs_every_field() {
        assert!(ConfigFile::from_json(r#"{"model":{"depth":2}}"#).is_err());
    }
}
