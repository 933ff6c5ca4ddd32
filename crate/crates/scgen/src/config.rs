//! JSON experiment configuration.
//!
//! A document may name a `preset`; its remaining keys are merged over the
//! preset key by key. Unknown keys are rejected.

use std::path::{Path, PathBuf};

use scgen_core::adversary::DiscriminatorConfig;
use scgen_core::generators::GeneratorConfig;
use scgen_core::train::TrainConfig;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{read_file, Error, Result};

pub const PRESETS: [&str; 2] = ["families4", "paper-full"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub preset: Option<String>,
    pub generator: GeneratorConfig,
    #[serde(default)]
    pub discriminator: DiscriminatorConfig,
    #[serde(default)]
    pub train: TrainConfig,
    /// External feature-extractor weights replacing the seeded pyramid.
    #[serde(default)]
    pub perceptual_weights_path: Option<PathBuf>,
    /// Samples rendered into each preview grid.
    #[serde(default = "default_preview")]
    pub preview_samples: usize,
}

fn default_preview() -> usize {
    4
}

impl ExperimentConfig {
    pub fn preset(name: &str) -> Result<Self> {
        let (generator, train) = match name {
            "families4" => (GeneratorConfig::families4(), TrainConfig::families4()),
            "paper-full" => (GeneratorConfig::paper_full(4), TrainConfig::default()),
            _ => {
                return Err(Error::Usage(format!("unknown preset `{name}`; expected one of {}", PRESETS.join(", "))))
            }
        };
        Ok(ExperimentConfig {
            preset: Some(name.into()),
            generator,
            discriminator: DiscriminatorConfig::default(),
            train,
            perceptual_weights_path: None,
            preview_samples: default_preview(),
        })
    }

    /// Parses a document, applying its preset first.
    pub fn from_json(text: &str) -> std::result::Result<Self, serde_json::Error> {
        let doc: Value = serde_json::from_str(text)?;
        let preset = doc.get("preset").and_then(Value::as_str).map(str::to_owned);
        let merged = match preset {
            Some(name) => {
                let base = ExperimentConfig::preset(&name).map_err(serde::de::Error::custom)?;
                let mut base = serde_json::to_value(base).expect("config serializes");
                merge(&mut base, doc);
                base
            }
            None => doc,
        };
        serde_json::from_value(merged)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = read_file(path)?;
        let text = std::str::from_utf8(&bytes).map_err(|e| Error::format("config", e.valid_up_to() as u64, "not UTF-8"))?;
        let cfg = ExperimentConfig::from_json(text).map_err(|source| Error::Json { path: path.into(), source })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.generator.validate()?;
        self.discriminator.validate(self.generator.resolution)?;
        self.train.validate()?;
        Ok(())
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("config serializes");
        s.push('\n');
        s
    }
}

fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}
