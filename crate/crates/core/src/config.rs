//! Flat `section.key = value` run configuration.
//!
//! ```text
//! # comments and blank lines are ignored
//! model.base_channels = 16
//! train.steps = 200
//! data.noise_level = 0.3
//! ```
//!
//! Values are typed by the field they set. Unknown keys are errors.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::denoiser::DenoiserConfig;
use crate::error::{Error, Result};
use crate::lora::LoraConfig;
use crate::noise::{preset_level, NoiseLevel, NoiseSource, PresetInterpretation};
use crate::training::TrainConfig;

/// A preset level or per-sample parameters drawn from the prior.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum NoiseChoice {
    Preset(NoiseLevel),
    Sampled,
}

impl NoiseChoice {
    pub fn source(self, interpretation: PresetInterpretation) -> NoiseSource {
        match self {
            NoiseChoice::Preset(level) => NoiseSource::Fixed(preset_level(level, interpretation)),
            NoiseChoice::Sampled => NoiseSource::Sampled,
        }
    }
}

impl FromStr for NoiseChoice {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "sampled" {
            Ok(NoiseChoice::Sampled)
        } else {
            Ok(NoiseChoice::Preset(s.parse()?))
        }
    }
}

impl TryFrom<String> for NoiseChoice {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<NoiseChoice> for String {
    fn from(c: NoiseChoice) -> String {
        c.to_string()
    }
}

impl fmt::Display for NoiseChoice {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            NoiseChoice::Preset(l) => l.fmt(f),
            NoiseChoice::Sampled => f.write_str("sampled"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    /// Dataset manifest; a command-line `--manifest` takes precedence.
    pub manifest: Option<String>,
    pub noise_level: NoiseChoice,
    pub preset_interpretation: PresetInterpretation,
    /// Reverse steps at inference; `None` runs every training step.
    pub sampling_steps: Option<usize>,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            manifest: None,
            noise_level: NoiseChoice::Sampled,
            preset_interpretation: PresetInterpretation::Linear,
            sampling_steps: None,
        }
    }
}

impl DataConfig {
    pub fn noise_source(&self) -> NoiseSource {
        self.noise_level.source(self.preset_interpretation)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct RunConfig {
    pub model: DenoiserConfig,
    pub train: TrainConfig,
    pub lora: LoraConfig,
    pub data: DataConfig,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::invalid(format!("config line {}: expected key = value", n + 1)))?;
            cfg.set(key.trim(), value.trim())
                .map_err(|e| Error::invalid(format!("config line {}: {e}", n + 1)))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()
    }

    /// Sets `section.field` from its textual value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let unknown = || Error::Unknown {
            kind: "config key",
            name: key.to_string(),
        };
        let (section, field) = key.split_once('.').ok_or_else(unknown)?;
        let mut tree = serde_json::to_value(&*self)?;
        let slot = tree
            .get_mut(section)
            .and_then(|s| s.get_mut(field))
            .ok_or_else(unknown)?;
        let unquoted = value
            .strip_prefix('"')
            .and_then(|v| v.strip_suffix('"'))
            .unwrap_or(value);
        *slot = match slot {
            Value::String(_) => Value::String(unquoted.to_string()),
            _ => serde_json::from_str(value).unwrap_or_else(|_| Value::String(unquoted.to_string())),
        };
        *self = serde_json::from_value(tree)
            .map_err(|e| Error::invalid(format!("bad value {value:?} for {key}: {e}")))?;
        Ok(())
    }

    /// The configuration in the file format, every key listed.
    pub fn to_flat(&self) -> String {
        let tree = serde_json::to_value(self).expect("config serialises");
        let mut out = String::new();
        for (section, fields) in tree.as_object().expect("struct") {
            for (field, v) in fields.as_object().expect("struct") {
                let text = match v {
                    Value::String(s) => s.clone(),
                    other => other.to_string(),
                };
                out.push_str(&format!("{section}.{field} = {text}\n"));
            }
        }
        out
    }

    /// SHA-256 of [`RunConfig::to_flat`], hex encoded.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_flat().as_bytes()))
    }
}
