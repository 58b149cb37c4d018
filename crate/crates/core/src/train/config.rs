use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::SynthConfig;
use crate::error::{Error, Result};
use crate::model::ModelConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Profile {
    Desk,
    Paper,
}

impl Profile {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "desk" => Some(Self::Desk),
            "paper" => Some(Self::Paper),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Dataset directory written by `save_dataset`; synthesised when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dir: Option<PathBuf>,
    /// Train/validation/test ratios.
    pub split: [f64; 3],
    pub synth: SynthConfig,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            dir: None,
            split: [0.7, 0.1, 0.2],
            synth: SynthConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub profile: Profile,
    pub seed: u64,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Stops after this many optimizer steps even mid-epoch.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_steps: Option<u64>,
    pub clip_norm: f64,
    /// Greedy-decode the validation split after every epoch.
    pub val_metrics: bool,
    /// Caps the number of validation examples decoded per epoch.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub val_limit: Option<usize>,
    pub model: ModelConfig,
    pub data: DataConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::for_profile(Profile::Desk)
    }
}

impl TrainConfig {
    pub fn for_profile(profile: Profile) -> Self {
        let desk = Self {
            profile,
            seed: 0,
            lr: 2e-4,
            batch_size: 16,
            epochs: 30,
            max_steps: None,
            clip_norm: 5.0,
            val_metrics: true,
            val_limit: None,
            model: ModelConfig::default(),
            data: DataConfig::default(),
        };
        match profile {
            Profile::Desk => desk,
            Profile::Paper => {
                let mut c = desk;
                c.batch_size = 128;
                c.epochs = 100;
                c.model.d_feature = 2048;
                c.model.d_model = 512;
                c.model.n_heads = 8;
                c.data.synth.d_feature = 2048;
                c
            }
        }
    }

    /// Parses a TOML document; missing keys fall back to the desk profile,
    /// or to the profile named by a top-level `profile` key.
    pub fn from_toml(text: &str) -> Result<Self> {
        Self::from_toml_with_profile(text, None)
    }

    /// Like [`from_toml`](Self::from_toml), but `profile` replaces the
    /// document's own `profile` key when given.
    pub fn from_toml_with_profile(text: &str, profile: Option<Profile>) -> Result<Self> {
        let mut table: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Toml(e.to_string()))?;
        let profile = match (profile, table.get("profile").and_then(|v| v.as_str())) {
            (Some(p), _) => p,
            (None, Some(p)) => Profile::parse(p).ok_or_else(|| Error::Config(format!("unknown profile `{p}`")))?,
            (None, None) => Profile::Desk,
        };
        table.remove("profile");
        let mut base = toml::Table::try_from(Self::for_profile(profile)).map_err(|e| Error::Toml(e.to_string()))?;
        merge(&mut base, table);
        let config: Self = base.try_into().map_err(|e: toml::de::Error| Error::Toml(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Toml(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return Err(Error::Config(format!("learning rate must be non-negative, got {}", self.lr)));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::Config("batch_size and epochs must be positive".into()));
        }
        if !(self.clip_norm > 0.0) {
            return Err(Error::Config(format!("clip_norm must be positive, got {}", self.clip_norm)));
        }
        self.model.validate()?;
        if self.data.dir.is_none() {
            self.data.synth.validate()?;
            if self.data.synth.d_feature != self.model.d_feature {
                return Err(Error::Config(format!(
                    "synthetic features have width {} but the model expects {}",
                    self.data.synth.d_feature, self.model.d_feature
                )));
            }
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON form of the config.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("configs always serialise");
        hex::encode(Sha256::digest(json.as_bytes()))
    }
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}
