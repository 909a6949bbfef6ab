//! TOML run configuration covering model, training and inference.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::RegionSpec;
use crate::model::ModelConfig;
use crate::pipeline::InferenceConfig;
use crate::training::TrainConfig;

/// ```toml
/// [model]
/// latent_dim = 64
/// blocks = [2, 2, 2]
///
/// [train]
/// steps = 3000
///
/// [inference]
/// steps = 4
/// ```
///
/// Missing sections and fields take their defaults; unknown keys are errors.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub inference: InferenceConfig,
    pub regions: RegionSpec,
}

impl RunConfig {
    /// The desk-scale model with default training and inference settings.
    pub fn desk() -> Self {
        RunConfig {
            model: ModelConfig::desk(),
            ..RunConfig::default()
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.inference.validate()?;
        self.regions.validate()?;
        if self.inference.window != self.model.window {
            return Err(Error::InvalidConfig(format!(
                "inference window {} differs from model window {}",
                self.inference.window, self.model.window
            )));
        }
        Ok(())
    }
}
