//! Run configuration and content hashing.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::baselines::MlpConfig;
use crate::model::CaacConfig;
use crate::scene::DatasetConfig;
use crate::train::TrainConfig;
use crate::{Error, Result};

/// Short stable hash of a serializable value's canonical JSON form.
pub fn config_hash<T: Serialize>(value: &T) -> String {
    let json = serde_json::to_string(value).expect("config types serialize infallibly");
    let digest = Sha256::digest(json.as_bytes());
    hex::encode(&digest[..8])
}

pub fn bytes_sha256(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn file_sha256(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(bytes_sha256(&bytes))
}

/// Everything one CLI invocation can be configured with. Unknown keys are
/// rejected and missing sections take their defaults.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: DatasetConfig,
    pub model: CaacConfig,
    pub mlp: MlpConfig,
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig =
            serde_json::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.model.validate()?;
        self.mlp.validate()?;
        self.train.validate()
    }

    /// Fully materialized JSON of the resolved config.
    pub fn resolved_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config types serialize infallibly")
    }

    pub fn hash(&self) -> String {
        config_hash(self)
    }
}
