use std::path::Path;

use gpp_core::autoencoder::{AeConfig, AeTrainConfig};
use gpp_core::net::GppConfig;
use gpp_core::trainer::{TrainConfig, DEFAULT_SAMPLING_STEPS};
use serde::{Deserialize, Serialize};

use crate::Failure;

/// Contents of a `--config` file. Every section is optional; flags override it.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    pub seed: Option<u64>,
    pub provider: String,
    pub grid: Option<usize>,
    pub steps: usize,
    pub parallelism: usize,
    pub net: GppConfig,
    pub ae: AeConfig,
    pub ae_train: AeTrainConfig,
    pub train: TrainConfig,
}

impl Default for FileConfig {
    fn default() -> Self {
        Self {
            seed: None,
            provider: "builtin".into(),
            grid: None,
            steps: DEFAULT_SAMPLING_STEPS,
            parallelism: 1,
            net: GppConfig::default(),
            ae: AeConfig::default(),
            ae_train: AeTrainConfig::default(),
            train: TrainConfig::default(),
        }
    }
}

impl FileConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, Failure> {
        let Some(path) = path else { return Ok(Self::default()) };
        let text = std::fs::read_to_string(path)
            .map_err(|e| Failure::Usage(format!("cannot read config {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| Failure::Usage(format!("bad config {}: {e}", path.display())))
    }
}
