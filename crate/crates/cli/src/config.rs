//! Run configuration: an optional TOML file, overridden by command-line flags.

use rbf_core::evalkit::FusionThresholds;
use rbf_core::mdp::RolloutConfig;
use rbf_core::scenes::{NoiseSpec, SceneSpec};
use rbf_core::training::TrainConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::Path;

use crate::CliError;

/// Contents of a `--config` file. Every section is optional.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    pub seed: Option<u64>,
    pub attention: Option<bool>,
    pub scene: SceneSpec,
    pub train: TrainConfig,
    pub rollout: RolloutConfig,
    pub fusion: FusionThresholds,
    pub noise: Option<NoiseSpec>,
}

impl FileConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = read_to_string(path)?;
        toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }
}

pub fn read_to_string(path: &Path) -> Result<String, CliError> {
    std::fs::read_to_string(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

pub fn load_noise(path: &Path) -> Result<NoiseSpec, CliError> {
    let text = read_to_string(path)?;
    let spec: NoiseSpec = toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    spec.validate().map_err(|e| CliError::Config(e.to_string()))?;
    Ok(spec)
}

/// Hex SHA-256 of the canonical JSON form of a resolved configuration.
pub fn fingerprint<T: Serialize>(config: &T) -> String {
    let json = serde_json::to_vec(config).expect("config serializes");
    hex(&Sha256::digest(json))
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
