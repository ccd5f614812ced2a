use std::path::{Path, PathBuf};

use quadmimic_core::policy::PolicyConfig;
use quadmimic_core::rewards::RewardConfig;
use quadmimic_core::simenv::SimConfig;
use quadmimic_core::terrain::DEFAULT_STREAK_REQUIRED;
use quadmimic_core::trainer::{CommandRanges, PpoConfig, TrainConfig};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::CliError;

pub const SEED_ENV: &str = "QUADMIMIC_SEED";
pub const DEFAULT_OUT: &str = "quadmimic-out";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    /// Directory of `.clip` files used by `train imitate`.
    pub dataset: Option<PathBuf>,
    pub out: Option<PathBuf>,
    /// Stage-one checkpoint used by `train adapt` when `--from` is absent.
    pub checkpoint: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TerrainSection {
    pub curriculum_streak: u32,
}

impl Default for TerrainSection {
    fn default() -> Self {
        Self { curriculum_streak: DEFAULT_STREAK_REQUIRED }
    }
}

/// Everything a run reads from its TOML file.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: Option<u64>,
    pub workers: Option<usize>,
    pub paths: Paths,
    pub terrain: TerrainSection,
    pub simenv: SimConfig,
    pub policy: PolicyConfig,
    pub trainer: PpoConfig,
    pub commands: CommandRanges,
    pub rewards: RewardConfig,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
    }

    pub fn parse(text: &str) -> Result<Self, toml::de::Error> {
        toml::from_str(text)
    }

    pub fn defaults_toml() -> String {
        toml::to_string(&RunConfig::default()).expect("default config serializes")
    }

    /// `--seed`, then the config file, then `QUADMIMIC_SEED`, then 0.
    pub fn resolve_seed(&self, flag: Option<u64>) -> Result<u64, CliError> {
        if let Some(s) = flag.or(self.seed) {
            return Ok(s);
        }
        match std::env::var(SEED_ENV) {
            Ok(v) => v.trim().parse().map_err(|_| CliError::Usage(format!("{SEED_ENV}={v} is not an unsigned integer"))),
            Err(_) => Ok(0),
        }
    }

    pub fn train_config(&self, seed: u64, workers: usize) -> TrainConfig {
        TrainConfig {
            seed,
            ppo: self.trainer.clone(),
            policy: self.policy.clone(),
            sim: self.simenv.clone(),
            rewards: self.rewards,
            commands: self.commands,
            curriculum_streak: self.terrain.curriculum_streak,
            workers,
        }
    }

    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&bytes))
    }
}
