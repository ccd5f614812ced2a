//! Structured-text checkpoint container with a content hash.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use super::{PolicyParams, Stage};
use crate::terrain::CurriculumState;

pub const CHECKPOINT_FORMAT: &str = "quadmimic-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint I/O: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed checkpoint: {0}")]
    Format(String),
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("checkpoint hash mismatch: recorded {recorded}, computed {computed}")]
    Hash { recorded: String, computed: String },
    #[error("checkpoint stage mismatch: expected {expected:?}, found {found:?}")]
    Stage { expected: Stage, found: Stage },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub stage: Stage,
    /// Completed PPO updates.
    pub update: u64,
    pub seed: u64,
    pub params: PolicyParams,
    pub curriculum: Vec<CurriculumState>,
    /// Hash of the stage-one checkpoint whose decoder was frozen.
    pub parent_hash: Option<String>,
    pub optimizer: Option<OptimizerState>,
}

/// Adam moments aligned with [`PolicyParams::tensors`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

#[derive(Serialize, Deserialize)]
struct Envelope {
    format: String,
    version: u32,
    sha256: String,
    body: Checkpoint,
}

impl Checkpoint {
    pub fn new(params: PolicyParams, update: u64, seed: u64) -> Self {
        Self { stage: params.stage, update, seed, params, curriculum: Vec::new(), parent_hash: None, optimizer: None }
    }

    /// Hex SHA-256 of the body's canonical JSON.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("checkpoint serializes");
        hex::encode(Sha256::digest(&bytes))
    }

    pub fn to_json(&self) -> String {
        let env = Envelope {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            sha256: self.hash(),
            body: self.clone(),
        };
        serde_json::to_string(&env).expect("checkpoint serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, CheckpointError> {
        let env: Envelope = serde_json::from_str(text).map_err(|e| CheckpointError::Format(e.to_string()))?;
        if env.format != CHECKPOINT_FORMAT {
            return Err(CheckpointError::Format(format!("unknown format tag {:?}", env.format)));
        }
        if env.version != CHECKPOINT_VERSION {
            return Err(CheckpointError::Version(env.version));
        }
        let computed = env.body.hash();
        if computed != env.sha256 {
            return Err(CheckpointError::Hash { recorded: env.sha256, computed });
        }
        Ok(env.body)
    }

    pub fn save(&self, path: &Path) -> Result<String, CheckpointError> {
        std::fs::write(path, self.to_json())?;
        Ok(self.hash())
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn expect_stage(&self, expected: Stage) -> Result<(), CheckpointError> {
        if self.stage != expected {
            return Err(CheckpointError::Stage { expected, found: self.stage });
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::PolicyConfig;
    use crate::terrain::TerrainKind;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample() -> Checkpoint {
        let p = PolicyParams::new(PolicyConfig::small(4, 2), &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let mut c = Checkpoint::new(p, 7, 3);
        c.curriculum.push(CurriculumState::new(TerrainKind::SlopeUp));
        c
    }

    #[test]
    fn round_trip_is_exact() {
        let c = sample();
        let back = Checkpoint::from_json(&c.to_json()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.hash(), c.hash());
    }

    #[test]
    fn tampering_is_detected() {
        let c = sample();
        let text = c.to_json().replacen("\"update\":7", "\"update\":8", 1);
        assert!(matches!(Checkpoint::from_json(&text), Err(CheckpointError::Hash { .. })));
    }

    #[test]
    fn wrong_version_rejected() {
        let text = sample().to_json().replacen("\"version\":1", "\"version\":9", 1);
        assert!(matches!(Checkpoint::from_json(&text), Err(CheckpointError::Version(9))));
    }
}
