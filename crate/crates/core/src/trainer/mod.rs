//! PPO with GAE over parallel environments, and the two training stages.

mod ppo;
mod stages;
mod tasks;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mocap::MocapError;
use crate::policy::{CheckpointError, PolicyConfig, PolicyError};
use crate::rewards::RewardConfig;
use crate::simenv::{SimConfig, SimError};
use crate::terrain::{TerrainError, DEFAULT_STREAK_REQUIRED};

pub use ppo::{
    collect_rollouts, gae, gae_brute_force, ppo_loss_grad, ppo_update, Adam, EnvRunner, EpisodeSummary, LossTerms,
    Transition, TrajectoryBatch, UpdateStats,
};
pub use stages::{
    clip_terrain, curve_csv, mean_joint_pose, terrain_assignment, train_adaptation, train_imitation, train_task,
    CurveRow, TaskRun, TrainOutput, CURVE_TERRAINS,
};
pub use tasks::{CommandTask, ImitationTask, PointMassConfig, PointMassTask, Task, TaskStep, COMMAND_START_X};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Mocap(#[from] MocapError),
    #[error(transparent)]
    Terrain(#[from] TerrainError),
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("non-finite {what} at update {update}")]
    NonFinite { update: u64, what: String, diagnostics: String },
    #[error("stage-one checkpoint hash mismatch: resume expects {expected}, got {found}")]
    HashMismatch { expected: String, found: String },
    #[error("no usable reset: {0}")]
    Reset(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PpoConfig {
    pub num_envs: usize,
    pub rollout_horizon: usize,
    pub clip_epsilon: f64,
    pub discount: f64,
    pub gae_lambda: f64,
    pub learning_rate: f64,
    pub epochs_per_update: usize,
    pub minibatch_size: usize,
    pub value_loss_coeff: f64,
    pub entropy_coeff: f64,
    /// Weight of the latent KL-to-prior penalty.
    pub kl_beta: f64,
    pub max_updates: u64,
    pub normalize_advantages: bool,
    /// Global gradient-norm clip; 0 disables.
    pub max_grad_norm: f64,
}

impl Default for PpoConfig {
    fn default() -> Self {
        Self {
            num_envs: 16,
            rollout_horizon: 128,
            clip_epsilon: 0.2,
            discount: 0.95,
            gae_lambda: 0.95,
            learning_rate: 3e-4,
            epochs_per_update: 4,
            minibatch_size: 512,
            value_loss_coeff: 0.5,
            entropy_coeff: 0.0,
            kl_beta: 0.03,
            max_updates: 200,
            normalize_advantages: true,
            max_grad_norm: 0.5,
        }
    }
}

impl PpoConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.to_string()));
        if self.num_envs == 0 || self.rollout_horizon == 0 {
            return bad("num_envs and rollout_horizon must be positive");
        }
        if !(self.clip_epsilon > 0.0 && self.clip_epsilon < 1.0) {
            return bad("clip_epsilon must lie in (0, 1)");
        }
        if !(self.discount > 0.0 && self.discount <= 1.0) || !(self.gae_lambda > 0.0 && self.gae_lambda <= 1.0) {
            return bad("discount and gae_lambda must lie in (0, 1]");
        }
        if !(self.learning_rate > 0.0) || self.epochs_per_update == 0 || self.minibatch_size == 0 {
            return bad("learning_rate, epochs_per_update and minibatch_size must be positive");
        }
        if self.value_loss_coeff < 0.0 || self.entropy_coeff < 0.0 || self.kl_beta < 0.0 || self.max_grad_norm < 0.0 {
            return bad("loss coefficients must be non-negative");
        }
        Ok(())
    }
}

/// Per-episode command sampling for terrain adaptation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CommandRanges {
    /// m/s
    pub speed: (f64, f64),
    /// Initial `θ̂ − θ`, radians.
    pub heading_error: (f64, f64),
}

impl Default for CommandRanges {
    fn default() -> Self {
        let q = std::f64::consts::FRAC_PI_4;
        Self { speed: (0.3, 1.5), heading_error: (-q, q) }
    }
}

impl CommandRanges {
    pub fn validate(&self) -> Result<(), TrainError> {
        if !(self.speed.0 <= self.speed.1) || !(self.heading_error.0 <= self.heading_error.1) {
            return Err(TrainError::Config("command ranges need lo <= hi".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub seed: u64,
    pub ppo: PpoConfig,
    pub policy: PolicyConfig,
    pub sim: SimConfig,
    pub rewards: RewardConfig,
    pub commands: CommandRanges,
    /// Consecutive successes needed to advance a curriculum.
    pub curriculum_streak: u32,
    /// Rayon worker cap; 0 uses the global pool.
    pub workers: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            ppo: PpoConfig::default(),
            policy: PolicyConfig::default(),
            sim: SimConfig::default(),
            rewards: RewardConfig::default(),
            commands: CommandRanges::default(),
            curriculum_streak: DEFAULT_STREAK_REQUIRED,
            workers: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        self.ppo.validate()?;
        self.policy.validate()?;
        self.commands.validate()?;
        if self.curriculum_streak == 0 {
            return Err(TrainError::Config("curriculum_streak must be positive".into()));
        }
        Ok(())
    }
}

/// Mixes a base seed with stream tags into an independent seed.
pub fn derive_seed(base: u64, tags: &[u64]) -> u64 {
    let mut s = base ^ 0x9E37_79B9_7F4A_7C15;
    for &t in tags {
        s = splitmix(s ^ splitmix(t.wrapping_add(0x632B_E59B_D9B4_E019)));
    }
    splitmix(s)
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
