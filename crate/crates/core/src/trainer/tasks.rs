//! Environments seen by the trainer: motion imitation, command tracking on
//! curriculum terrain, and a kinematic point mass for quick checks.

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{CommandRanges, TrainError};
use crate::mocap::MotionClip;
use crate::policy::PolicyInput;
use crate::retarget::RobotMorphology;
use crate::rewards::{
    command_reward, command_reward_from, imitation_reward, stair_edge_penalty, Command, RewardBreakdown, RewardConfig,
};
use crate::simenv::{Observation, RobotState, SimConfig, SimEnv, SimError, TerminationReason};
use crate::terrain::{CurriculumState, TerrainField, TerrainKind};
use crate::{COMMAND_DIM, EXTERO_DIM, NUM_JOINTS, POLICY_DT, PROPRIO_DIM, PROPRIO_FRAME_DIM, PROPRIO_HISTORY};

const RESET_ATTEMPTS: usize = 16;
const TIME_TOL: f64 = 1e-9;

/// Result of one policy step.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskStep {
    /// Observation after the step (the next reset's observation when `done`
    /// is handled by the caller).
    pub input: PolicyInput,
    /// Reward optimised by PPO.
    pub reward: f64,
    /// Reward without shaping penalties.
    pub raw_reward: f64,
    pub done: bool,
    pub termination: TerminationReason,
}

pub trait Task: Send {
    /// Starts a new episode.
    fn reset(&mut self) -> Result<PolicyInput, TrainError>;
    fn step(&mut self, action: &[f64; NUM_JOINTS]) -> Result<TaskStep, TrainError>;
    fn kind(&self) -> TerrainKind;
    fn curriculum(&self) -> Option<&CurriculumState> {
        None
    }
    /// Robot state for trajectory dumps, when the task simulates one.
    fn robot_state(&self) -> Option<&RobotState> {
        None
    }
    /// Named reward terms of the last step.
    fn reward_terms(&self) -> BTreeMap<String, f64> {
        BTreeMap::new()
    }
    /// Seconds since reset.
    fn time(&self) -> f64;
}

fn input_from(obs: Observation, cond: Vec<f64>) -> PolicyInput {
    PolicyInput::new(cond, obs.proprio, &obs.extero)
}

/// Stage-one task: track a randomly chosen clip from a random start time.
pub struct ImitationTask {
    env: SimEnv,
    clips: Arc<Vec<MotionClip>>,
    fields: Arc<Vec<TerrainField>>,
    rng: ChaCha8Rng,
    clip: usize,
    start_time: f64,
    last: Option<RewardBreakdown>,
}

impl ImitationTask {
    /// `fields[i]` is the terrain of `clips[i]`.
    pub fn new(
        clips: Arc<Vec<MotionClip>>,
        fields: Arc<Vec<TerrainField>>,
        sim: SimConfig,
        morph: RobotMorphology,
        seed: u64,
    ) -> Result<Self, TrainError> {
        if clips.is_empty() {
            return Err(TrainError::Config("imitation needs at least one clip".into()));
        }
        if clips.len() != fields.len() {
            return Err(TrainError::Config("one terrain per clip is required".into()));
        }
        for c in clips.iter() {
            c.validate()?;
            if c.duration() < 2.0 * POLICY_DT {
                return Err(TrainError::Config(format!("clip {} is shorter than two policy steps", c.name)));
            }
        }
        Ok(Self {
            env: SimEnv::new(sim, morph),
            clips,
            fields,
            rng: ChaCha8Rng::seed_from_u64(seed),
            clip: 0,
            start_time: 0.0,
            last: None,
        })
    }

    pub fn env(&self) -> &SimEnv {
        &self.env
    }

    pub fn clip_index(&self) -> usize {
        self.clip
    }

    pub fn start_time(&self) -> f64 {
        self.start_time
    }

    /// Clip time of the reference the robot is currently tracking.
    pub fn clip_time(&self) -> f64 {
        self.start_time + self.env.steps() as f64 * POLICY_DT
    }

    fn cond(&self) -> Result<Vec<f64>, TrainError> {
        let s = self.env.state();
        let w = self.clips[self.clip].future_targets(self.clip_time())?;
        Ok(w.features(&s.base_position, s.yaw()))
    }

    /// Resets to `clip` at time `t` in the reference pose.
    pub fn reset_at(&mut self, clip: usize, t: f64) -> Result<PolicyInput, TrainError> {
        let c = &self.clips[clip];
        let pose = c.sample_pose(t)?;
        let init = RobotState::from_reference(&pose, &self.env.morph);
        let domain_seed = self.rng.random::<u64>();
        let obs = self.env.reset(self.fields[clip].clone(), domain_seed, init)?;
        self.clip = clip;
        self.start_time = t;
        self.last = None;
        Ok(input_from(obs, self.cond()?))
    }
}

impl Task for ImitationTask {
    fn reset(&mut self) -> Result<PolicyInput, TrainError> {
        let mut last_err = String::new();
        for _ in 0..RESET_ATTEMPTS {
            let clip = self.rng.random_range(0..self.clips.len());
            let latest = self.clips[clip].duration() - 2.0 * POLICY_DT;
            let t = if latest > 0.0 { self.rng.random_range(0.0..latest) } else { 0.0 };
            match self.reset_at(clip, t) {
                Ok(input) => return Ok(input),
                Err(TrainError::Sim(SimError::Reset(m))) => last_err = m,
                Err(e) => return Err(e),
            }
        }
        Err(TrainError::Reset(last_err))
    }

    fn step(&mut self, action: &[f64; NUM_JOINTS]) -> Result<TaskStep, TrainError> {
        let out = self.env.step(action)?;
        let t = self.clip_time();
        let clip = &self.clips[self.clip];
        let reference = clip.sample_pose(t.min(clip.duration()))?;
        let r = imitation_reward(&out.info.state, &reference);
        self.last = Some(r);
        let mut termination = out.termination;
        if !termination.is_done() && t + POLICY_DT > clip.duration() + TIME_TOL {
            termination = TerminationReason::TimeLimit;
        }
        let input = input_from(out.observation, self.cond()?);
        Ok(TaskStep { input, reward: r.total, raw_reward: r.total, done: termination.is_done(), termination })
    }

    fn kind(&self) -> TerrainKind {
        self.fields[self.clip].kind
    }

    fn robot_state(&self) -> Option<&RobotState> {
        Some(self.env.state())
    }

    fn reward_terms(&self) -> BTreeMap<String, f64> {
        self.last.map(|r| r.to_map()).unwrap_or_default()
    }

    fn time(&self) -> f64 {
        self.env.time()
    }
}

/// Stage-two task: follow a sampled command on one terrain kind with its own curriculum.
pub struct CommandTask {
    env: SimEnv,
    kind: TerrainKind,
    curriculum: CurriculumState,
    advance_curriculum: bool,
    streak_required: u32,
    ranges: CommandRanges,
    rewards: RewardConfig,
    rng: ChaCha8Rng,
    command: Command,
    episode_raw: f64,
    last_raw: f64,
    last_penalty: f64,
}

/// Hip-clear start in front of the first stair riser.
pub const COMMAND_START_X: f64 = -0.6;

impl CommandTask {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        kind: TerrainKind,
        curriculum: CurriculumState,
        streak_required: u32,
        ranges: CommandRanges,
        rewards: RewardConfig,
        sim: SimConfig,
        morph: RobotMorphology,
        seed: u64,
    ) -> Result<Self, TrainError> {
        if curriculum.kind != kind {
            return Err(TrainError::Config(format!("curriculum for {} bound to {}", curriculum.kind, kind)));
        }
        ranges.validate()?;
        Ok(Self {
            env: SimEnv::new(sim, morph),
            kind,
            curriculum,
            advance_curriculum: true,
            streak_required,
            ranges,
            rewards,
            rng: ChaCha8Rng::seed_from_u64(seed),
            command: Command { target_speed: 0.0, target_yaw: 0.0 },
            episode_raw: 0.0,
            last_raw: 0.0,
            last_penalty: 0.0,
        })
    }

    /// Fixed task with every curriculum parameter at its end value.
    pub fn for_evaluation(
        kind: TerrainKind,
        ranges: CommandRanges,
        rewards: RewardConfig,
        sim: SimConfig,
        morph: RobotMorphology,
        seed: u64,
    ) -> Result<Self, TrainError> {
        let mut cs = CurriculumState::new(kind);
        for l in &mut cs.params {
            l.level = l.param.schedule().max_level();
        }
        let mut t = Self::new(kind, cs, 1, ranges, rewards, sim, morph, seed)?;
        t.advance_curriculum = false;
        Ok(t)
    }

    pub fn env(&self) -> &SimEnv {
        &self.env
    }

    pub fn command(&self) -> Command {
        self.command
    }

    fn cond(&self) -> Vec<f64> {
        self.command.encode(self.env.state().yaw()).to_vec()
    }
}

impl Task for CommandTask {
    fn reset(&mut self) -> Result<PolicyInput, TrainError> {
        let params = self.curriculum.sample_params(&mut self.rng);
        let field = TerrainField::generate(self.kind, params, self.rng.random::<u64>())?;
        let init = RobotState::standing(&self.env.morph, &field, COMMAND_START_X, 0.0);
        let u = |rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)| if hi > lo { rng.random_range(lo..hi) } else { lo };
        let speed = u(&mut self.rng, self.ranges.speed);
        let err = u(&mut self.rng, self.ranges.heading_error);
        self.command = Command { target_speed: speed, target_yaw: init.yaw() + err };
        let domain_seed = self.rng.random::<u64>();
        let obs = self.env.reset(field, domain_seed, init)?;
        self.episode_raw = 0.0;
        Ok(input_from(obs, self.cond()))
    }

    fn step(&mut self, action: &[f64; NUM_JOINTS]) -> Result<TaskStep, TrainError> {
        let out = self.env.step(action)?;
        let s = &out.info.state;
        let raw = command_reward(s, &self.command);
        let penalty = stair_edge_penalty(&s.toe_positions, &s.toe_contacts, self.env.terrain());
        self.last_raw = raw;
        self.last_penalty = penalty;
        self.episode_raw += raw;
        let done = out.termination.is_done();
        if done && self.advance_curriculum {
            let mean = self.episode_raw / self.env.steps() as f64;
            let success = out.termination == TerminationReason::TimeLimit && mean >= 0.5;
            self.curriculum.record(success, self.streak_required);
        }
        let input = input_from(out.observation, self.cond());
        Ok(TaskStep {
            input,
            reward: raw + self.rewards.stair_penalty_weight * penalty,
            raw_reward: raw,
            done,
            termination: out.termination,
        })
    }

    fn kind(&self) -> TerrainKind {
        self.kind
    }

    fn curriculum(&self) -> Option<&CurriculumState> {
        Some(&self.curriculum)
    }

    fn robot_state(&self) -> Option<&RobotState> {
        Some(self.env.state())
    }

    fn reward_terms(&self) -> BTreeMap<String, f64> {
        [("command".to_string(), self.last_raw), ("stair_penalty".to_string(), self.last_penalty)].into_iter().collect()
    }

    fn time(&self) -> f64 {
        self.env.time()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PointMassConfig {
    pub episode_steps: usize,
    pub ranges: CommandRanges,
    /// Bounds on the commanded speed and yaw rate.
    pub max_speed: f64,
    pub max_yaw_rate: f64,
    /// Yaw rate per unit of `action[1]`, rad/s.
    pub yaw_rate_gain: f64,
}

impl Default for PointMassConfig {
    fn default() -> Self {
        Self { episode_steps: 100, ranges: CommandRanges::default(), max_speed: 3.0, max_yaw_rate: 6.0, yaw_rate_gain: 5.0 }
    }
}

/// Kinematic point with a heading: `action[0]` is the forward speed,
/// `action[1]` the scaled yaw rate; the remaining coordinates are ignored.
/// Uses the same command reward as the legged task.
pub struct PointMassTask {
    config: PointMassConfig,
    rng: ChaCha8Rng,
    position: [f64; 2],
    yaw: f64,
    speed: f64,
    yaw_rate: f64,
    last_action: [f64; NUM_JOINTS],
    command: Command,
    steps: usize,
    last_reward: f64,
}

impl PointMassTask {
    pub fn new(config: PointMassConfig, seed: u64) -> Self {
        Self {
            config,
            rng: ChaCha8Rng::seed_from_u64(seed),
            position: [0.0; 2],
            yaw: 0.0,
            speed: 0.0,
            yaw_rate: 0.0,
            last_action: [0.0; NUM_JOINTS],
            command: Command { target_speed: 0.0, target_yaw: 0.0 },
            steps: 0,
            last_reward: 0.0,
        }
    }

    pub fn command(&self) -> Command {
        self.command
    }

    pub fn yaw(&self) -> f64 {
        self.yaw
    }

    pub fn position(&self) -> [f64; 2] {
        self.position
    }

    fn input(&self) -> PolicyInput {
        let mut frame = [0.0; PROPRIO_FRAME_DIM];
        frame[0] = self.speed;
        frame[5] = self.yaw_rate;
        frame[30..42].copy_from_slice(&self.last_action);
        frame[44] = -1.0;
        let mut proprio = Vec::with_capacity(PROPRIO_DIM);
        for _ in 0..PROPRIO_HISTORY {
            proprio.extend_from_slice(&frame);
        }
        let cond = self.command.encode(self.yaw).to_vec();
        debug_assert_eq!(cond.len(), COMMAND_DIM);
        PolicyInput { cond, proprio, extero: vec![0.0; EXTERO_DIM], alpha: 0.0 }
    }
}

impl Task for PointMassTask {
    fn reset(&mut self) -> Result<PolicyInput, TrainError> {
        let r = self.config.ranges;
        let u = |rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)| if hi > lo { rng.random_range(lo..hi) } else { lo };
        let speed = u(&mut self.rng, r.speed);
        let err = u(&mut self.rng, r.heading_error);
        self.position = [0.0; 2];
        self.yaw = 0.0;
        self.speed = 0.0;
        self.yaw_rate = 0.0;
        self.last_action = [0.0; NUM_JOINTS];
        self.command = Command { target_speed: speed, target_yaw: err };
        self.steps = 0;
        Ok(self.input())
    }

    fn step(&mut self, action: &[f64; NUM_JOINTS]) -> Result<TaskStep, TrainError> {
        if let Some(i) = action.iter().position(|a| !a.is_finite()) {
            return Err(SimError::NonFiniteAction(i).into());
        }
        self.speed = action[0].clamp(-self.config.max_speed, self.config.max_speed);
        self.yaw_rate = (self.config.yaw_rate_gain * action[1]).clamp(-self.config.max_yaw_rate, self.config.max_yaw_rate);
        self.yaw += self.yaw_rate * POLICY_DT;
        let (s, c) = self.yaw.sin_cos();
        let v = [self.speed * c, self.speed * s];
        self.position[0] += v[0] * POLICY_DT;
        self.position[1] += v[1] * POLICY_DT;
        self.last_action = *action;
        self.steps += 1;
        let (ts, tc) = self.command.target_yaw.sin_cos();
        let projected = v[0] * tc + v[1] * ts;
        let reward = command_reward_from(projected, self.yaw, &self.command);
        self.last_reward = reward;
        let done = self.steps >= self.config.episode_steps;
        let termination = if done { TerminationReason::TimeLimit } else { TerminationReason::None };
        Ok(TaskStep { input: self.input(), reward, raw_reward: reward, done, termination })
    }

    fn kind(&self) -> TerrainKind {
        TerrainKind::Plane
    }

    fn reward_terms(&self) -> BTreeMap<String, f64> {
        [("command".to_string(), self.last_reward)].into_iter().collect()
    }

    fn time(&self) -> f64 {
        self.steps as f64 * POLICY_DT
    }
}
