use quadmimic_core::mocap::{synthesize_gait, GaitSpec, MotionClip};
use quadmimic_core::policy::{Checkpoint, PolicyConfig, PolicyInput, PolicyParams, Stage};
use quadmimic_core::retarget::RobotMorphology;
use quadmimic_core::simenv::TerminationReason;
use quadmimic_core::terrain::{CurriculumState, ExteroPatch, TerrainKind};
use quadmimic_core::trainer::{
    collect_rollouts, terrain_assignment, train_adaptation, train_imitation, train_task, CurveRow, EnvRunner,
    PpoConfig, Task, TaskStep, TrainConfig, TrainError,
};
use quadmimic_core::{NUM_JOINTS, PROPRIO_DIM};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn tiny() -> TrainConfig {
    let mut cfg = TrainConfig { seed: 3, ..TrainConfig::default() };
    cfg.policy = PolicyConfig::small(8, 4);
    cfg.ppo = PpoConfig { num_envs: 7, rollout_horizon: 16, minibatch_size: 56, epochs_per_update: 1, max_updates: 2, ..PpoConfig::default() };
    cfg
}

fn clip() -> MotionClip {
    synthesize_gait(&GaitSpec::default(), &RobotMorphology::default()).unwrap()
}

fn noop(_: &CurveRow) {}

/// Reward 1 every step, never terminates.
struct Perfect {
    t: f64,
}

/// Every episode ends after its first step.
struct OneStep {
    t: f64,
}

fn input() -> PolicyInput {
    PolicyInput::new(vec![0.0; 3], vec![0.0; PROPRIO_DIM], &ExteroPatch::constant(0.0))
}

impl Task for Perfect {
    fn reset(&mut self) -> Result<PolicyInput, TrainError> {
        self.t = 0.0;
        Ok(input())
    }
    fn step(&mut self, _: &[f64; NUM_JOINTS]) -> Result<TaskStep, TrainError> {
        self.t += 0.02;
        Ok(TaskStep { input: input(), reward: 1.0, raw_reward: 1.0, done: false, termination: TerminationReason::None })
    }
    fn kind(&self) -> TerrainKind {
        TerrainKind::Plane
    }
    fn time(&self) -> f64 {
        self.t
    }
}

impl Task for OneStep {
    fn reset(&mut self) -> Result<PolicyInput, TrainError> {
        self.t = 0.0;
        Ok(input())
    }
    fn step(&mut self, _: &[f64; NUM_JOINTS]) -> Result<TaskStep, TrainError> {
        self.t += 0.02;
        Ok(TaskStep { input: input(), reward: 0.5, raw_reward: 0.5, done: true, termination: TerminationReason::RollLimit })
    }
    fn kind(&self) -> TerrainKind {
        TerrainKind::Blocks
    }
    fn time(&self) -> f64 {
        self.t
    }
}

fn stub_params() -> PolicyParams {
    let cfg = PolicyConfig { cond_dim: 3, ..PolicyConfig::small(8, 4) };
    PolicyParams::new(cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap()
}

#[test]
fn perfect_tracker_scores_one_per_step() {
    let cfg = tiny();
    let tasks = (0..2).map(|_| Perfect { t: 0.0 }).collect();
    let run = train_task(stub_params(), tasks, &cfg, 0, 2, None, &mut noop).unwrap();
    for row in &run.curve {
        assert_eq!(row.mean_reward, 1.0);
        assert_eq!(row.mean_raw_reward, 1.0);
        assert_eq!(row.episodes, 0);
        assert_eq!(row.mean_return, None);
    }
}

#[test]
fn terminate_at_first_step_cuts_bootstrap() {
    let p = stub_params();
    let mut runners: Vec<_> = (0..3).map(|i| EnvRunner::new(i, OneStep { t: 0.0 }, i as u64)).collect();
    let mut batch = collect_rollouts(&p, &mut runners, 5, 0).unwrap();
    assert_eq!(batch.episodes.len(), 15);
    assert!(batch.episodes.iter().all(|e| e.steps == 1 && e.ret == 0.5 && e.termination == TerminationReason::RollLimit));
    assert!(batch.bootstrap.iter().all(|b| *b == 0.0));
    batch.compute_advantages(0.99, 0.95, false);
    for t in &batch.transitions {
        assert!((t.advantage - (0.5 - t.value)).abs() < 1e-12);
        assert!((t.ret - 0.5).abs() < 1e-12);
    }
}

#[test]
fn adaptation_freezes_decoder_and_keeps_env_layout() {
    let morph = RobotMorphology::default();
    let cfg = tiny();
    let s1 = train_imitation(&cfg, vec![clip()], &morph, &mut noop).unwrap().checkpoint;
    assert_eq!(s1.stage, Stage::Imitation);
    let out = train_adaptation(&cfg, &s1, None, &morph, &mut noop).unwrap();
    let s2 = out.checkpoint;
    assert_eq!(s2.stage, Stage::Adaptation);
    assert_eq!(s2.params.decoder_tensors(), s1.params.decoder_tensors());
    assert!(s2.params.adapter.is_some() && s2.params.llc_frozen);
    let kinds: Vec<TerrainKind> = s2.curriculum.iter().map(|c| c.kind).collect();
    assert_eq!(kinds, TerrainKind::ALL.to_vec());
    assert_eq!(s2.parent_hash.as_deref(), Some(s1.hash().as_str()));
    assert_eq!(out.curve.len(), 2);

    let resumed = train_adaptation(&cfg, &s1, Some(&s2), &morph, &mut noop).unwrap().checkpoint;
    assert_eq!(resumed.update, 4);
    assert_eq!(resumed.params.decoder_tensors(), s1.params.decoder_tensors());

    let mut other = s1.clone();
    other.seed += 1;
    assert!(matches!(train_adaptation(&cfg, &other, Some(&s2), &morph, &mut noop), Err(TrainError::HashMismatch { .. })));
    assert!(train_adaptation(&cfg, &s2, None, &morph, &mut noop).is_err());
}

#[test]
fn terrain_assignment_cycles_kinds() {
    let a = terrain_assignment(16);
    for (i, k) in a.iter().enumerate() {
        assert_eq!(*k, TerrainKind::ALL[i % 7]);
    }
    assert_eq!(a.iter().filter(|k| **k == TerrainKind::Plane).count(), 3);
}

#[test]
fn curricula_advance_independently() {
    let mut a = CurriculumState::new(TerrainKind::StairUp);
    let b = CurriculumState::new(TerrainKind::StairUp);
    for _ in 0..6 {
        a.record(true, 3);
    }
    assert_eq!(a.advancements, 2);
    assert_eq!(b.advancements, 0);
    assert!(a.difficulty() > b.difficulty());
    let mut c = a.clone();
    c.record(false, 3);
    assert_eq!(c.advancements, a.advancements);
}

#[test]
fn checkpoint_reload_is_identical() {
    let morph = RobotMorphology::default();
    let cfg = tiny();
    let s1 = train_imitation(&cfg, vec![clip()], &morph, &mut noop).unwrap().checkpoint;
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("s1.ckpt");
    let hash = s1.save(&path).unwrap();
    let back = Checkpoint::load(&path).unwrap();
    assert_eq!(back, s1);
    assert_eq!(back.hash(), hash);
    assert_eq!(back.to_json(), s1.to_json());

    let x = input_for(&s1.params);
    let eps = [0.3; 8];
    assert_eq!(s1.params.forward(&x, &eps).unwrap().mean_action, back.params.forward(&x, &eps).unwrap().mean_action);
}

fn input_for(p: &PolicyParams) -> PolicyInput {
    PolicyInput::new(vec![0.1; p.cond_dim()], vec![0.05; PROPRIO_DIM], &ExteroPatch::constant(-0.3))
}
