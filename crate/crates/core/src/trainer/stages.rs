//! Training loops: a generic PPO driver, stage-one imitation and stage-two
//! terrain adaptation.

use std::fmt::Write as _;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::ppo::{collect_rollouts, ppo_update, Adam, EnvRunner, TrajectoryBatch, UpdateStats};
use super::tasks::{CommandTask, ImitationTask, Task};
use super::{derive_seed, TrainConfig, TrainError};
use crate::mocap::{GaitSpec, MotionClip};
use crate::policy::{Checkpoint, OptimizerState, PolicyParams, Stage};
use crate::retarget::RobotMorphology;
use crate::simenv::SimError;
use crate::terrain::{CurriculumState, TerrainField, TerrainKind};
use crate::NUM_JOINTS;

/// Column order of per-terrain curve fields.
pub const CURVE_TERRAINS: [TerrainKind; 7] = TerrainKind::ALL;

/// One line of the training-curve log.
#[derive(Clone, Debug, PartialEq)]
pub struct CurveRow {
    pub update: u64,
    pub stage: Stage,
    /// Mean return of episodes that ended in this update's rollouts.
    pub mean_return: Option<f64>,
    pub mean_reward: f64,
    /// Mean per-step reward without shaping penalties.
    pub mean_raw_reward: f64,
    pub terrain_returns: [Option<f64>; 7],
    pub episodes: usize,
    pub stats: UpdateStats,
    /// Mean curriculum difficulty over the envs of each kind.
    pub curriculum: [Option<f64>; 7],
}

pub struct TrainOutput {
    pub checkpoint: Checkpoint,
    pub curve: Vec<CurveRow>,
}

fn stage_name(s: Stage) -> &'static str {
    match s {
        Stage::Imitation => "imitate",
        Stage::Adaptation => "adapt",
    }
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn curve_csv(rows: &[CurveRow]) -> String {
    let mut s = String::from("update,stage,mean_return,mean_reward,mean_raw_reward,episodes");
    for k in CURVE_TERRAINS {
        write!(s, ",return_{k}").unwrap();
    }
    s.push_str(",kl,kl_penalty,approx_kl,clip_fraction,policy_loss,value_loss,entropy");
    for k in CURVE_TERRAINS {
        write!(s, ",level_{k}").unwrap();
    }
    s.push('\n');
    for r in rows {
        write!(
            s,
            "{},{},{},{},{},{}",
            r.update,
            stage_name(r.stage),
            opt(r.mean_return),
            r.mean_reward,
            r.mean_raw_reward,
            r.episodes
        )
        .unwrap();
        for v in r.terrain_returns {
            write!(s, ",{}", opt(v)).unwrap();
        }
        let st = &r.stats;
        write!(
            s,
            ",{},{},{},{},{},{},{}",
            st.latent_kl, st.kl_penalty, st.approx_kl, st.clip_fraction, st.policy_loss, st.value_loss, st.entropy
        )
        .unwrap();
        for v in r.curriculum {
            write!(s, ",{}", opt(v)).unwrap();
        }
        s.push('\n');
    }
    s
}

fn kind_index(k: TerrainKind) -> usize {
    CURVE_TERRAINS.iter().position(|&c| c == k).expect("known terrain kind")
}

fn curve_row<T: Task>(update: u64, stage: Stage, batch: &TrajectoryBatch, stats: UpdateStats, runners: &[EnvRunner<T>]) -> CurveRow {
    let mean = |v: &[f64]| if v.is_empty() { None } else { Some(v.iter().sum::<f64>() / v.len() as f64) };
    let all: Vec<f64> = batch.episodes.iter().map(|e| e.ret).collect();
    let terrain_returns = std::array::from_fn(|i| {
        let v: Vec<f64> = batch.episodes.iter().filter(|e| kind_index(e.kind) == i).map(|e| e.ret).collect();
        mean(&v)
    });
    let curriculum = std::array::from_fn(|i| {
        let v: Vec<f64> = runners
            .iter()
            .filter_map(|r| r.task.curriculum())
            .filter(|c| kind_index(c.kind) == i)
            .map(|c| c.difficulty())
            .collect();
        mean(&v)
    });
    CurveRow {
        update,
        stage,
        mean_return: mean(&all),
        mean_reward: batch.mean_reward(),
        mean_raw_reward: batch.mean_raw_reward(),
        terrain_returns,
        episodes: batch.episodes.len(),
        stats,
        curriculum,
    }
}

fn nonfinite_action(update: u64, e: TrainError) -> TrainError {
    match e {
        TrainError::Sim(SimError::NonFiniteAction(i)) => TrainError::NonFinite {
            update,
            what: "action".into(),
            diagnostics: format!("policy produced a non-finite target for joint {i}"),
        },
        other => other,
    }
}

/// Result of [`train_task`].
pub struct TaskRun<T: Task> {
    pub params: PolicyParams,
    pub optimizer: OptimizerState,
    pub curve: Vec<CurveRow>,
    pub runners: Vec<EnvRunner<T>>,
}

/// Runs `updates` PPO iterations of `params` on `tasks`, one env per task.
/// `on_update` sees each curve row as it is produced.
pub fn train_task<T: Task>(
    mut params: PolicyParams,
    tasks: Vec<T>,
    cfg: &TrainConfig,
    start_update: u64,
    updates: u64,
    optimizer: Option<OptimizerState>,
    on_update: &mut dyn FnMut(&CurveRow),
) -> Result<TaskRun<T>, TrainError> {
    cfg.validate()?;
    let stage = params.stage;
    let stage_tag = stage as u64;
    let mut runners: Vec<EnvRunner<T>> = tasks
        .into_iter()
        .enumerate()
        .map(|(i, t)| EnvRunner::new(i, t, derive_seed(cfg.seed, &[stage_tag, start_update, i as u64, 2])))
        .collect();
    let mut adam = match optimizer {
        Some(s) => Adam::with_state(cfg.ppo.learning_rate, &params, s)?,
        None => Adam::new(cfg.ppo.learning_rate, &params),
    };
    let pool = if cfg.workers > 0 {
        Some(
            rayon::ThreadPoolBuilder::new()
                .num_threads(cfg.workers)
                .build()
                .map_err(|e| TrainError::Config(e.to_string()))?,
        )
    } else {
        None
    };
    let mut curve = Vec::with_capacity(updates as usize);
    for u in start_update..start_update + updates {
        let collect = |p: &PolicyParams, r: &mut [EnvRunner<T>]| collect_rollouts(p, r, cfg.ppo.rollout_horizon, u);
        let batch = match &pool {
            Some(pool) => pool.install(|| collect(&params, &mut runners)),
            None => collect(&params, &mut runners),
        };
        let mut batch = batch.map_err(|e| nonfinite_action(u, e))?;
        batch.compute_advantages(cfg.ppo.discount, cfg.ppo.gae_lambda, cfg.ppo.normalize_advantages);
        let stats = ppo_update(&mut params, &mut adam, &batch, &cfg.ppo, derive_seed(cfg.seed, &[stage_tag, u, 1]))?;
        let row = curve_row(u, stage, &batch, stats, &runners);
        on_update(&row);
        curve.push(row);
    }
    Ok(TaskRun { params, optimizer: adam.state, curve, runners })
}

/// The terrain an imitation clip was recorded on.
pub fn clip_terrain(clip: &MotionClip) -> TerrainField {
    GaitSpec { terrain_tag: clip.terrain_tag, ..GaitSpec::default() }.terrain()
}

/// Mean joint pose over every frame of `clips`.
pub fn mean_joint_pose(clips: &[MotionClip]) -> [f64; NUM_JOINTS] {
    let mut sum = [0.0; NUM_JOINTS];
    let mut n = 0usize;
    for c in clips {
        for f in &c.frames {
            for j in 0..NUM_JOINTS {
                sum[j] += f.joint_angles[j];
            }
            n += 1;
        }
    }
    sum.map(|s| s / n.max(1) as f64)
}

/// Stage one: PPO on clip tracking with reference-state initialisation.
pub fn train_imitation(
    cfg: &TrainConfig,
    clips: Vec<MotionClip>,
    morph: &RobotMorphology,
    on_update: &mut dyn FnMut(&CurveRow),
) -> Result<TrainOutput, TrainError> {
    cfg.validate()?;
    if clips.is_empty() {
        return Err(TrainError::Config("imitation needs at least one clip".into()));
    }
    let mut pcfg = cfg.policy.clone();
    if pcfg.action_bias.is_empty() {
        pcfg.action_bias = mean_joint_pose(&clips).to_vec();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[0]));
    let params = PolicyParams::new(pcfg, &mut rng)?;
    let fields: Arc<Vec<TerrainField>> = Arc::new(clips.iter().map(clip_terrain).collect());
    let clips = Arc::new(clips);
    let tasks = (0..cfg.ppo.num_envs)
        .map(|i| {
            ImitationTask::new(
                clips.clone(),
                fields.clone(),
                cfg.sim.clone(),
                morph.clone(),
                derive_seed(cfg.seed, &[0, i as u64, 3]),
            )
        })
        .collect::<Result<Vec<_>, _>>()?;
    let run = train_task(params, tasks, cfg, 0, cfg.ppo.max_updates, None, on_update)?;
    let mut checkpoint = Checkpoint::new(run.params, cfg.ppo.max_updates, cfg.seed);
    checkpoint.optimizer = Some(run.optimizer);
    Ok(TrainOutput { checkpoint, curve: run.curve })
}

/// Env `i` trains on `TerrainKind::ALL[i % 7]`.
pub fn terrain_assignment(num_envs: usize) -> Vec<TerrainKind> {
    (0..num_envs).map(|i| TerrainKind::ALL[i % TerrainKind::ALL.len()]).collect()
}

/// Stage two: frozen decoder, fresh command encoder, adapter and value head,
/// per-env terrain curricula. `resume` continues an earlier stage-two run
/// that must have frozen exactly `stage1`.
pub fn train_adaptation(
    cfg: &TrainConfig,
    stage1: &Checkpoint,
    resume: Option<&Checkpoint>,
    morph: &RobotMorphology,
    on_update: &mut dyn FnMut(&CurveRow),
) -> Result<TrainOutput, TrainError> {
    cfg.validate()?;
    stage1.expect_stage(Stage::Imitation)?;
    let parent = stage1.hash();
    let kinds = terrain_assignment(cfg.ppo.num_envs);
    let (params, curricula, start, optimizer) = match resume {
        Some(r) => {
            r.expect_stage(Stage::Adaptation)?;
            let found = r.parent_hash.clone().unwrap_or_default();
            if found != parent {
                return Err(TrainError::HashMismatch { expected: found, found: parent });
            }
            if r.curriculum.len() != kinds.len() || r.curriculum.iter().zip(&kinds).any(|(c, k)| c.kind != *k) {
                return Err(TrainError::Config("resume checkpoint has a different env layout".into()));
            }
            (r.params.clone(), r.curriculum.clone(), r.update, r.optimizer.clone())
        }
        None => {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[1]));
            let p = stage1.params.clone().into_adaptation(&mut rng)?;
            (p, kinds.iter().map(|&k| CurriculumState::new(k)).collect(), 0, None)
        }
    };
    let tasks = kinds
        .iter()
        .zip(curricula)
        .enumerate()
        .map(|(i, (&k, c))| {
            CommandTask::new(
                k,
                c,
                cfg.curriculum_streak,
                cfg.commands,
                cfg.rewards,
                cfg.sim.clone(),
                morph.clone(),
                derive_seed(cfg.seed, &[1, start, i as u64, 3]),
            )
        })
        .collect::<Result<Vec<_>, _>>()?;
    let run = train_task(params, tasks, cfg, start, cfg.ppo.max_updates, optimizer, on_update)?;
    let mut checkpoint = Checkpoint::new(run.params, start + cfg.ppo.max_updates, cfg.seed);
    checkpoint.curriculum = run.runners.iter().map(|r| r.task.curriculum().expect("command tasks carry curricula").clone()).collect();
    checkpoint.parent_hash = Some(parent);
    checkpoint.optimizer = Some(run.optimizer);
    Ok(TrainOutput { checkpoint, curve: run.curve })
}
