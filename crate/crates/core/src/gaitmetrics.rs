//! Contact-phase detection, gait style parameters and return tables.

use std::fmt::Write as _;

use nalgebra::{UnitQuaternion, Vector3};
use rayon::prelude::*;
use thiserror::Error;

use crate::math::{heading, quat_from_wxyz, vec3};
use crate::mocap::MotionClip;
use crate::policy::{PolicyError, PolicyInput, PolicyParams};
use crate::retarget::Leg;
use crate::simenv::{TerminationReason, TrajectoryRecord};
use crate::terrain::{TerrainField, TerrainKind};
use crate::trainer::{derive_seed, Task, TrainError};
use crate::{NUM_JOINTS, NUM_LEGS};

/// Shortest contact or flight run kept by [`detect_contacts`], in samples.
pub const DEBOUNCE_STEPS: usize = 2;
/// Toe height above the terrain still counted as touching in clip dumps.
pub const CLIP_CONTACT_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("malformed trajectory: {0}")]
    Malformed(String),
    #[error("{toe} toe has {found} complete gait cycles, need at least 2")]
    InsufficientCycles { toe: Leg, found: usize },
    #[error("return table would be empty: {0}")]
    Empty(String),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
}

/// Per-toe `(touchdown, liftoff)` intervals in seconds.
#[derive(Clone, Debug, PartialEq)]
pub struct ContactSequence {
    /// Sample spacing, the detection resolution.
    pub dt: f64,
    /// Time of the first sample.
    pub start: f64,
    /// Time just after the last sample.
    pub end: f64,
    pub toes: [Vec<(f64, f64)>; NUM_LEGS],
}

impl ContactSequence {
    /// Touchdowns that were observed, not inherited from the first sample.
    fn observed_touchdowns(&self, leg: usize) -> impl Iterator<Item = &(f64, f64)> {
        let start = self.start;
        let tol = self.dt * 1e-6;
        self.toes[leg].iter().filter(move |(td, _)| *td > start + tol)
    }
}

/// Removes runs shorter than `min_len` samples: first short contacts, then short gaps.
fn debounce(flags: &[bool], min_len: usize) -> Vec<bool> {
    let mut f = flags.to_vec();
    for target in [true, false] {
        let mut i = 0;
        while i < f.len() {
            let mut j = i;
            while j < f.len() && f[j] == f[i] {
                j += 1;
            }
            let interior = i > 0 && j < f.len();
            if f[i] == target && j - i < min_len && (target || interior) {
                f[i..j].iter_mut().for_each(|x| *x = !target);
            }
            i = j;
        }
    }
    f
}

/// Sample times and spacing; rejects empty, non-finite or non-uniform timelines.
fn timeline(times: &[f64]) -> Result<f64, MetricsError> {
    if times.len() < 2 {
        return Err(MetricsError::Malformed("need at least two samples".into()));
    }
    if times.iter().any(|t| !t.is_finite()) {
        return Err(MetricsError::Malformed("non-finite time stamp".into()));
    }
    let dt = (times[times.len() - 1] - times[0]) / (times.len() - 1) as f64;
    if !(dt > 0.0) {
        return Err(MetricsError::Malformed("time stamps must increase".into()));
    }
    for (k, w) in times.windows(2).enumerate() {
        let d = w[1] - w[0];
        if (d - dt).abs() > 1e-6 * dt.max(1.0) + 1e-9 {
            return Err(MetricsError::Malformed(format!("non-uniform sampling at record {}", k + 1)));
        }
    }
    Ok(dt)
}

/// Debounced contact intervals from per-sample flags.
pub fn contacts_from_flags(times: &[f64], flags: &[[bool; NUM_LEGS]]) -> Result<ContactSequence, MetricsError> {
    if times.len() != flags.len() {
        return Err(MetricsError::Malformed("times and flags differ in length".into()));
    }
    let dt = timeline(times)?;
    let n = times.len();
    let end = times[n - 1] + dt;
    let toes = std::array::from_fn(|leg| {
        let raw: Vec<bool> = flags.iter().map(|f| f[leg]).collect();
        let f = debounce(&raw, DEBOUNCE_STEPS);
        let mut out = Vec::new();
        let mut k = 0;
        while k < n {
            if f[k] {
                let s = k;
                while k < n && f[k] {
                    k += 1;
                }
                let liftoff = if k < n { times[k] } else { end };
                out.push((times[s], liftoff));
            } else {
                k += 1;
            }
        }
        out
    });
    Ok(ContactSequence { dt, start: times[0], end, toes })
}

/// Debounced contact intervals of a trajectory dump.
pub fn detect_contacts(records: &[TrajectoryRecord]) -> Result<ContactSequence, MetricsError> {
    let times: Vec<f64> = records.iter().map(|r| r.time).collect();
    let flags: Vec<[bool; NUM_LEGS]> = records.iter().map(|r| r.toe_contacts).collect();
    contacts_from_flags(&times, &flags)
}

/// Toe positions and base heading at one sample.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ToeSample {
    pub time: f64,
    pub toes: [Vector3<f64>; NUM_LEGS],
    pub heading: f64,
}

pub fn toe_samples(records: &[TrajectoryRecord]) -> Vec<ToeSample> {
    records
        .iter()
        .map(|r| {
            let [w, x, y, z] = r.base_orientation;
            ToeSample {
                time: r.time,
                toes: r.toe_positions.map(vec3),
                heading: heading(&UnitQuaternion::new_normalize(quat_from_wxyz(w, x, y, z))),
            }
        })
        .collect()
}

/// Mean and population standard deviation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
    pub count: usize,
}

impl Stat {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len();
        if n == 0 {
            return Self { mean: f64::NAN, std: f64::NAN, count: 0 };
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
        Self { mean, std: var.sqrt(), count: n }
    }
}

/// Style parameters pooled over all legs and cycles.
#[derive(Clone, Debug, PartialEq)]
pub struct GaitMetrics {
    pub t_cycle: Stat,
    pub t_swing: Stat,
    pub t_stance: Stat,
    pub d_step: Stat,
    /// Per-cycle `(T_cycle, T_swing, T_stance)`.
    pub cycles: Vec<(f64, f64, f64)>,
}

impl GaitMetrics {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("statistic,T_cycle,T_swing,T_stance,D_step\n");
        let all = [self.t_cycle, self.t_swing, self.t_stance, self.d_step];
        let fields: [(&str, fn(&Stat) -> f64); 3] =
            [("mean", |x| x.mean), ("std", |x| x.std), ("count", |x| x.count as f64)];
        for (name, f) in fields {
            write!(s, "{name}").unwrap();
            for st in &all {
                write!(s, ",{}", f(st)).unwrap();
            }
            s.push('\n');
        }
        s
    }
}

fn sample_at(samples: &[ToeSample], t: f64) -> Option<&ToeSample> {
    let i = samples.partition_point(|s| s.time < t - 1e-9);
    samples.get(i)
}

/// `T_cycle`, `T_swing`, `T_stance` per observed cycle and `D_step` between
/// opposite-side touchdowns, pooled over legs.
pub fn gait_parameters(contacts: &ContactSequence, samples: &[ToeSample]) -> Result<GaitMetrics, MetricsError> {
    let mut cycles = Vec::new();
    for leg in Leg::ALL {
        let i = leg.index();
        let observed: Vec<(f64, f64)> = contacts.observed_touchdowns(i).copied().collect();
        let mut found = 0;
        for w in observed.windows(2) {
            let (td, lo) = w[0];
            let (next_td, _) = w[1];
            cycles.push((next_td - td, next_td - lo, lo - td));
            found += 1;
        }
        if found < 2 {
            return Err(MetricsError::InsufficientCycles { toe: leg, found });
        }
    }
    let mut d_step = Vec::new();
    for leg in Leg::ALL {
        let i = leg.index();
        let j = leg.opposite().index();
        for &(td, _) in contacts.observed_touchdowns(i) {
            let Some(&(next, _)) = contacts.observed_touchdowns(j).find(|(t, _)| *t > td + 1e-9) else { continue };
            let (Some(a), Some(b)) = (sample_at(samples, td), sample_at(samples, next)) else { continue };
            let (s, c) = a.heading.sin_cos();
            let d = b.toes[j] - a.toes[i];
            d_step.push(d.x * c + d.y * s);
        }
    }
    let col = |k: usize| -> Vec<f64> {
        cycles.iter().map(|c: &(f64, f64, f64)| [c.0, c.1, c.2][k]).collect()
    };
    Ok(GaitMetrics { t_cycle: Stat::of(&col(0)), t_swing: Stat::of(&col(1)), t_stance: Stat::of(&col(2)), d_step: Stat::of(&d_step), cycles })
}

/// Contacts and metrics straight from a dump.
pub fn gait_metrics_from_dump(records: &[TrajectoryRecord]) -> Result<GaitMetrics, MetricsError> {
    let c = detect_contacts(records)?;
    gait_parameters(&c, &toe_samples(records))
}

/// Dump of a reference clip; a toe touches when it sits on the terrain and is not rising.
pub fn clip_to_dump(clip: &MotionClip, field: &TerrainField) -> Vec<TrajectoryRecord> {
    let n = clip.frames.len();
    (0..n)
        .map(|k| {
            let f = &clip.frames[k];
            let contacts = std::array::from_fn(|leg| {
                let p = f.end_effector_positions[leg];
                let ground = p.z - field.height_at(p.x, p.y) <= CLIP_CONTACT_TOLERANCE;
                let rising = k + 1 < n && clip.frames[k + 1].end_effector_positions[leg].z > p.z + 1e-9;
                ground && !rising
            });
            let state = crate::simenv::RobotState {
                base_position: f.base_position,
                base_orientation: f.base_orientation,
                base_linear_velocity: f.base_linear_velocity,
                base_angular_velocity: f.base_angular_velocity,
                joint_angles: f.joint_angles,
                joint_velocities: f.joint_velocities,
                toe_contacts: contacts,
                toe_positions: f.end_effector_positions,
            };
            TrajectoryRecord::new(
                k as f64 * clip.dt(),
                &state,
                &f.joint_angles,
                Default::default(),
                if k + 1 == n { TerminationReason::TimeLimit } else { TerminationReason::None },
            )
        })
        .collect()
}

/// Deterministic controller used for evaluation.
pub trait EvalPolicy: Sync {
    fn act(&self, input: &PolicyInput) -> Result<[f64; NUM_JOINTS], PolicyError>;
}

/// Mean latent, mean action, residual gated by the input's `α`.
impl EvalPolicy for PolicyParams {
    fn act(&self, input: &PolicyInput) -> Result<[f64; NUM_JOINTS], PolicyError> {
        Ok(self.forward(input, &[0.0; crate::LATENT_DIM])?.mean_action)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpisodeResult {
    pub ret: f64,
    /// Return without shaping penalties.
    pub raw_return: f64,
    pub steps: usize,
    pub termination: TerminationReason,
}

/// Runs one episode to termination.
pub fn run_episode<P: EvalPolicy + ?Sized, T: Task>(policy: &P, task: &mut T) -> Result<EpisodeResult, MetricsError> {
    let mut input = task.reset()?;
    let mut r = EpisodeResult { ret: 0.0, raw_return: 0.0, steps: 0, termination: TerminationReason::None };
    loop {
        let a = policy.act(&input)?;
        let s = task.step(&a)?;
        r.ret += s.reward;
        r.raw_return += s.raw_reward;
        r.steps += 1;
        if s.done {
            r.termination = s.termination;
            return Ok(r);
        }
        input = s.input;
    }
}

/// Records one episode as a trajectory dump; the task must simulate a robot.
pub fn record_episode<P: EvalPolicy + ?Sized, T: Task>(policy: &P, task: &mut T) -> Result<Vec<TrajectoryRecord>, MetricsError> {
    let mut input = task.reset()?;
    let mut out = Vec::new();
    loop {
        let a = policy.act(&input)?;
        let s = task.step(&a)?;
        let state = task
            .robot_state()
            .ok_or_else(|| MetricsError::Malformed("task does not simulate a robot".into()))?;
        out.push(TrajectoryRecord::new(task.time(), state, &a, task.reward_terms(), s.termination));
        if s.done {
            return Ok(out);
        }
        input = s.input;
    }
}

/// Per-terrain return statistics of one method.
#[derive(Clone, Debug, PartialEq)]
pub struct ReturnRow {
    pub method: String,
    pub cells: Vec<Stat>,
}

/// Rows per method, columns per terrain.
#[derive(Clone, Debug, PartialEq)]
pub struct ReturnTable {
    pub terrains: Vec<TerrainKind>,
    pub rows: Vec<ReturnRow>,
}

impl ReturnTable {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("method");
        for k in &self.terrains {
            write!(s, ",{k}").unwrap();
        }
        s.push('\n');
        for r in &self.rows {
            s.push_str(&r.method);
            for c in &r.cells {
                write!(s, ",{:.6}±{:.6}", c.mean, c.std).unwrap();
            }
            s.push('\n');
        }
        s
    }

    /// Appends the rows of `other`; terrains must match.
    pub fn merge(&mut self, other: ReturnTable) -> Result<(), MetricsError> {
        if other.terrains != self.terrains {
            return Err(MetricsError::Malformed("return tables have different terrain columns".into()));
        }
        self.rows.extend(other.rows);
        Ok(())
    }
}

/// Evaluates `episodes` episodes per terrain kind. Each episode gets its own
/// task from `make_task(kind, seed)`; episodes run in parallel and merge by index.
/// Emits a `method` row with the optimised return and a `method/raw` row without penalties.
pub fn evaluate_return<P, T, F>(
    policy: &P,
    method: &str,
    kinds: &[TerrainKind],
    episodes: usize,
    make_task: F,
    seed: u64,
) -> Result<ReturnTable, MetricsError>
where
    P: EvalPolicy + ?Sized,
    T: Task,
    F: Fn(TerrainKind, u64) -> Result<T, TrainError> + Sync,
{
    if episodes == 0 || kinds.is_empty() {
        return Err(MetricsError::Empty("need at least one terrain and one episode".into()));
    }
    let jobs: Vec<(usize, usize)> = (0..kinds.len()).flat_map(|k| (0..episodes).map(move |e| (k, e))).collect();
    let results: Vec<Result<EpisodeResult, MetricsError>> = jobs
        .par_iter()
        .map(|&(k, e)| {
            let mut task = make_task(kinds[k], derive_seed(seed, &[k as u64, e as u64]))?;
            run_episode(policy, &mut task)
        })
        .collect();
    let mut returns = vec![Vec::with_capacity(episodes); kinds.len()];
    let mut raw = vec![Vec::with_capacity(episodes); kinds.len()];
    for (&(k, _), r) in jobs.iter().zip(results) {
        let r = r?;
        returns[k].push(r.ret);
        raw[k].push(r.raw_return);
    }
    Ok(ReturnTable {
        terrains: kinds.to_vec(),
        rows: vec![
            ReturnRow { method: method.to_string(), cells: returns.iter().map(|v| Stat::of(v)).collect() },
            ReturnRow { method: format!("{method}/raw"), cells: raw.iter().map(|v| Stat::of(v)).collect() },
        ],
    })
}
