//! Reference motion clips: data model, text format, interpolation, future
//! target windows, a synthetic trot generator and the dataset manifest.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use nalgebra::{UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::math::{quat_from_wxyz, quat_wxyz, slerp};
use crate::retarget::{self, Leg, RetargetError, RobotMorphology};
use crate::terrain::{TerrainField, TerrainKind, TerrainParams};
use crate::{NUM_JOINTS, NUM_LEGS};

/// Look-ahead horizons of a [`ReferenceWindow`], seconds.
pub const HORIZONS: [f64; 4] = [1.0 / 30.0, 1.0 / 15.0, 1.0 / 3.0, 1.0];
/// Values per horizon in [`ReferenceWindow::features`].
pub const WINDOW_FRAME_FEATURES: usize = 3 + 4 + NUM_JOINTS;
/// Flattened [`ReferenceWindow::features`] length.
pub const WINDOW_FEATURES: usize = HORIZONS.len() * WINDOW_FRAME_FEATURES;

const QUAT_NORM_TOL: f64 = 1e-6;
const TIME_TOL: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum MocapError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("invalid clip: {0}")]
    Validation(String),
    #[error("time {t} s outside clip range [0, {duration}] s")]
    Range { t: f64, duration: f64 },
    #[error("gait synthesis failed: {0}")]
    Synthesis(String),
    #[error("unknown tag `{0}`")]
    Tag(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum TerrainTag {
    Plane,
    StairUp,
    StairDown,
    SlopeUp,
    SlopeDown,
}

impl TerrainTag {
    pub const ALL: [TerrainTag; 5] =
        [TerrainTag::Plane, TerrainTag::StairUp, TerrainTag::StairDown, TerrainTag::SlopeUp, TerrainTag::SlopeDown];

    pub fn terrain_kind(self) -> TerrainKind {
        match self {
            TerrainTag::Plane => TerrainKind::Plane,
            TerrainTag::StairUp => TerrainKind::StairUp,
            TerrainTag::StairDown => TerrainKind::StairDown,
            TerrainTag::SlopeUp => TerrainKind::SlopeUp,
            TerrainTag::SlopeDown => TerrainKind::SlopeDown,
        }
    }

    fn as_str(self) -> &'static str {
        match self {
            TerrainTag::Plane => "plane",
            TerrainTag::StairUp => "stairup",
            TerrainTag::StairDown => "stairdown",
            TerrainTag::SlopeUp => "slopeup",
            TerrainTag::SlopeDown => "slopedown",
        }
    }
}

fn normalize_tag(s: &str) -> String {
    s.chars().filter(|c| *c != '_' && *c != '-').collect::<String>().to_ascii_lowercase()
}

impl FromStr for TerrainTag {
    type Err = MocapError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let n = normalize_tag(s);
        TerrainTag::ALL.into_iter().find(|t| t.as_str() == n).ok_or_else(|| MocapError::Tag(s.to_string()))
    }
}

impl fmt::Display for TerrainTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum GaitTag {
    Walk,
    Run,
    FastRun,
}

impl GaitTag {
    pub const ALL: [GaitTag; 3] = [GaitTag::Walk, GaitTag::Run, GaitTag::FastRun];

    fn as_str(self) -> &'static str {
        match self {
            GaitTag::Walk => "walk",
            GaitTag::Run => "run",
            GaitTag::FastRun => "fastrun",
        }
    }
}

impl FromStr for GaitTag {
    type Err = MocapError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let n = normalize_tag(s);
        GaitTag::ALL.into_iter().find(|t| t.as_str() == n).ok_or_else(|| MocapError::Tag(s.to_string()))
    }
}

impl fmt::Display for GaitTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One reference frame. End effectors are world-frame toe positions.
#[derive(Clone, Debug, PartialEq)]
pub struct ReferencePose {
    pub base_position: Vector3<f64>,
    pub base_orientation: UnitQuaternion<f64>,
    pub base_linear_velocity: Vector3<f64>,
    pub base_angular_velocity: Vector3<f64>,
    pub joint_angles: [f64; NUM_JOINTS],
    pub joint_velocities: [f64; NUM_JOINTS],
    pub end_effector_positions: [Vector3<f64>; NUM_LEGS],
}

impl ReferencePose {
    /// Largest absolute difference over every scalar field (quaternions compared sign-aligned).
    pub fn max_abs_diff(&self, other: &ReferencePose) -> f64 {
        let mut m: f64 = 0.0;
        let mut upd = |a: f64, b: f64| m = m.max((a - b).abs());
        for k in 0..3 {
            upd(self.base_position[k], other.base_position[k]);
            upd(self.base_linear_velocity[k], other.base_linear_velocity[k]);
            upd(self.base_angular_velocity[k], other.base_angular_velocity[k]);
        }
        let qa = quat_wxyz(&self.base_orientation);
        let mut qb = quat_wxyz(&other.base_orientation);
        if qa.iter().zip(&qb).map(|(a, b)| a * b).sum::<f64>() < 0.0 {
            qb = qb.map(|v| -v);
        }
        for k in 0..4 {
            upd(qa[k], qb[k]);
        }
        for k in 0..NUM_JOINTS {
            upd(self.joint_angles[k], other.joint_angles[k]);
            upd(self.joint_velocities[k], other.joint_velocities[k]);
        }
        for l in 0..NUM_LEGS {
            for k in 0..3 {
                upd(self.end_effector_positions[l][k], other.end_effector_positions[l][k]);
            }
        }
        m
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MotionClip {
    pub name: String,
    pub fps: u32,
    pub frames: Vec<ReferencePose>,
    pub terrain_tag: TerrainTag,
    pub gait_tag: GaitTag,
}

fn lerp3(a: &Vector3<f64>, b: &Vector3<f64>, s: f64) -> Vector3<f64> {
    a + (b - a) * s
}

fn lerp_arr<const N: usize>(a: &[f64; N], b: &[f64; N], s: f64) -> [f64; N] {
    std::array::from_fn(|i| a[i] + (b[i] - a[i]) * s)
}

impl MotionClip {
    pub fn validate(&self) -> Result<(), MocapError> {
        if self.fps == 0 {
            return Err(MocapError::Validation("fps must be positive".into()));
        }
        if self.frames.is_empty() {
            return Err(MocapError::Validation("clip has no frames".into()));
        }
        for (i, f) in self.frames.iter().enumerate() {
            let norm = f.base_orientation.quaternion().norm();
            if (norm - 1.0).abs() > 1e-9 {
                return Err(MocapError::Validation(format!("frame {i}: orientation norm {norm}")));
            }
            let finite = f.base_position.iter().all(|v| v.is_finite())
                && f.joint_angles.iter().all(|v| v.is_finite())
                && f.joint_velocities.iter().all(|v| v.is_finite())
                && f.end_effector_positions.iter().all(|p| p.iter().all(|v| v.is_finite()));
            if !finite {
                return Err(MocapError::Validation(format!("frame {i}: non-finite value")));
            }
        }
        Ok(())
    }

    pub fn dt(&self) -> f64 {
        1.0 / self.fps as f64
    }

    /// Time of the final frame.
    pub fn duration(&self) -> f64 {
        (self.frames.len() - 1) as f64 / self.fps as f64
    }

    /// Interpolated pose at time `t`; exact frame times return the stored frame.
    pub fn sample_pose(&self, t: f64) -> Result<ReferencePose, MocapError> {
        let duration = self.duration();
        if !(t >= -TIME_TOL && t <= duration + TIME_TOL) {
            return Err(MocapError::Range { t, duration });
        }
        let pos = (t * self.fps as f64).max(0.0);
        let last = self.frames.len() - 1;
        let mut i = (pos.floor() as usize).min(last);
        let mut frac = pos - i as f64;
        if frac < TIME_TOL {
            frac = 0.0;
        } else if frac > 1.0 - TIME_TOL {
            i += 1;
            frac = 0.0;
        }
        if i >= last {
            return Ok(self.frames[last].clone());
        }
        if frac == 0.0 {
            return Ok(self.frames[i].clone());
        }
        let (a, b) = (&self.frames[i], &self.frames[i + 1]);
        Ok(ReferencePose {
            base_position: lerp3(&a.base_position, &b.base_position, frac),
            base_orientation: slerp(&a.base_orientation, &b.base_orientation, frac),
            base_linear_velocity: lerp3(&a.base_linear_velocity, &b.base_linear_velocity, frac),
            base_angular_velocity: lerp3(&a.base_angular_velocity, &b.base_angular_velocity, frac),
            joint_angles: lerp_arr(&a.joint_angles, &b.joint_angles, frac),
            joint_velocities: lerp_arr(&a.joint_velocities, &b.joint_velocities, frac),
            end_effector_positions: std::array::from_fn(|k| {
                lerp3(&a.end_effector_positions[k], &b.end_effector_positions[k], frac)
            }),
        })
    }

    /// Poses at `t + HORIZONS`, clamped to the final frame.
    pub fn future_targets(&self, t: f64) -> Result<ReferenceWindow, MocapError> {
        if !(t >= 0.0) {
            return Err(MocapError::Range { t, duration: self.duration() });
        }
        let duration = self.duration();
        let mut times = [0.0; 4];
        let mut targets = Vec::with_capacity(4);
        for (k, h) in HORIZONS.iter().enumerate() {
            times[k] = (t + h).min(duration);
            targets.push(self.sample_pose(times[k])?);
        }
        let targets: [ReferencePose; 4] = targets.try_into().expect("four horizons");
        Ok(ReferenceWindow { times, targets })
    }

    /// Text form: header plus 43 columns per frame.
    pub fn to_text(&self) -> String {
        let mut out = format!("fps={} terrain={} gait={}\n", self.fps, self.terrain_tag, self.gait_tag);
        for f in &self.frames {
            let mut row: Vec<f64> = Vec::with_capacity(43);
            row.extend(f.base_position.iter());
            row.extend(quat_wxyz(&f.base_orientation));
            row.extend(f.joint_angles);
            row.extend(f.joint_velocities);
            for p in &f.end_effector_positions {
                row.extend(p.iter());
            }
            let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            out.push_str(&cells.join(" "));
            out.push('\n');
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<(), MocapError> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }
}

/// Future reference poses at [`HORIZONS`] from a query time.
#[derive(Clone, Debug, PartialEq)]
pub struct ReferenceWindow {
    /// Clip times actually sampled (after clamping).
    pub times: [f64; 4],
    pub targets: [ReferencePose; 4],
}

impl ReferenceWindow {
    /// Per horizon: target base position relative to `base_position` in the
    /// yaw-aligned frame, target orientation relative to the yaw frame (w ≥ 0)
    /// and the 12 target joint angles.
    pub fn features(&self, base_position: &Vector3<f64>, yaw: f64) -> Vec<f64> {
        let frame = crate::math::yaw_rotation(yaw);
        let inv = frame.inverse();
        let mut out = Vec::with_capacity(WINDOW_FEATURES);
        for t in &self.targets {
            let rel = inv * (t.base_position - base_position);
            out.extend(rel.iter());
            let mut q = quat_wxyz(&(inv * t.base_orientation));
            if q[0] < 0.0 {
                q = q.map(|v| -v);
            }
            out.extend(q);
            out.extend(t.joint_angles);
        }
        out
    }
}

/// Parses a clip, differencing any velocity the file omits.
pub fn parse_clip(name: &str, text: &str, morph: &RobotMorphology) -> Result<MotionClip, MocapError> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (hline, header) = lines.next().ok_or(MocapError::Parse { line: 1, message: "missing header".into() })?;
    let hl = hline + 1;
    let (mut fps, mut terrain, mut gait) = (None, None, None);
    for token in header.split_whitespace() {
        let (key, value) = token
            .split_once('=')
            .ok_or_else(|| MocapError::Parse { line: hl, message: format!("bad header token `{token}`") })?;
        let perr = |m: String| MocapError::Parse { line: hl, message: m };
        match key {
            "fps" => fps = Some(value.parse::<u32>().map_err(|e| perr(format!("fps: {e}")))?),
            "terrain" => terrain = Some(value.parse::<TerrainTag>().map_err(|e| perr(format!("terrain: {e}")))?),
            "gait" => gait = Some(value.parse::<GaitTag>().map_err(|e| perr(format!("gait: {e}")))?),
            other => return Err(perr(format!("unknown header field `{other}`"))),
        }
    }
    let missing = |f: &str| MocapError::Parse { line: hl, message: format!("header missing `{f}`") };
    let fps = fps.ok_or_else(|| missing("fps"))?;
    let terrain_tag = terrain.ok_or_else(|| missing("terrain"))?;
    let gait_tag = gait.ok_or_else(|| missing("gait"))?;
    if fps == 0 {
        return Err(MocapError::Validation("fps must be positive".into()));
    }

    let mut positions = Vec::new();
    let mut orientations = Vec::new();
    let mut joints = Vec::new();
    let mut jvel = Vec::new();
    let mut ees = Vec::new();
    let mut width = None;
    for (idx, line) in lines {
        let ln = idx + 1;
        let values: Vec<f64> = line
            .split_whitespace()
            .enumerate()
            .map(|(col, tok)| {
                tok.parse::<f64>()
                    .map_err(|e| MocapError::Parse { line: ln, message: format!("column {}: {e}", col + 1) })
            })
            .collect::<Result<_, _>>()?;
        if !matches!(values.len(), 19 | 31 | 43) {
            return Err(MocapError::Validation(format!(
                "line {ln}: expected 19, 31 or 43 columns (7 base + 12 joint angles [+12 joint velocities [+12 end effectors]]), found {}",
                values.len()
            )));
        }
        if *width.get_or_insert(values.len()) != values.len() {
            return Err(MocapError::Validation(format!("line {ln}: column count changes mid-file")));
        }
        if let Some(bad) = values.iter().position(|v| !v.is_finite()) {
            return Err(MocapError::Parse { line: ln, message: format!("column {}: non-finite value", bad + 1) });
        }
        let quat = quat_from_wxyz(values[3], values[4], values[5], values[6]);
        let norm = quat.norm();
        if (norm - 1.0).abs() > QUAT_NORM_TOL {
            return Err(MocapError::Validation(format!("line {ln}: quaternion norm {norm} is not 1")));
        }
        positions.push(Vector3::new(values[0], values[1], values[2]));
        orientations.push(UnitQuaternion::from_quaternion(quat));
        joints.push(std::array::from_fn::<f64, NUM_JOINTS, _>(|k| values[7 + k]));
        if values.len() >= 31 {
            jvel.push(std::array::from_fn::<f64, NUM_JOINTS, _>(|k| values[19 + k]));
        }
        if values.len() == 43 {
            ees.push(std::array::from_fn::<Vector3<f64>, NUM_LEGS, _>(|l| {
                Vector3::new(values[31 + 3 * l], values[32 + 3 * l], values[33 + 3 * l])
            }));
        }
    }
    if positions.is_empty() {
        return Err(MocapError::Validation("clip has no frames".into()));
    }
    let frames = retarget::frames_from_kinematics(
        fps,
        &positions,
        &orientations,
        &joints,
        (!jvel.is_empty()).then_some(jvel.as_slice()),
        (!ees.is_empty()).then_some(ees.as_slice()),
        morph,
    );
    let clip = MotionClip { name: name.to_string(), fps, frames, terrain_tag, gait_tag };
    clip.validate()?;
    Ok(clip)
}

/// Loads a clip file using the default morphology for any missing end effectors.
pub fn load_clip(path: &Path) -> Result<MotionClip, MocapError> {
    load_clip_with(path, &RobotMorphology::default())
}

pub fn load_clip_with(path: &Path, morph: &RobotMorphology) -> Result<MotionClip, MocapError> {
    let text = std::fs::read_to_string(path)?;
    let name = path.file_stem().and_then(|s| s.to_str()).unwrap_or("clip");
    parse_clip(name, &text, morph)
}

/// Parameters for [`synthesize_gait`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GaitSpec {
    pub gait_tag: GaitTag,
    pub terrain_tag: TerrainTag,
    /// Forward base speed, m/s.
    pub speed: f64,
    /// Stance fraction of the cycle.
    pub duty_factor: f64,
    pub cycle_time: f64,
    pub duration: f64,
    pub fps: u32,
    pub base_height: f64,
    pub swing_height: f64,
    pub slope_inclination: f64,
    pub stair_step_height: f64,
    pub stair_step_depth: f64,
    pub stair_step_count: u32,
}

impl Default for GaitSpec {
    fn default() -> Self {
        Self {
            gait_tag: GaitTag::Walk,
            terrain_tag: TerrainTag::Plane,
            speed: 0.5,
            duty_factor: 0.594,
            cycle_time: 0.64,
            duration: 2.0,
            fps: 50,
            base_height: 0.40,
            swing_height: 0.08,
            slope_inclination: 15f64.to_radians(),
            stair_step_height: 0.16,
            stair_step_depth: 0.32,
            stair_step_count: 10,
        }
    }
}

/// Trot phase offsets in cycles, indexed by [`Leg::index`].
pub const TROT_OFFSETS: [f64; NUM_LEGS] = [0.0, 0.5, 0.5, 0.0];

impl GaitSpec {
    pub fn validate(&self) -> Result<(), MocapError> {
        let bad = |m: &str| Err(MocapError::Synthesis(m.to_string()));
        if !(self.speed.is_finite() && self.speed >= 0.0) {
            return bad("speed must be finite and non-negative");
        }
        if !(self.duty_factor > 0.0 && self.duty_factor < 1.0) {
            return bad("duty factor must lie in (0, 1)");
        }
        if !(self.cycle_time > 0.0 && self.cycle_time.is_finite()) {
            return bad("cycle time must be positive");
        }
        if !(self.duration > 0.0 && self.duration.is_finite()) {
            return bad("duration must be positive");
        }
        if self.fps == 0 {
            return bad("fps must be positive");
        }
        if !(self.base_height > 0.0 && self.swing_height >= 0.0) {
            return bad("base height must be positive and swing height non-negative");
        }
        Ok(())
    }

    /// The terrain this clip is synthesized on.
    pub fn terrain(&self) -> TerrainField {
        let params = TerrainParams {
            slope_inclination: self.slope_inclination,
            stair_step_height: self.stair_step_height,
            stair_step_depth: self.stair_step_depth,
            stair_step_count: self.stair_step_count,
            ..TerrainParams::default()
        };
        TerrainField::generate(self.terrain_tag.terrain_kind(), params, 0).expect("gait spec terrain parameters")
    }
}

fn smoothstep(s: f64) -> f64 {
    let s = s.clamp(0.0, 1.0);
    s * s * (3.0 - 2.0 * s)
}

/// Generates a trot clip following `spec`: constant-speed base, stance feet
/// planted under the hip at mid-stance, arched swing trajectories, joints by IK.
pub fn synthesize_gait(spec: &GaitSpec, morph: &RobotMorphology) -> Result<MotionClip, MocapError> {
    spec.validate()?;
    morph.validate().map_err(|e| MocapError::Synthesis(e.to_string()))?;
    let field = spec.terrain();
    let fps = spec.fps;
    let n = (spec.duration * fps as f64).round() as usize + 1;
    let period = spec.cycle_time;
    let duty = spec.duty_factor;
    let v = spec.speed;
    let x0 = match spec.terrain_tag {
        TerrainTag::StairUp | TerrainTag::StairDown => -(morph.body_length + spec.stair_step_depth) / 2.0,
        _ => 0.0,
    };
    let base_x = |t: f64| x0 + v * t;

    let foothold = |leg: Leg, k: f64| {
        let td = (k - TROT_OFFSETS[leg.index()]) * period;
        let hip = morph.hip_positions[leg.index()];
        let x = base_x(td + duty * period / 2.0) + hip.x;
        let y = hip.y + leg.side() * morph.hip_offset;
        Vector3::new(x, y, field.height_at(x, y))
    };

    let mut positions = Vec::with_capacity(n);
    let mut orientations = Vec::with_capacity(n);
    let mut joints = Vec::with_capacity(n);
    for i in 0..n {
        let t = i as f64 / fps as f64;
        let mut feet = [Vector3::zeros(); NUM_LEGS];
        let mut ground = [0.0; NUM_LEGS];
        for leg in Leg::ALL {
            let cycles = t / period + TROT_OFFSETS[leg.index()];
            let k = cycles.floor();
            let phase = cycles - k;
            let (foot, z) = if phase < duty - 1e-9 {
                let p = foothold(leg, k);
                (p, p.z)
            } else {
                let s = (phase - duty) / (1.0 - duty);
                let a = foothold(leg, k);
                let b = foothold(leg, k + 1.0);
                let mut p = a + (b - a) * smoothstep(s);
                let rise = if b.z > a.z { smoothstep(2.0 * s) } else { smoothstep(2.0 * s - 1.0) };
                let z = a.z + (b.z - a.z) * rise;
                p.z = z + spec.swing_height * (std::f64::consts::PI * s).sin();
                p.z = p.z.max(field.height_at(p.x, p.y));
                (p, z)
            };
            feet[leg.index()] = foot;
            ground[leg.index()] = z;
        }
        let front = ground[0].min(ground[1]);
        let hind = ground[2].min(ground[3]);
        let base = Vector3::new(base_x(t), 0.0, spec.base_height + (front + hind) / 2.0);
        let pitch = (front - hind).atan2(morph.body_length);
        let orientation = UnitQuaternion::from_axis_angle(&Vector3::y_axis(), -pitch);
        let to_base = orientation.inverse();
        let mut q = [0.0; NUM_JOINTS];
        for leg in Leg::ALL {
            let sol = retarget::leg_ik(&(to_base * (feet[leg.index()] - base)), leg, morph).map_err(|e| match e {
                RetargetError::Reach { leg, distance, max_reach, .. } => MocapError::Synthesis(format!(
                    "frame {i}: {leg} foot target {distance:.3} m from hip exceeds reach {max_reach:.3} m"
                )),
                other => MocapError::Synthesis(format!("frame {i}: {other}")),
            })?;
            q[3 * leg.index()..3 * leg.index() + 3].copy_from_slice(&sol.angles);
        }
        positions.push(base);
        orientations.push(orientation);
        joints.push(q);
    }
    let frames = retarget::frames_from_kinematics(fps, &positions, &orientations, &joints, None, None, morph);
    let clip = MotionClip {
        name: format!("{}_{}", spec.gait_tag, spec.terrain_tag),
        fps,
        frames,
        terrain_tag: spec.terrain_tag,
        gait_tag: spec.gait_tag,
    };
    clip.validate()?;
    Ok(clip)
}

/// Total clip seconds per (terrain, gait) cell.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DatasetManifest {
    pub durations: BTreeMap<(TerrainTag, GaitTag), f64>,
    pub warnings: Vec<String>,
}

impl Default for DatasetManifest {
    fn default() -> Self {
        let mut durations = BTreeMap::new();
        for t in TerrainTag::ALL {
            for g in GaitTag::ALL {
                durations.insert((t, g), 0.0);
            }
        }
        Self { durations, warnings: Vec::new() }
    }
}

impl DatasetManifest {
    pub fn get(&self, terrain: TerrainTag, gait: GaitTag) -> f64 {
        self.durations.get(&(terrain, gait)).copied().unwrap_or(0.0)
    }

    pub fn add(&mut self, clip: &MotionClip) {
        *self.durations.entry((clip.terrain_tag, clip.gait_tag)).or_insert(0.0) += clip.duration();
    }

    pub fn total(&self) -> f64 {
        self.durations.values().sum()
    }

    /// `terrain,gait,seconds` rows.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("terrain,gait,seconds\n");
        for ((t, g), d) in &self.durations {
            out.push_str(&format!("{t},{g},{d}\n"));
        }
        out
    }
}

/// Sums clip durations over every `*.clip` file in `dir`; unreadable clips are
/// skipped and reported in `warnings`.
pub fn dataset_manifest(dir: &Path) -> Result<DatasetManifest, MocapError> {
    let mut manifest = DatasetManifest::default();
    let mut paths: Vec<_> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "clip"))
        .collect();
    paths.sort();
    for path in paths {
        match load_clip(&path) {
            Ok(clip) => manifest.add(&clip),
            Err(e) => manifest.warnings.push(format!("{}: {e}", path.display())),
        }
    }
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::yaw_rotation;

    fn still_frame(q: UnitQuaternion<f64>, joint0: f64) -> ReferencePose {
        let mut joints = [0.0; NUM_JOINTS];
        joints[0] = joint0;
        ReferencePose {
            base_position: Vector3::new(0.0, 0.0, 0.4),
            base_orientation: q,
            base_linear_velocity: Vector3::zeros(),
            base_angular_velocity: Vector3::zeros(),
            joint_angles: joints,
            joint_velocities: [0.0; NUM_JOINTS],
            end_effector_positions: [Vector3::zeros(); NUM_LEGS],
        }
    }

    fn two_frame_clip() -> MotionClip {
        MotionClip {
            name: "t".into(),
            fps: 30,
            frames: vec![
                still_frame(UnitQuaternion::identity(), 0.0),
                still_frame(yaw_rotation(std::f64::consts::FRAC_PI_2), 0.2),
            ],
            terrain_tag: TerrainTag::Plane,
            gait_tag: GaitTag::Walk,
        }
    }

    fn row(quat_w: f64, joints: usize) -> String {
        let mut cells = vec!["0".to_string(), "0".into(), "0.4".into(), quat_w.to_string(), "0".into(), "0".into(), "0".into()];
        cells.extend((0..joints).map(|_| "0.1".to_string()));
        cells.join(" ")
    }

    #[test]
    fn two_frame_file_parses() {
        let text = format!("fps=30 terrain=plane gait=walk\n{}\n{}\n", row(1.0, 12), row(1.0, 12));
        let clip = parse_clip("c", &text, &RobotMorphology::default()).unwrap();
        assert_eq!(clip.frames.len(), 2);
        assert!((clip.duration() - 1.0 / 30.0).abs() < 1e-15);
    }

    #[test]
    fn thirteen_joint_columns_rejected() {
        let text = format!("fps=30 terrain=plane gait=walk\n{}\n", row(1.0, 13));
        assert!(matches!(parse_clip("c", &text, &RobotMorphology::default()), Err(MocapError::Validation(_))));
    }

    #[test]
    fn half_norm_quaternion_rejected() {
        let text = format!("fps=30 terrain=plane gait=walk\n{}\n", row(0.5, 12));
        assert!(matches!(parse_clip("c", &text, &RobotMorphology::default()), Err(MocapError::Validation(_))));
    }

    #[test]
    fn parse_error_names_line() {
        let text = "fps=30 terrain=plane gait=walk\n0 0 x\n";
        let err = parse_clip("c", text, &RobotMorphology::default()).unwrap_err();
        assert!(err.to_string().contains("line 2"), "{err}");
    }

    #[test]
    fn sampling_endpoints_and_midpoints() {
        let clip = two_frame_clip();
        assert_eq!(clip.sample_pose(0.0).unwrap(), clip.frames[0]);
        let mid = clip.sample_pose(0.5 / 30.0).unwrap();
        assert!((mid.joint_angles[0] - 0.1).abs() < 1e-12);
        let yaw = crate::math::heading(&mid.base_orientation);
        assert!((yaw - std::f64::consts::FRAC_PI_4).abs() < 1e-9);
        assert!(matches!(clip.sample_pose(1.0), Err(MocapError::Range { .. })));
        assert!(matches!(clip.sample_pose(-0.1), Err(MocapError::Range { .. })));
    }

    #[test]
    fn future_targets_clamp_at_end() {
        let spec = GaitSpec::default();
        let clip = synthesize_gait(&spec, &RobotMorphology::default()).unwrap();
        let w = clip.future_targets(0.0).unwrap();
        assert_eq!(w.times, HORIZONS);
        let end = clip.duration();
        let w = clip.future_targets(end).unwrap();
        assert!(w.targets.iter().all(|p| *p == *clip.frames.last().unwrap()));
        let w = clip.future_targets(end - 0.5).unwrap();
        assert!(w.times[2] < end && w.times[3] == end);
        assert_eq!(w.targets[3], *clip.frames.last().unwrap());
        assert_eq!(w.features(&Vector3::zeros(), 0.0).len(), WINDOW_FEATURES);
    }

    #[test]
    fn text_round_trip_is_exact() {
        let clip = synthesize_gait(&GaitSpec::default(), &RobotMorphology::default()).unwrap();
        let back = parse_clip(&clip.name, &clip.to_text(), &RobotMorphology::default()).unwrap();
        assert_eq!(back, clip);
    }

    #[test]
    fn tags_parse_loosely() {
        assert_eq!("StairUp".parse::<TerrainTag>().unwrap(), TerrainTag::StairUp);
        assert_eq!("fast_run".parse::<GaitTag>().unwrap(), GaitTag::FastRun);
        assert!("ice".parse::<TerrainTag>().is_err());
    }

    #[test]
    fn synthesizes_on_every_terrain_tag() {
        let m = RobotMorphology::default();
        for tag in TerrainTag::ALL {
            for speed in [0.3, 0.5, 1.0] {
                let spec = GaitSpec { terrain_tag: tag, speed, duration: 4.0, ..GaitSpec::default() };
                let clip = synthesize_gait(&spec, &m).unwrap_or_else(|e| panic!("{tag} at {speed}: {e}"));
                let field = spec.terrain();
                for f in &clip.frames {
                    for p in &f.end_effector_positions {
                        let h = field.height_at(p.x, p.y);
                        assert!(p.z >= h - 1e-9, "{tag} at {speed}: toe {p:?} below ground {h}");
                    }
                }
            }
        }
    }
}
