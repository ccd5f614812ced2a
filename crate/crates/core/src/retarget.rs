//! Robot morphology, analytic leg kinematics and dog-to-robot retargeting.
//!
//! Frames: base x forward, y left, z up. Each leg is a roll hinge about the
//! base x axis located at the hip, a lateral link of `hip_offset` pointing
//! outward, a pitch hinge, the thigh, a knee pitch hinge and the shank. With
//! all joints at zero the toe sits `thigh + shank` straight below the pitch
//! hinge. Positive hip pitch swings the thigh rearward; the knee bends with
//! negative angles, so the knee points backward.

use std::fmt;
use std::path::Path;

use nalgebra::{Matrix3, Rotation3, UnitQuaternion, Vector3};
use thiserror::Error;

use crate::mocap::{GaitTag, MotionClip, MocapError, ReferencePose, TerrainTag};
use crate::{NUM_JOINTS, NUM_LEGS};

pub const DEFAULT_BODY_LENGTH: f64 = 0.6;
pub const DEFAULT_BODY_WIDTH: f64 = 0.3;
pub const DEFAULT_HIP_OFFSET: f64 = 0.08;
pub const DEFAULT_THIGH_LENGTH: f64 = 0.25;
pub const DEFAULT_SHANK_LENGTH: f64 = 0.25;
pub const DEFAULT_TORQUE_LIMIT: f64 = 20.0;
pub const DEFAULT_BASE_HEIGHT_DROP: f64 = 0.03;
pub const DEFAULT_LEG_WIDEN: f64 = 0.02;

/// Slack on joint-limit checks for round-off at the bounds.
const LIMIT_TOL: f64 = 1e-9;

/// Per-joint limits for (hip roll, hip pitch, knee).
pub const DEFAULT_LEG_LIMITS: [(f64, f64); 3] = [(-0.8, 0.8), (-1.6, 2.6), (-2.8, 0.05)];

#[derive(Debug, Error)]
pub enum RetargetError {
    #[error("degenerate keypoints: {0}")]
    Geometry(String),
    #[error("{leg} target at {distance:.4} m is outside the reachable workspace (max {max_reach:.4} m)")]
    Reach {
        leg: Leg,
        distance: f64,
        max_reach: f64,
        clamped: IkSolution,
    },
    #[error("frame {index}: {source}")]
    Frame {
        index: usize,
        #[source]
        source: Box<RetargetError>,
    },
    #[error("keypoint file line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("invalid morphology: {0}")]
    Morphology(String),
    #[error(transparent)]
    Clip(#[from] MocapError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Leg {
    FrontLeft,
    FrontRight,
    HindLeft,
    HindRight,
}

impl Leg {
    pub const ALL: [Leg; NUM_LEGS] = [Leg::FrontLeft, Leg::FrontRight, Leg::HindLeft, Leg::HindRight];

    pub fn index(self) -> usize {
        self as usize
    }

    /// +1 for left legs, −1 for right legs.
    pub fn side(self) -> f64 {
        match self {
            Leg::FrontLeft | Leg::HindLeft => 1.0,
            Leg::FrontRight | Leg::HindRight => -1.0,
        }
    }

    pub fn is_front(self) -> bool {
        matches!(self, Leg::FrontLeft | Leg::FrontRight)
    }

    /// The leg on the other side of the body at the same end.
    pub fn opposite(self) -> Leg {
        match self {
            Leg::FrontLeft => Leg::FrontRight,
            Leg::FrontRight => Leg::FrontLeft,
            Leg::HindLeft => Leg::HindRight,
            Leg::HindRight => Leg::HindLeft,
        }
    }
}

impl fmt::Display for Leg {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Leg::FrontLeft => "front-left",
            Leg::FrontRight => "front-right",
            Leg::HindLeft => "hind-left",
            Leg::HindRight => "hind-right",
        };
        f.write_str(s)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RobotMorphology {
    pub body_length: f64,
    pub body_width: f64,
    pub hip_offset: f64,
    pub thigh_length: f64,
    pub shank_length: f64,
    /// Roll hinge locations in the base frame, indexed by [`Leg::index`].
    pub hip_positions: [Vector3<f64>; NUM_LEGS],
    pub joint_limits: [(f64, f64); NUM_JOINTS],
    pub torque_limit_default: f64,
}

impl Default for RobotMorphology {
    fn default() -> Self {
        Self::from_dimensions(
            DEFAULT_BODY_LENGTH,
            DEFAULT_BODY_WIDTH,
            DEFAULT_HIP_OFFSET,
            DEFAULT_THIGH_LENGTH,
            DEFAULT_SHANK_LENGTH,
        )
    }
}

impl RobotMorphology {
    /// Hips at the corners of the body rectangle, default joint limits.
    pub fn from_dimensions(body_length: f64, body_width: f64, hip_offset: f64, thigh: f64, shank: f64) -> Self {
        let hip = |leg: Leg| {
            let x = if leg.is_front() { body_length / 2.0 } else { -body_length / 2.0 };
            Vector3::new(x, leg.side() * body_width / 2.0, 0.0)
        };
        let mut joint_limits = [(0.0, 0.0); NUM_JOINTS];
        for leg in 0..NUM_LEGS {
            joint_limits[3 * leg..3 * leg + 3].copy_from_slice(&DEFAULT_LEG_LIMITS);
        }
        Self {
            body_length,
            body_width,
            hip_offset,
            thigh_length: thigh,
            shank_length: shank,
            hip_positions: Leg::ALL.map(hip),
            joint_limits,
            torque_limit_default: DEFAULT_TORQUE_LIMIT,
        }
    }

    pub fn validate(&self) -> Result<(), RetargetError> {
        if !(self.thigh_length > 0.0 && self.shank_length > 0.0) {
            return Err(RetargetError::Morphology("link lengths must be positive".into()));
        }
        if self.hip_offset < 0.0 {
            return Err(RetargetError::Morphology("hip offset must be non-negative".into()));
        }
        for (i, (lo, hi)) in self.joint_limits.iter().enumerate() {
            if !(lo < hi) {
                return Err(RetargetError::Morphology(format!("joint {i} limits must satisfy lo < hi")));
            }
        }
        Ok(())
    }

    /// thigh + shank.
    pub fn leg_reach(&self) -> f64 {
        self.thigh_length + self.shank_length
    }

    /// Radius of the outer workspace sphere around the roll hinge.
    pub fn workspace_radius(&self) -> f64 {
        (self.leg_reach().powi(2) + self.hip_offset.powi(2)).sqrt()
    }

    /// Base-frame toe position straight below the pitch hinge at `height`.
    pub fn nominal_foot(&self, leg: Leg, height: f64) -> Vector3<f64> {
        self.hip_positions[leg.index()] + Vector3::new(0.0, leg.side() * self.hip_offset, -height)
    }

    /// Joint angles with every toe below its pitch hinge at the given base height.
    pub fn standing_joint_angles(&self, height: f64) -> Result<[f64; NUM_JOINTS], RetargetError> {
        let mut q = [0.0; NUM_JOINTS];
        for leg in Leg::ALL {
            let sol = leg_ik(&self.nominal_foot(leg, height), leg, self)?;
            q[3 * leg.index()..3 * leg.index() + 3].copy_from_slice(&sol.angles);
        }
        Ok(q)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct IkSolution {
    /// (hip roll, hip pitch, knee)
    pub angles: [f64; 3],
    pub within_limits: bool,
}

fn rot_x(a: f64) -> Matrix3<f64> {
    *Rotation3::from_axis_angle(&Vector3::x_axis(), a).matrix()
}

fn rot_y(a: f64) -> Matrix3<f64> {
    *Rotation3::from_axis_angle(&Vector3::y_axis(), a).matrix()
}

/// Base-frame toe position of one leg.
pub fn leg_fk(angles: &[f64; 3], leg: Leg, morph: &RobotMorphology) -> Vector3<f64> {
    let [roll, pitch, knee] = *angles;
    let shank = Vector3::new(0.0, 0.0, -morph.shank_length);
    let thigh = Vector3::new(0.0, 0.0, -morph.thigh_length);
    let lateral = Vector3::new(0.0, leg.side() * morph.hip_offset, 0.0);
    let sagittal = rot_y(pitch) * (thigh + rot_y(knee) * shank);
    morph.hip_positions[leg.index()] + rot_x(roll) * (lateral + sagittal)
}

/// Base-frame knee position of one leg.
pub fn leg_knee(angles: &[f64; 3], leg: Leg, morph: &RobotMorphology) -> Vector3<f64> {
    let [roll, pitch, _] = *angles;
    let thigh = Vector3::new(0.0, 0.0, -morph.thigh_length);
    let lateral = Vector3::new(0.0, leg.side() * morph.hip_offset, 0.0);
    morph.hip_positions[leg.index()] + rot_x(roll) * (lateral + rot_y(pitch) * thigh)
}

/// ∂(toe position)/∂(roll, pitch, knee) in the base frame; columns per joint.
pub fn leg_jacobian(angles: &[f64; 3], leg: Leg, morph: &RobotMorphology) -> Matrix3<f64> {
    let [roll, pitch, knee] = *angles;
    let shank = Vector3::new(0.0, 0.0, -morph.shank_length);
    let thigh = Vector3::new(0.0, 0.0, -morph.thigh_length);
    let lateral = Vector3::new(0.0, leg.side() * morph.hip_offset, 0.0);
    let rx = rot_x(roll);
    let ry = rot_y(pitch);
    let shank_rel = rot_y(knee) * shank;
    let sagittal = ry * (thigh + shank_rel);
    let ex = Vector3::x();
    let ey = Vector3::y();
    let d_roll = ex.cross(&(rx * (lateral + sagittal)));
    let d_pitch = rx * ey.cross(&sagittal);
    let d_knee = rx * (ry * ey.cross(&shank_rel));
    Matrix3::from_columns(&[d_roll, d_pitch, d_knee])
}

fn within_limits(angles: &[f64; 3], leg: Leg, morph: &RobotMorphology) -> bool {
    angles.iter().enumerate().all(|(j, a)| {
        let (lo, hi) = morph.joint_limits[3 * leg.index() + j];
        *a >= lo - LIMIT_TOL && *a <= hi + LIMIT_TOL
    })
}

fn wrap_angle(a: f64) -> f64 {
    let two_pi = std::f64::consts::TAU;
    let mut r = a % two_pi;
    if r > std::f64::consts::PI {
        r -= two_pi;
    } else if r <= -std::f64::consts::PI {
        r += two_pi;
    }
    r
}

/// Exact solve for a reachable hip-relative target. The toe sits below the
/// hip in the leg plane when `below`, above it otherwise.
fn solve_branch(rel: &Vector3<f64>, leg: Leg, morph: &RobotMorphology, below: bool) -> [f64; 3] {
    let d = morph.hip_offset;
    let (l1, l2) = (morph.thigh_length, morph.shank_length);
    let rho_sq = rel.y * rel.y + rel.z * rel.z;
    let planar_abs = (rho_sq - d * d).max(0.0).sqrt();
    let planar_z = if below { -planar_abs } else { planar_abs };
    let roll = wrap_angle(rel.z.atan2(rel.y) - planar_z.atan2(leg.side() * d));
    let dist_sq = rel.x * rel.x + planar_z * planar_z;
    let cos_knee = ((dist_sq - l1 * l1 - l2 * l2) / (2.0 * l1 * l2)).clamp(-1.0, 1.0);
    let knee = -cos_knee.acos();
    let a = l1 + l2 * knee.cos();
    let b = l2 * knee.sin();
    let pitch = (-rel.x).atan2(-planar_z) - b.atan2(a);
    [roll, wrap_angle(pitch), knee]
}

fn solve_reachable(rel: &Vector3<f64>, leg: Leg, morph: &RobotMorphology) -> [f64; 3] {
    let below = solve_branch(rel, leg, morph, true);
    if within_limits(&below, leg, morph) {
        return below;
    }
    let above = solve_branch(rel, leg, morph, false);
    if within_limits(&above, leg, morph) {
        above
    } else {
        below
    }
}

/// Analytic inverse kinematics for a base-frame toe target.
///
/// Unreachable targets return [`RetargetError::Reach`] carrying the solution
/// for the nearest point of the workspace.
pub fn leg_ik(target: &Vector3<f64>, leg: Leg, morph: &RobotMorphology) -> Result<IkSolution, RetargetError> {
    let rel = target - morph.hip_positions[leg.index()];
    let d = morph.hip_offset;
    let (l1, l2) = (morph.thigh_length, morph.shank_length);
    let outer = morph.workspace_radius();
    let inner = (l1 - l2).abs();
    let tol = 1e-12;

    let mut clamped = rel;
    let norm = rel.norm();
    if norm > outer * (1.0 + tol) {
        clamped = rel * (outer / norm);
    }
    let rho = (clamped.y * clamped.y + clamped.z * clamped.z).sqrt();
    if rho < d * (1.0 - tol) {
        // inside the cylinder swept by the lateral link
        let (y, z) = if rho > 0.0 { (clamped.y / rho, clamped.z / rho) } else { (leg.side(), 0.0) };
        clamped.y = y * d;
        clamped.z = z * d;
    }
    let planar_sq = clamped.x * clamped.x + (clamped.y * clamped.y + clamped.z * clamped.z - d * d).max(0.0);
    if planar_sq.sqrt() < inner * (1.0 - tol) {
        let scale = if planar_sq > 0.0 { inner / planar_sq.sqrt() } else { 1.0 };
        clamped.x *= scale;
    }

    let angles = solve_reachable(&clamped, leg, morph);
    let sol = IkSolution { angles, within_limits: within_limits(&angles, leg, morph) };
    if (clamped - rel).norm() > 0.0 {
        return Err(RetargetError::Reach { leg, distance: norm, max_reach: outer, clamped: sol });
    }
    Ok(sol)
}

/// World-frame toe positions for a base pose and 12 joint angles.
pub fn forward_kinematics(
    base_position: &Vector3<f64>,
    base_orientation: &UnitQuaternion<f64>,
    joint_angles: &[f64; NUM_JOINTS],
    morph: &RobotMorphology,
) -> [Vector3<f64>; NUM_LEGS] {
    Leg::ALL.map(|leg| {
        let i = leg.index();
        let angles = [joint_angles[3 * i], joint_angles[3 * i + 1], joint_angles[3 * i + 2]];
        base_position + base_orientation * leg_fk(&angles, leg, morph)
    })
}

/// World-frame keypoints of one dog frame.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct KeypointFrame {
    pub shoulder_l: Vector3<f64>,
    pub shoulder_r: Vector3<f64>,
    pub shoulder_blade: Vector3<f64>,
    pub haunch_l: Vector3<f64>,
    pub haunch_r: Vector3<f64>,
    pub foretoe_l: Vector3<f64>,
    pub foretoe_r: Vector3<f64>,
    pub hindtoe_l: Vector3<f64>,
    pub hindtoe_r: Vector3<f64>,
}

impl KeypointFrame {
    pub const COUNT: usize = 9;

    pub fn points(&self) -> [Vector3<f64>; 9] {
        [
            self.shoulder_l,
            self.shoulder_r,
            self.shoulder_blade,
            self.haunch_l,
            self.haunch_r,
            self.foretoe_l,
            self.foretoe_r,
            self.hindtoe_l,
            self.hindtoe_r,
        ]
    }

    pub fn from_points(p: [Vector3<f64>; 9]) -> Self {
        Self {
            shoulder_l: p[0],
            shoulder_r: p[1],
            shoulder_blade: p[2],
            haunch_l: p[3],
            haunch_r: p[4],
            foretoe_l: p[5],
            foretoe_r: p[6],
            hindtoe_l: p[7],
            hindtoe_r: p[8],
        }
    }

    /// Applies `p ↦ rotation · p + translation` to every keypoint.
    pub fn transformed(&self, rotation: &UnitQuaternion<f64>, translation: &Vector3<f64>) -> Self {
        Self::from_points(self.points().map(|p| rotation * p + translation))
    }

    /// Toe target for a robot leg.
    pub fn toe(&self, leg: Leg) -> Vector3<f64> {
        match leg {
            Leg::FrontLeft => self.foretoe_l,
            Leg::FrontRight => self.foretoe_r,
            Leg::HindLeft => self.hindtoe_l,
            Leg::HindRight => self.hindtoe_r,
        }
    }
}

/// Base position and orientation from shoulder, shoulder-blade and haunch keypoints.
pub fn base_from_keypoints(frame: &KeypointFrame) -> Result<(Vector3<f64>, UnitQuaternion<f64>), RetargetError> {
    if frame.points().iter().any(|p| !(p.x.is_finite() && p.y.is_finite() && p.z.is_finite())) {
        return Err(RetargetError::Geometry("non-finite keypoint".into()));
    }
    let shoulder_mid = (frame.shoulder_l + frame.shoulder_r) / 2.0;
    let haunch_mid = (frame.haunch_l + frame.haunch_r) / 2.0;
    let spine = shoulder_mid - haunch_mid;
    let spine_len = spine.norm();
    if spine_len < 1e-9 {
        return Err(RetargetError::Geometry("shoulder midpoint coincides with haunch midpoint".into()));
    }
    let forward = spine / spine_len;
    let across = frame.shoulder_l - frame.shoulder_r;
    let mut lateral = across - forward * forward.dot(&across);
    if lateral.norm() < 1e-9 {
        // shoulders collinear with the spine: fall back to the dorsal shoulder-blade hint
        let dorsal = frame.shoulder_blade - shoulder_mid;
        let up = dorsal - forward * forward.dot(&dorsal);
        if up.norm() < 1e-9 {
            return Err(RetargetError::Geometry("cannot resolve body roll from keypoints".into()));
        }
        lateral = up.normalize().cross(&forward);
    }
    let lateral = lateral.normalize();
    let mut up = forward.cross(&lateral);
    let dorsal = frame.shoulder_blade - shoulder_mid;
    if dorsal.norm() > 1e-9 && up.dot(&dorsal) < 0.0 && across.norm() < 1e-9 {
        up = -up;
    }
    let rot = Rotation3::from_basis_unchecked(&[forward, lateral, up]);
    let q = UnitQuaternion::from_rotation_matrix(&rot);
    Ok(((shoulder_mid + haunch_mid) / 2.0, q))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RetargetAdjust {
    /// Lowers the robot base along world z.
    pub base_height_drop: f64,
    /// Moves every toe target outward along the base lateral axis.
    pub leg_widen: f64,
}

impl Default for RetargetAdjust {
    fn default() -> Self {
        Self { base_height_drop: DEFAULT_BASE_HEIGHT_DROP, leg_widen: DEFAULT_LEG_WIDEN }
    }
}

/// A dog keypoint sequence.
#[derive(Clone, Debug)]
pub struct KeypointClip {
    pub name: String,
    pub fps: u32,
    pub terrain_tag: TerrainTag,
    pub gait_tag: GaitTag,
    pub frames: Vec<KeypointFrame>,
}

impl KeypointClip {
    /// Parses `fps=<int>` (optionally `terrain=` / `gait=`) then one line per
    /// frame of 27 floats in [`KeypointFrame`] field order.
    pub fn parse(name: &str, text: &str) -> Result<Self, RetargetError> {
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let (_, header) = lines.next().ok_or(RetargetError::Parse { line: 1, message: "missing header".into() })?;
        let mut fps = None;
        let mut terrain_tag = TerrainTag::Plane;
        let mut gait_tag = GaitTag::Walk;
        for token in header.split_whitespace() {
            let (key, value) = token
                .split_once('=')
                .ok_or(RetargetError::Parse { line: 1, message: format!("bad header token `{token}`") })?;
            let bad = |m: String| RetargetError::Parse { line: 1, message: m };
            match key {
                "fps" => fps = Some(value.parse::<u32>().map_err(|e| bad(format!("fps: {e}")))?),
                "terrain" => terrain_tag = value.parse().map_err(|e: MocapError| bad(e.to_string()))?,
                "gait" => gait_tag = value.parse().map_err(|e: MocapError| bad(e.to_string()))?,
                other => return Err(bad(format!("unknown header key `{other}`"))),
            }
        }
        let fps = fps.filter(|f| *f > 0).ok_or(RetargetError::Parse { line: 1, message: "fps must be a positive integer".into() })?;
        let mut frames = Vec::new();
        for (idx, line) in lines {
            let values: Vec<f64> = line
                .split_whitespace()
                .map(|t| t.parse::<f64>())
                .collect::<Result<_, _>>()
                .map_err(|e| RetargetError::Parse { line: idx + 1, message: e.to_string() })?;
            if values.len() != 27 {
                return Err(RetargetError::Parse {
                    line: idx + 1,
                    message: format!("expected 27 values, found {}", values.len()),
                });
            }
            let mut pts = [Vector3::zeros(); 9];
            for (k, p) in pts.iter_mut().enumerate() {
                *p = Vector3::new(values[3 * k], values[3 * k + 1], values[3 * k + 2]);
            }
            frames.push(KeypointFrame::from_points(pts));
        }
        if frames.is_empty() {
            return Err(RetargetError::Parse { line: 2, message: "no frames".into() });
        }
        Ok(Self { name: name.to_string(), fps, terrain_tag, gait_tag, frames })
    }

    pub fn load(path: &Path) -> Result<Self, RetargetError> {
        let text = std::fs::read_to_string(path)?;
        let name = path.file_stem().and_then(|s| s.to_str()).unwrap_or("keypoints");
        Self::parse(name, &text)
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("fps={} terrain={} gait={}\n", self.fps, self.terrain_tag, self.gait_tag);
        for f in &self.frames {
            let row: Vec<String> = f.points().iter().flat_map(|p| [p.x, p.y, p.z]).map(|v| v.to_string()).collect();
            out.push_str(&row.join(" "));
            out.push('\n');
        }
        out
    }
}

/// Base pose plus joint angles for one retargeted frame.
pub fn retarget_frame(
    frame: &KeypointFrame,
    morph: &RobotMorphology,
    adjust: &RetargetAdjust,
) -> Result<(Vector3<f64>, UnitQuaternion<f64>, [f64; NUM_JOINTS]), RetargetError> {
    let (mut position, orientation) = base_from_keypoints(frame)?;
    position.z -= adjust.base_height_drop;
    let mut joints = [0.0; NUM_JOINTS];
    for leg in Leg::ALL {
        let mut target = orientation.inverse() * (frame.toe(leg) - position);
        target.y += leg.side() * adjust.leg_widen;
        let sol = leg_ik(&target, leg, morph)?;
        joints[3 * leg.index()..3 * leg.index() + 3].copy_from_slice(&sol.angles);
    }
    Ok((position, orientation, joints))
}

/// Retargets a keypoint sequence onto the robot.
pub fn retarget_clip(
    clip: &KeypointClip,
    morph: &RobotMorphology,
    adjust: &RetargetAdjust,
) -> Result<MotionClip, RetargetError> {
    morph.validate()?;
    let mut positions = Vec::with_capacity(clip.frames.len());
    let mut orientations = Vec::with_capacity(clip.frames.len());
    let mut joints = Vec::with_capacity(clip.frames.len());
    for (index, frame) in clip.frames.iter().enumerate() {
        let (p, q, j) = retarget_frame(frame, morph, adjust)
            .map_err(|e| RetargetError::Frame { index, source: Box::new(e) })?;
        positions.push(p);
        orientations.push(q);
        joints.push(j);
    }
    let frames = frames_from_kinematics(clip.fps, &positions, &orientations, &joints, None, None, morph);
    let out = MotionClip {
        name: clip.name.clone(),
        fps: clip.fps,
        frames,
        terrain_tag: clip.terrain_tag,
        gait_tag: clip.gait_tag,
    };
    out.validate()?;
    Ok(out)
}

/// Central finite difference of a sampled series (one-sided at the ends).
pub(crate) fn finite_difference<T, F>(values: &[T], dt: f64, diff: F) -> Vec<T>
where
    T: Copy + Default,
    F: Fn(&T, &T, f64) -> T,
{
    let n = values.len();
    if n < 2 {
        return vec![T::default(); n];
    }
    (0..n)
        .map(|i| {
            let (a, b) = if i == 0 {
                (0, 1)
            } else if i == n - 1 {
                (n - 2, n - 1)
            } else {
                (i - 1, i + 1)
            };
            diff(&values[a], &values[b], (b - a) as f64 * dt)
        })
        .collect()
}

/// Assembles reference frames, differencing every velocity that is not given
/// and computing end effectors by forward kinematics when absent.
pub fn frames_from_kinematics(
    fps: u32,
    positions: &[Vector3<f64>],
    orientations: &[UnitQuaternion<f64>],
    joints: &[[f64; NUM_JOINTS]],
    joint_velocities: Option<&[[f64; NUM_JOINTS]]>,
    end_effectors: Option<&[[Vector3<f64>; NUM_LEGS]]>,
    morph: &RobotMorphology,
) -> Vec<ReferencePose> {
    let dt = 1.0 / fps as f64;
    let lin = finite_difference(positions, dt, |a, b, h| (b - a) / h);
    let ang: Vec<Vector3<f64>> = {
        let n = orientations.len();
        (0..n)
            .map(|i| {
                if n < 2 {
                    return Vector3::zeros();
                }
                let (a, b) = if i == 0 { (0, 1) } else if i == n - 1 { (n - 2, n - 1) } else { (i - 1, i + 1) };
                crate::math::angular_velocity_between(&orientations[a], &orientations[b], (b - a) as f64 * dt)
            })
            .collect()
    };
    let jv: Vec<[f64; NUM_JOINTS]> = match joint_velocities {
        Some(v) => v.to_vec(),
        None => finite_difference(joints, dt, |a, b, h| {
            let mut out = [0.0; NUM_JOINTS];
            for k in 0..NUM_JOINTS {
                out[k] = (b[k] - a[k]) / h;
            }
            out
        }),
    };
    (0..positions.len())
        .map(|i| ReferencePose {
            base_position: positions[i],
            base_orientation: orientations[i],
            base_linear_velocity: lin[i],
            base_angular_velocity: ang[i],
            joint_angles: joints[i],
            joint_velocities: jv[i],
            end_effector_positions: match end_effectors {
                Some(ee) => ee[i],
                None => forward_kinematics(&positions[i], &orientations[i], &joints[i], morph),
            },
        })
        .collect()
}
