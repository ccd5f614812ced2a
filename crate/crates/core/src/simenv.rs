//! Simplified centroidal quadruped simulator.
//!
//! The base is one rigid body pushed around by penalty contact forces at the
//! toes. Legs are massless kinematic chains whose joints carry a small
//! rotor inertia and integrate PD torque plus the joint-space reaction of the
//! toe contact force. Stance toes hold a tangential anchor spring until the
//! friction cone is exceeded, after which they slide.

use std::collections::{BTreeMap, VecDeque};
use std::io::{BufRead, Write};

use nalgebra::{Matrix3, UnitQuaternion, Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::math::{arr3, quat_wxyz, roll_pitch_yaw};
use crate::mocap::ReferencePose;
use crate::retarget::{leg_fk, leg_jacobian, leg_knee, Leg, RobotMorphology};
use crate::terrain::{sample_patch, ExteroPatch, TerrainField};
use crate::{EXTERO_DIM, GRAVITY, NUM_JOINTS, NUM_LEGS, POLICY_DT, PROPRIO_DIM, PROPRIO_FRAME_DIM, PROPRIO_HISTORY, SIM_DT, SUBSTEPS};

pub const DEFAULT_KP: f64 = 55.0;
pub const DEFAULT_KD: f64 = 0.8;
pub const DEFAULT_MAX_EPISODE_STEPS: usize = 360;
pub const ROLL_LIMIT: f64 = std::f64::consts::FRAC_PI_4;
pub const PITCH_LIMIT: f64 = std::f64::consts::FRAC_PI_3;
/// Toe-to-ground gap counted as contact.
pub const CONTACT_TOLERANCE: f64 = 1e-3;
/// Base collision box (length, width, height), centred on the base origin.
pub const BODY_BOX: [f64; 3] = [0.6, 0.3, 0.1];

#[derive(Debug, Error)]
pub enum SimError {
    #[error("initial pose collides with the terrain: {0}")]
    Reset(String),
    #[error("environment has terminated ({0:?}); call reset first")]
    Terminated(TerminationReason),
    #[error("environment has not been reset")]
    NotReset,
    #[error("expected {expected} values, got {got}")]
    Arity { expected: usize, got: usize },
    #[error("non-finite action component {0}")]
    NonFiniteAction(usize),
    #[error("trajectory dump line {line}: {message}")]
    Dump { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TerminationReason {
    None,
    RollLimit,
    PitchLimit,
    BodyContact,
    TimeLimit,
}

impl TerminationReason {
    pub fn is_done(self) -> bool {
        self != TerminationReason::None
    }

    /// Ended through a failure rather than running out of time.
    pub fn is_failure(self) -> bool {
        matches!(self, TerminationReason::RollLimit | TerminationReason::PitchLimit | TerminationReason::BodyContact)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RobotState {
    pub base_position: Vector3<f64>,
    pub base_orientation: UnitQuaternion<f64>,
    /// World frame.
    pub base_linear_velocity: Vector3<f64>,
    /// World frame.
    pub base_angular_velocity: Vector3<f64>,
    pub joint_angles: [f64; NUM_JOINTS],
    pub joint_velocities: [f64; NUM_JOINTS],
    pub toe_contacts: [bool; NUM_LEGS],
    pub toe_positions: [Vector3<f64>; NUM_LEGS],
}

fn leg_angles(q: &[f64; NUM_JOINTS], leg: usize) -> [f64; 3] {
    [q[3 * leg], q[3 * leg + 1], q[3 * leg + 2]]
}

impl RobotState {
    /// State resting on the reference pose; toe positions by forward kinematics.
    pub fn from_reference(pose: &ReferencePose, morph: &RobotMorphology) -> Self {
        let mut s = Self {
            base_position: pose.base_position,
            base_orientation: pose.base_orientation,
            base_linear_velocity: pose.base_linear_velocity,
            base_angular_velocity: pose.base_angular_velocity,
            joint_angles: pose.joint_angles,
            joint_velocities: pose.joint_velocities,
            toe_contacts: [false; NUM_LEGS],
            toe_positions: [Vector3::zeros(); NUM_LEGS],
        };
        s.update_toes(morph);
        s
    }

    /// Straight legs with each toe directly below its roll hinge, toes on the
    /// ground at `(x, y)`. Contact forces then pass through every joint axis,
    /// so the pose needs no holding torque.
    pub fn standing(morph: &RobotMorphology, field: &TerrainField, x: f64, y: f64) -> Self {
        let reach = morph.leg_reach();
        let mut q = [0.0; NUM_JOINTS];
        for leg in Leg::ALL {
            q[3 * leg.index()] = (-leg.side() * morph.hip_offset / reach).atan();
        }
        let height = (reach * reach + morph.hip_offset * morph.hip_offset).sqrt();
        let ground = Leg::ALL
            .iter()
            .map(|l| {
                let h = morph.hip_positions[l.index()];
                field.height_at(x + h.x, y + h.y)
            })
            .fold(f64::NEG_INFINITY, f64::max);
        let mut s = Self {
            base_position: Vector3::new(x, y, ground + height),
            base_orientation: UnitQuaternion::identity(),
            base_linear_velocity: Vector3::zeros(),
            base_angular_velocity: Vector3::zeros(),
            joint_angles: q,
            joint_velocities: [0.0; NUM_JOINTS],
            toe_contacts: [false; NUM_LEGS],
            toe_positions: [Vector3::zeros(); NUM_LEGS],
        };
        s.update_toes(morph);
        s
    }

    pub fn update_toes(&mut self, morph: &RobotMorphology) {
        for leg in Leg::ALL {
            let i = leg.index();
            self.toe_positions[i] =
                self.base_position + self.base_orientation * leg_fk(&leg_angles(&self.joint_angles, i), leg, morph);
        }
    }

    /// Heading angle of the base.
    pub fn yaw(&self) -> f64 {
        crate::math::heading(&self.base_orientation)
    }

    /// Base box corners and knee points in world coordinates.
    pub fn body_points(&self, morph: &RobotMorphology) -> [Vector3<f64>; 12] {
        let [l, w, h] = BODY_BOX;
        let mut pts = [Vector3::zeros(); 12];
        let mut k = 0;
        for sx in [-0.5, 0.5] {
            for sy in [-0.5, 0.5] {
                for sz in [-0.5, 0.5] {
                    pts[k] = self.base_position + self.base_orientation * Vector3::new(sx * l, sy * w, sz * h);
                    k += 1;
                }
            }
        }
        for leg in Leg::ALL {
            let knee = leg_knee(&leg_angles(&self.joint_angles, leg.index()), leg, morph);
            pts[8 + leg.index()] = self.base_position + self.base_orientation * knee;
        }
        pts
    }

    /// True when any non-toe sample point is at or below the terrain.
    pub fn body_contact(&self, morph: &RobotMorphology, field: &TerrainField) -> bool {
        self.body_points(morph).iter().any(|p| p.z <= field.height_at(p.x, p.y))
    }
}

/// First matching reason in the order roll, pitch, body contact, time limit.
pub fn check_termination(
    state: &RobotState,
    field: &TerrainField,
    morph: &RobotMorphology,
    steps: usize,
    max_steps: usize,
) -> TerminationReason {
    let (roll, pitch, _) = roll_pitch_yaw(&state.base_orientation);
    if roll.abs() > ROLL_LIMIT {
        TerminationReason::RollLimit
    } else if pitch.abs() > PITCH_LIMIT {
        TerminationReason::PitchLimit
    } else if state.body_contact(morph, field) {
        TerminationReason::BodyContact
    } else if steps >= max_steps {
        TerminationReason::TimeLimit
    } else {
        TerminationReason::None
    }
}

/// `clamp(kp·(q_target − q) − kd·q_dot, ±limit)`.
pub fn pd_torque(q_target: f64, q: f64, q_dot: f64, kp: f64, kd: f64, limit: f64) -> f64 {
    (kp * (q_target - q) - kd * q_dot).clamp(-limit, limit)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainParams {
    pub friction: f64,
    pub torque_limit: f64,
    pub base_mass_multiplier: f64,
    pub perception_noise_std: f64,
    pub com_offset: [f64; 3],
}

impl Default for DomainParams {
    fn default() -> Self {
        Self {
            friction: 0.85,
            torque_limit: crate::retarget::DEFAULT_TORQUE_LIMIT,
            base_mass_multiplier: 1.0,
            perception_noise_std: 0.0,
            com_offset: [0.0; 3],
        }
    }
}

/// Sampling ranges for [`DomainParams`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DomainRanges {
    pub friction: (f64, f64),
    pub torque_limit: (f64, f64),
    pub base_mass_multiplier: (f64, f64),
    pub perception_noise_std: f64,
    pub com_offset: f64,
}

impl Default for DomainRanges {
    fn default() -> Self {
        Self {
            friction: (0.5, 1.2),
            torque_limit: (16.0, 23.0),
            base_mass_multiplier: (0.7, 1.3),
            perception_noise_std: 0.01,
            com_offset: 0.01,
        }
    }
}

impl DomainRanges {
    /// Ranges that always produce `p`.
    pub fn fixed(p: DomainParams) -> Self {
        Self {
            friction: (p.friction, p.friction),
            torque_limit: (p.torque_limit, p.torque_limit),
            base_mass_multiplier: (p.base_mass_multiplier, p.base_mass_multiplier),
            perception_noise_std: p.perception_noise_std,
            com_offset: 0.0,
        }
    }

    pub fn sample(&self, seed: u64) -> DomainParams {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut u = |(lo, hi): (f64, f64)| if hi > lo { rng.random_range(lo..hi) } else { lo };
        let friction = u(self.friction);
        let torque_limit = u(self.torque_limit);
        let base_mass_multiplier = u(self.base_mass_multiplier);
        let c = self.com_offset;
        let com_offset = [u((-c, c)), u((-c, c)), u((-c, c))];
        DomainParams { friction, torque_limit, base_mass_multiplier, perception_noise_std: self.perception_noise_std, com_offset }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimConfig {
    pub kp: f64,
    pub kd: f64,
    pub max_episode_steps: usize,
    /// Gravity magnitude acting on the base; 0 disables gravity.
    pub gravity: f64,
    pub base_mass: f64,
    pub base_inertia: [f64; 3],
    pub contact_stiffness: f64,
    pub contact_damping: f64,
    pub tangential_stiffness: f64,
    pub tangential_damping: f64,
    /// Penetration beyond this depth adds no extra normal force.
    pub max_penetration: f64,
    pub joint_inertia: f64,
    pub domain: DomainRanges,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            kp: DEFAULT_KP,
            kd: DEFAULT_KD,
            max_episode_steps: DEFAULT_MAX_EPISODE_STEPS,
            gravity: GRAVITY,
            base_mass: 12.0,
            base_inertia: [0.15, 0.45, 0.5],
            contact_stiffness: 2e4,
            contact_damping: 300.0,
            tangential_stiffness: 1e4,
            tangential_damping: 200.0,
            max_penetration: 0.03,
            joint_inertia: 0.02,
            domain: DomainRanges::default(),
        }
    }
}

/// One proprioceptive frame before stacking.
#[derive(Clone, Debug, PartialEq)]
pub struct ProprioFrame {
    pub base_linear_velocity: Vector3<f64>,
    pub base_angular_velocity: Vector3<f64>,
    pub joint_angles: [f64; NUM_JOINTS],
    pub joint_velocities: [f64; NUM_JOINTS],
    pub last_action: [f64; NUM_JOINTS],
    pub orientation: UnitQuaternion<f64>,
}

impl ProprioFrame {
    /// Velocities are rotated into the base frame.
    pub fn from_state(state: &RobotState, last_action: &[f64; NUM_JOINTS]) -> Self {
        let inv = state.base_orientation.inverse();
        Self {
            base_linear_velocity: inv * state.base_linear_velocity,
            base_angular_velocity: inv * state.base_angular_velocity,
            joint_angles: state.joint_angles,
            joint_velocities: state.joint_velocities,
            last_action: *last_action,
            orientation: state.base_orientation,
        }
    }

    fn append(&self, gravity_world: &Vector3<f64>, out: &mut Vec<f64>) {
        out.extend(self.base_linear_velocity.iter());
        out.extend(self.base_angular_velocity.iter());
        out.extend(self.joint_angles);
        out.extend(self.joint_velocities);
        out.extend(self.last_action);
        out.extend((self.orientation.inverse() * gravity_world).iter());
    }
}

/// Stacks three frames, oldest first, into the 135-value proprioceptive vector.
pub fn assemble_proprio(history: &[ProprioFrame], gravity_world: &Vector3<f64>) -> Result<Vec<f64>, SimError> {
    if history.len() != PROPRIO_HISTORY {
        return Err(SimError::Arity { expected: PROPRIO_HISTORY, got: history.len() });
    }
    let mut out = Vec::with_capacity(PROPRIO_DIM);
    for f in history {
        f.append(gravity_world, &mut out);
    }
    debug_assert_eq!(out.len(), PROPRIO_FRAME_DIM * PROPRIO_HISTORY);
    Ok(out)
}

/// What the policy sees.
#[derive(Clone, Debug, PartialEq)]
pub struct Observation {
    pub proprio: Vec<f64>,
    pub extero: ExteroPatch,
}

impl Observation {
    pub fn new(proprio: Vec<f64>, extero: Vec<f64>) -> Result<Self, SimError> {
        if proprio.len() != PROPRIO_DIM {
            return Err(SimError::Arity { expected: PROPRIO_DIM, got: proprio.len() });
        }
        let got = extero.len();
        let extero = ExteroPatch::new(extero).map_err(|_| SimError::Arity { expected: EXTERO_DIM, got })?;
        Ok(Self { proprio, extero })
    }
}

/// Everything reward functions need after a step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepInfo {
    pub state: RobotState,
    /// Horizontal distance of each toe to the nearest stair edge.
    pub edge_distances: [f64; NUM_LEGS],
    /// Joint torques applied during the final substep.
    pub applied_torques: [f64; NUM_JOINTS],
    /// Joints whose PD torque hit the limit in any substep.
    pub torque_saturated: [bool; NUM_JOINTS],
    pub body_contact: bool,
    pub time: f64,
}

#[derive(Clone, Debug)]
pub struct StepOutput {
    pub observation: Observation,
    pub info: StepInfo,
    pub termination: TerminationReason,
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct ContactPoint {
    force: Vector3<f64>,
    stiffness: Matrix3<f64>,
    damping: Matrix3<f64>,
}

pub struct SimEnv {
    pub config: SimConfig,
    pub morph: RobotMorphology,
    field: TerrainField,
    domain: DomainParams,
    state: RobotState,
    anchors: [Option<Vector2<f64>>; NUM_LEGS],
    history: VecDeque<ProprioFrame>,
    last_action: [f64; NUM_JOINTS],
    steps: usize,
    substeps: u64,
    termination: TerminationReason,
    rng: ChaCha8Rng,
    ready: bool,
}

impl SimEnv {
    pub fn new(config: SimConfig, morph: RobotMorphology) -> Self {
        let field = TerrainField::plane();
        let state = RobotState::standing(&morph, &field, 0.0, 0.0);
        Self {
            config,
            morph,
            field,
            domain: DomainParams::default(),
            state,
            anchors: [None; NUM_LEGS],
            history: VecDeque::with_capacity(PROPRIO_HISTORY),
            last_action: [0.0; NUM_JOINTS],
            steps: 0,
            substeps: 0,
            termination: TerminationReason::None,
            rng: ChaCha8Rng::seed_from_u64(0),
            ready: false,
        }
    }

    pub fn state(&self) -> &RobotState {
        &self.state
    }

    pub fn terrain(&self) -> &TerrainField {
        &self.field
    }

    pub fn domain(&self) -> &DomainParams {
        &self.domain
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn substeps(&self) -> u64 {
        self.substeps
    }

    /// Simulated seconds since reset.
    pub fn time(&self) -> f64 {
        self.substeps as f64 * SIM_DT
    }

    pub fn termination(&self) -> TerminationReason {
        self.termination
    }

    pub fn last_action(&self) -> &[f64; NUM_JOINTS] {
        &self.last_action
    }

    /// Starts an episode on `terrain` from `init` with freshly sampled domain parameters.
    pub fn reset(&mut self, terrain: TerrainField, domain_seed: u64, init: RobotState) -> Result<Observation, SimError> {
        let domain = self.config.domain.sample(domain_seed);
        self.reset_with_domain(terrain, domain, domain_seed, init)
    }

    pub fn reset_with_domain(
        &mut self,
        terrain: TerrainField,
        domain: DomainParams,
        noise_seed: u64,
        mut init: RobotState,
    ) -> Result<Observation, SimError> {
        init.update_toes(&self.morph);
        if let Some(p) = init.body_points(&self.morph).iter().find(|p| p.z <= terrain.height_at(p.x, p.y)) {
            return Err(SimError::Reset(format!(
                "body point ({:.3}, {:.3}, {:.3}) is not above the terrain",
                p.x, p.y, p.z
            )));
        }
        self.field = terrain;
        self.domain = domain;
        self.rng = ChaCha8Rng::seed_from_u64(noise_seed ^ 0x5EED_0F_0B5E);
        self.state = init;
        self.anchors = [None; NUM_LEGS];
        for i in 0..NUM_LEGS {
            let p = self.state.toe_positions[i];
            let h = self.field.height_at(p.x, p.y);
            self.state.toe_contacts[i] = p.z - h <= CONTACT_TOLERANCE;
        }
        self.last_action = [0.0; NUM_JOINTS];
        self.steps = 0;
        self.substeps = 0;
        self.termination = TerminationReason::None;
        self.history.clear();
        let frame = ProprioFrame::from_state(&self.state, &self.last_action);
        for _ in 0..PROPRIO_HISTORY {
            self.history.push_back(frame.clone());
        }
        self.ready = true;
        Ok(self.observe())
    }

    /// Current observation; the height patch uses the perception noise stream.
    pub fn observe(&mut self) -> Observation {
        let frames: Vec<ProprioFrame> = self.history.iter().cloned().collect();
        let proprio = assemble_proprio(&frames, &Vector3::new(0.0, 0.0, -GRAVITY)).expect("history holds three frames");
        let extero = sample_patch(
            &self.field,
            &self.state.base_position,
            self.state.yaw(),
            self.domain.perception_noise_std,
            &mut self.rng,
        );
        Observation { proprio, extero }
    }

    /// Applies target joint angles for one policy period.
    pub fn step(&mut self, action: &[f64; NUM_JOINTS]) -> Result<StepOutput, SimError> {
        if !self.ready {
            return Err(SimError::NotReset);
        }
        if self.termination.is_done() {
            return Err(SimError::Terminated(self.termination));
        }
        if let Some(i) = action.iter().position(|a| !a.is_finite()) {
            return Err(SimError::NonFiniteAction(i));
        }
        let mut saturated = [false; NUM_JOINTS];
        let mut applied = [0.0; NUM_JOINTS];
        let mut body_contact = false;
        for _ in 0..SUBSTEPS {
            applied = self.substep(action, &mut saturated);
            self.substeps += 1;
            body_contact |= self.state.body_contact(&self.morph, &self.field);
        }
        self.steps += 1;
        self.last_action = *action;
        self.history.pop_front();
        self.history.push_back(ProprioFrame::from_state(&self.state, &self.last_action));

        let mut termination = check_termination(&self.state, &self.field, &self.morph, self.steps, self.config.max_episode_steps);
        if body_contact && !matches!(termination, TerminationReason::RollLimit | TerminationReason::PitchLimit) {
            termination = TerminationReason::BodyContact;
        }
        self.termination = termination;
        let edge_distances = self.state.toe_positions.map(|p| self.field.nearest_stair_edge_distance(&p));
        let info = StepInfo {
            state: self.state.clone(),
            edge_distances,
            applied_torques: applied,
            torque_saturated: saturated,
            body_contact,
            time: self.steps as f64 * POLICY_DT,
        };
        Ok(StepOutput { observation: self.observe(), info, termination })
    }

    fn contact(&mut self, leg: usize, p: &Vector3<f64>, v: &Vector3<f64>) -> Option<ContactPoint> {
        let h = self.field.height_at(p.x, p.y);
        let pen = h - p.z;
        if pen <= 0.0 {
            self.anchors[leg] = None;
            return None;
        }
        let c = &self.config;
        let fz = (c.contact_stiffness * pen.min(c.max_penetration) - c.contact_damping * v.z).max(0.0);
        let pxy = p.xy();
        let anchor = *self.anchors[leg].get_or_insert(pxy);
        let mut ft = -(pxy - anchor) * c.tangential_stiffness - v.xy() * c.tangential_damping;
        let limit = self.domain.friction * fz;
        let mut stiffness = Matrix3::from_diagonal(&Vector3::new(0.0, 0.0, c.contact_stiffness));
        let mut damping = Matrix3::from_diagonal(&Vector3::new(0.0, 0.0, c.contact_damping));
        let norm = ft.norm();
        if norm > limit {
            let scale = if norm > 0.0 { limit / norm } else { 0.0 };
            ft *= scale;
            self.anchors[leg] = Some(pxy + (anchor - pxy) * scale);
        } else {
            stiffness[(0, 0)] = c.tangential_stiffness;
            stiffness[(1, 1)] = c.tangential_stiffness;
            damping[(0, 0)] = c.tangential_damping;
            damping[(1, 1)] = c.tangential_damping;
        }
        if pen > c.max_penetration {
            stiffness[(2, 2)] = 0.0;
        }
        if fz == 0.0 {
            stiffness[(2, 2)] = 0.0;
            damping[(2, 2)] = 0.0;
        }
        Some(ContactPoint { force: Vector3::new(ft.x, ft.y, fz), stiffness, damping })
    }

    /// One integrator substep; returns the PD torques used.
    fn substep(&mut self, action: &[f64; NUM_JOINTS], saturated: &mut [bool; NUM_JOINTS]) -> [f64; NUM_JOINTS] {
        let dt = SIM_DT;
        let morph = self.morph.clone();
        let rot = *self.state.base_orientation.to_rotation_matrix().matrix();
        let rot_t = rot.transpose();
        let base_p = self.state.base_position;
        let base_v = self.state.base_linear_velocity;
        let omega = self.state.base_angular_velocity;
        let offset = rot * Vector3::from(self.domain.com_offset);
        let com = base_p + offset;
        let mass = self.config.base_mass * self.domain.base_mass_multiplier;

        let mut force = Vector3::new(0.0, 0.0, -self.config.gravity * mass);
        let mut torque = Vector3::zeros();
        let mut pd = [0.0; NUM_JOINTS];
        let limit = self.domain.torque_limit;
        for j in 0..NUM_JOINTS {
            let raw = self.config.kp * (action[j] - self.state.joint_angles[j]) - self.config.kd * self.state.joint_velocities[j];
            pd[j] = raw.clamp(-limit, limit);
            if raw.abs() >= limit {
                saturated[j] = true;
            }
        }

        let mut new_qd = self.state.joint_velocities;
        let inertia = self.config.joint_inertia;
        for leg in Leg::ALL {
            let i = leg.index();
            let angles = leg_angles(&self.state.joint_angles, i);
            let qd = Vector3::new(
                self.state.joint_velocities[3 * i],
                self.state.joint_velocities[3 * i + 1],
                self.state.joint_velocities[3 * i + 2],
            );
            let local = leg_fk(&angles, leg, &morph);
            let jac = leg_jacobian(&angles, leg, &morph);
            let world_jac = rot * jac;
            let arm = rot * local;
            let toe = base_p + arm;
            let toe_v = base_v + omega.cross(&arm) + world_jac * qd;
            let tau_pd = Vector3::new(pd[3 * i], pd[3 * i + 1], pd[3 * i + 2]);
            let mut lhs = Matrix3::identity() * inertia;
            let mut rhs = qd * inertia + tau_pd * dt;
            if let Some(c) = self.contact(i, &toe, &toe_v) {
                force += c.force;
                torque += (toe - com).cross(&c.force);
                let cj = world_jac.transpose() * c.damping * world_jac;
                let kj = world_jac.transpose() * c.stiffness * world_jac;
                lhs += cj * dt + kj * (dt * dt);
                rhs += cj * qd * dt + world_jac.transpose() * c.force * dt;
            }
            let sol = lhs.lu().solve(&rhs).unwrap_or(qd);
            new_qd[3 * i] = sol.x;
            new_qd[3 * i + 1] = sol.y;
            new_qd[3 * i + 2] = sol.z;
        }

        // base: semi-implicit Euler
        let accel = force / mass;
        self.state.base_linear_velocity += accel * dt;
        self.state.base_position += self.state.base_linear_velocity * dt;
        let m = self.domain.base_mass_multiplier;
        let body_inertia = Matrix3::from_diagonal(&Vector3::from(self.config.base_inertia)) * m;
        let world_inertia = rot * body_inertia * rot_t;
        let gyro = omega.cross(&(world_inertia * omega));
        let inv = world_inertia.try_inverse().unwrap_or_else(Matrix3::zeros);
        self.state.base_angular_velocity += inv * (torque - gyro) * dt;
        let spin = UnitQuaternion::from_scaled_axis(self.state.base_angular_velocity * dt);
        let mut q = spin * self.state.base_orientation;
        q.renormalize();
        self.state.base_orientation = q;

        for j in 0..NUM_JOINTS {
            self.state.joint_velocities[j] = new_qd[j];
            self.state.joint_angles[j] += new_qd[j] * dt;
        }
        self.state.update_toes(&morph);
        for i in 0..NUM_LEGS {
            let p = self.state.toe_positions[i];
            let h = self.field.height_at(p.x, p.y);
            let leg = Leg::ALL[i];
            let jac = rot_t.transpose() * leg_jacobian(&leg_angles(&self.state.joint_angles, i), leg, &morph);
            let qd = Vector3::new(new_qd[3 * i], new_qd[3 * i + 1], new_qd[3 * i + 2]);
            let arm = p - self.state.base_position;
            let vz = (self.state.base_linear_velocity + self.state.base_angular_velocity.cross(&arm) + jac * qd).z;
            self.state.toe_contacts[i] = p.z - h <= CONTACT_TOLERANCE && vz <= 1e-2;
        }
        pd
    }
}

/// One line of a trajectory dump.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRecord {
    pub time: f64,
    pub base_position: [f64; 3],
    /// `[w, x, y, z]`
    pub base_orientation: [f64; 4],
    pub base_linear_velocity: [f64; 3],
    pub base_angular_velocity: [f64; 3],
    pub joint_angles: [f64; NUM_JOINTS],
    pub joint_velocities: [f64; NUM_JOINTS],
    pub toe_contacts: [bool; NUM_LEGS],
    pub toe_positions: [[f64; 3]; NUM_LEGS],
    pub action: [f64; NUM_JOINTS],
    pub rewards: BTreeMap<String, f64>,
    pub termination: TerminationReason,
}

impl TrajectoryRecord {
    pub fn new(
        time: f64,
        state: &RobotState,
        action: &[f64; NUM_JOINTS],
        rewards: BTreeMap<String, f64>,
        termination: TerminationReason,
    ) -> Self {
        Self {
            time,
            base_position: arr3(&state.base_position),
            base_orientation: quat_wxyz(&state.base_orientation),
            base_linear_velocity: arr3(&state.base_linear_velocity),
            base_angular_velocity: arr3(&state.base_angular_velocity),
            joint_angles: state.joint_angles,
            joint_velocities: state.joint_velocities,
            toe_contacts: state.toe_contacts,
            toe_positions: state.toe_positions.map(|p| arr3(&p)),
            action: *action,
            rewards,
            termination,
        }
    }
}

/// Writes one JSON object per line.
pub fn write_dump<W: Write>(mut out: W, records: &[TrajectoryRecord]) -> Result<(), SimError> {
    for r in records {
        serde_json::to_writer(&mut out, r).map_err(|e| SimError::Dump { line: 0, message: e.to_string() })?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_dump<R: BufRead>(input: R) -> Result<Vec<TrajectoryRecord>, SimError> {
    let mut out = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record = serde_json::from_str(&line).map_err(|e| SimError::Dump { line: i + 1, message: e.to_string() })?;
        out.push(record);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::terrain::{TerrainKind, TerrainParams};

    fn env(config: SimConfig) -> SimEnv {
        SimEnv::new(config, RobotMorphology::default())
    }

    fn nominal() -> SimConfig {
        SimConfig { domain: DomainRanges::fixed(DomainParams::default()), ..SimConfig::default() }
    }

    #[test]
    fn pd_law() {
        assert_eq!(pd_torque(0.3, 0.3, 0.0, 55.0, 0.8, 20.0), 0.0);
        assert!((pd_torque(0.1, 0.0, 0.0, 50.0, 0.0, 23.0) - 5.0).abs() < 1e-12);
        assert_eq!(pd_torque(1.0, 0.0, 0.0, 50.0, 0.0, 20.0), 20.0);
        assert_eq!(pd_torque(-1.0, 0.0, 0.0, 50.0, 0.0, 20.0), -20.0);
    }

    #[test]
    fn termination_order() {
        let m = RobotMorphology::default();
        let f = TerrainField::plane();
        let mut s = RobotState::standing(&m, &f, 0.0, 0.0);
        assert_eq!(check_termination(&s, &f, &m, 0, 360), TerminationReason::None);
        assert_eq!(check_termination(&s, &f, &m, 360, 360), TerminationReason::TimeLimit);
        s.base_orientation = UnitQuaternion::from_euler_angles(46f64.to_radians(), 0.0, 0.0);
        assert_eq!(check_termination(&s, &f, &m, 0, 360), TerminationReason::RollLimit);
        s.base_orientation = UnitQuaternion::from_euler_angles(0.0, -61f64.to_radians(), 0.0);
        assert_eq!(check_termination(&s, &f, &m, 0, 360), TerminationReason::PitchLimit);
    }

    #[test]
    fn knees_in_stair_riser_are_body_contact() {
        let m = RobotMorphology::default();
        let params = TerrainParams { stair_step_height: 0.16, stair_step_depth: 0.32, stair_step_count: 3, ..Default::default() };
        let f = TerrainField::generate(TerrainKind::StairUp, params, 0).unwrap();
        // level base just before the first edge; the front knees reach into the first step
        let mut s = RobotState::standing(&m, &TerrainField::plane(), -0.35, 0.0);
        s.base_position.z = 0.3;
        for leg in [0usize, 1] {
            s.joint_angles[3 * leg + 1] = -0.6;
            s.joint_angles[3 * leg + 2] = 1.2;
        }
        s.update_toes(&m);
        let knee = s.body_points(&m)[8];
        assert!(knee.x > 0.0 && knee.z < 0.16, "knee at {knee:?}");
        assert_eq!(check_termination(&s, &f, &m, 0, 360), TerminationReason::BodyContact);
    }

    #[test]
    fn domain_sampling_is_deterministic_and_bounded() {
        let r = DomainRanges::default();
        assert_eq!(r.sample(7), r.sample(7));
        let n = 10_000;
        let mut mean = 0.0;
        for seed in 0..n {
            let d = r.sample(seed);
            assert!((0.5..=1.2).contains(&d.friction));
            assert!((16.0..=23.0).contains(&d.torque_limit));
            assert!((0.7..=1.3).contains(&d.base_mass_multiplier));
            assert!(d.com_offset.iter().all(|c| c.abs() <= 0.01));
            mean += d.friction / n as f64;
        }
        assert!((0.83..=0.87).contains(&mean), "mean friction {mean}");
    }

    #[test]
    fn colliding_reset_is_rejected() {
        let m = RobotMorphology::default();
        let params = TerrainParams { stair_step_height: 0.16, stair_step_depth: 0.32, stair_step_count: 3, ..Default::default() };
        let f = TerrainField::generate(TerrainKind::StairUp, params, 0).unwrap();
        let mut s = RobotState::standing(&m, &TerrainField::plane(), 1.0, 0.0);
        s.base_position.z = 0.3;
        let mut e = env(nominal());
        assert!(matches!(e.reset(f, 0, s), Err(SimError::Reset(_))));
    }

    #[test]
    fn standing_pose_holds_still() {
        let mut e = env(nominal());
        let f = TerrainField::plane();
        let s = RobotState::standing(&e.morph, &f, 0.0, 0.0);
        e.reset(f, 0, s.clone()).unwrap();
        let out = e.step(&s.joint_angles).unwrap();
        for j in 0..NUM_JOINTS {
            assert!((out.info.state.joint_angles[j] - s.joint_angles[j]).abs() < 1e-3);
        }
        assert_eq!(e.substeps(), SUBSTEPS as u64);
    }

    #[test]
    fn no_gravity_no_torque_keeps_velocity() {
        let cfg = SimConfig { gravity: 0.0, kp: 0.0, kd: 0.0, ..nominal() };
        let mut e = env(cfg);
        let f = TerrainField::plane();
        let mut s = RobotState::standing(&e.morph, &f, 0.0, 0.0);
        s.base_position.z += 0.5;
        s.base_linear_velocity = Vector3::new(0.3, -0.1, 0.2);
        e.reset(f, 0, s.clone()).unwrap();
        let out = e.step(&[0.0; NUM_JOINTS]).unwrap();
        assert_eq!(out.info.state.base_linear_velocity, s.base_linear_velocity);
    }

    #[test]
    fn saturated_torque_equals_limit() {
        let mut e = env(nominal());
        let f = TerrainField::plane();
        let s = RobotState::standing(&e.morph, &f, 0.0, 0.0);
        e.reset(f, 0, s.clone()).unwrap();
        let mut a = s.joint_angles;
        a[1] += 1.0;
        let out = e.step(&a).unwrap();
        assert_eq!(out.info.applied_torques[1], e.domain().torque_limit);
        assert!(out.info.torque_saturated[1]);
    }

    #[test]
    fn stepping_after_termination_fails() {
        let cfg = SimConfig { max_episode_steps: 1, ..nominal() };
        let mut e = env(cfg);
        let f = TerrainField::plane();
        let s = RobotState::standing(&e.morph, &f, 0.0, 0.0);
        e.reset(f, 0, s.clone()).unwrap();
        assert_eq!(e.step(&s.joint_angles).unwrap().termination, TerminationReason::TimeLimit);
        assert!(matches!(e.step(&s.joint_angles), Err(SimError::Terminated(_))));
    }

    #[test]
    fn proprio_stacking_and_gravity() {
        let s = RobotState::standing(&RobotMorphology::default(), &TerrainField::plane(), 0.0, 0.0);
        let f = ProprioFrame::from_state(&s, &[0.1; NUM_JOINTS]);
        let g = Vector3::new(0.0, 0.0, -GRAVITY);
        let v = assemble_proprio(&[f.clone(), f.clone(), f.clone()], &g).unwrap();
        assert_eq!(v.len(), PROPRIO_DIM);
        assert_eq!(&v[42..45], &[0.0, 0.0, -GRAVITY]);
        assert_eq!(&v[0..45], &v[45..90]);
        assert_eq!(&v[0..45], &v[90..135]);
        let mut rolled = f.clone();
        rolled.orientation = UnitQuaternion::from_euler_angles(std::f64::consts::FRAC_PI_2, 0.0, 0.0);
        let v = assemble_proprio(&[f.clone(), f.clone(), rolled], &g).unwrap();
        let slot = Vector3::new(v[132], v[133], v[134]);
        assert!((slot.norm() - GRAVITY).abs() < 1e-9);
        assert!((slot.y + GRAVITY).abs() < 1e-9, "{slot:?}");
        assert!(assemble_proprio(&[f], &g).is_err());
    }

    #[test]
    fn dump_round_trip() {
        let s = RobotState::standing(&RobotMorphology::default(), &TerrainField::plane(), 0.0, 0.0);
        let mut rewards = BTreeMap::new();
        rewards.insert("total".to_string(), 0.5);
        let r = TrajectoryRecord::new(0.02, &s, &[0.0; NUM_JOINTS], rewards, TerminationReason::None);
        let mut buf = Vec::new();
        write_dump(&mut buf, &[r.clone(), r.clone()]).unwrap();
        assert_eq!(read_dump(buf.as_slice()).unwrap(), vec![r.clone(), r]);
        assert!(read_dump("{oops".as_bytes()).is_err());
    }
}
