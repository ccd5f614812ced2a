//! Imitation, command-tracking and stair-edge reward terms.

use std::collections::BTreeMap;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::math::geodesic_angle;
use crate::mocap::ReferencePose;
use crate::simenv::RobotState;
use crate::terrain::TerrainField;
use crate::{NUM_JOINTS, NUM_LEGS};

pub const W_JPOS: f64 = 0.6;
pub const W_JVEL: f64 = 0.05;
pub const W_EPOS: f64 = 0.1;
pub const W_BPOSE: f64 = 0.15;
pub const W_BVEL: f64 = 0.1;

pub const K_JPOS: f64 = 1.0;
pub const K_JVEL: f64 = 0.1;
pub const K_EPOS: f64 = 40.0;
pub const K_BPOS: f64 = 20.0;
pub const K_BROT: f64 = 10.0;
pub const K_BLIN: f64 = 2.0;
pub const K_BANG: f64 = 0.2;
pub const K_HEADING: f64 = 5.0;

/// Toes closer than this to a stair edge are penalised.
pub const STAIR_EDGE_MARGIN: f64 = 0.05;
pub const STAIR_PENALTY_PER_TOE: f64 = 0.25;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub r_jpos: f64,
    pub r_jvel: f64,
    pub r_epos: f64,
    pub r_bpose: f64,
    pub r_bvel: f64,
    pub total: f64,
}

impl RewardBreakdown {
    pub fn from_terms(r_jpos: f64, r_jvel: f64, r_epos: f64, r_bpose: f64, r_bvel: f64) -> Self {
        let total = W_JPOS * r_jpos + W_JVEL * r_jvel + W_EPOS * r_epos + W_BPOSE * r_bpose + W_BVEL * r_bvel;
        Self { r_jpos, r_jvel, r_epos, r_bpose, r_bvel, total }
    }

    /// Named terms for trajectory dumps.
    pub fn to_map(&self) -> BTreeMap<String, f64> {
        [
            ("r_jpos", self.r_jpos),
            ("r_jvel", self.r_jvel),
            ("r_epos", self.r_epos),
            ("r_bpose", self.r_bpose),
            ("r_bvel", self.r_bvel),
            ("total", self.total),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect()
    }
}

fn sq_dist<const N: usize>(a: &[f64; N], b: &[f64; N]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Five-term motion tracking reward.
pub fn imitation_reward(state: &RobotState, reference: &ReferencePose) -> RewardBreakdown {
    let jpos = sq_dist::<NUM_JOINTS>(&reference.joint_angles, &state.joint_angles);
    let jvel = sq_dist::<NUM_JOINTS>(&reference.joint_velocities, &state.joint_velocities);
    let epos: f64 = (0..NUM_LEGS)
        .map(|e| (reference.end_effector_positions[e] - state.toe_positions[e]).norm_squared())
        .sum();
    let bpos = (reference.base_position - state.base_position).norm_squared();
    let brot = geodesic_angle(&reference.base_orientation, &state.base_orientation);
    let blin = (reference.base_linear_velocity - state.base_linear_velocity).norm_squared();
    let bang = (reference.base_angular_velocity - state.base_angular_velocity).norm_squared();
    RewardBreakdown::from_terms(
        (-K_JPOS * jpos).exp(),
        (-K_JVEL * jvel).exp(),
        (-K_EPOS * epos).exp(),
        (-K_BPOS * bpos - K_BROT * brot).exp(),
        (-K_BLIN * blin - K_BANG * bang).exp(),
    )
}

/// Target speed and heading for the terrain adaptation stage.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Command {
    /// m/s
    pub target_speed: f64,
    /// radians
    pub target_yaw: f64,
}

impl Command {
    /// `(cos(θ̂ − θ), sin(θ̂ − θ), v̂)` for a robot with heading `robot_yaw`.
    pub fn encode(&self, robot_yaw: f64) -> [f64; 3] {
        let d = self.target_yaw - robot_yaw;
        [d.cos(), d.sin(), self.target_speed]
    }
}

/// Speed along the target heading.
pub fn projected_speed(velocity: &Vector3<f64>, target_yaw: f64) -> f64 {
    let (s, c) = target_yaw.sin_cos();
    velocity.x * c + velocity.y * s
}

/// `exp(−|v̂ − v|) · exp(5·(cos(θ̂ − θ) − 1))` from a speed and heading.
pub fn command_reward_from(speed: f64, yaw: f64, cmd: &Command) -> f64 {
    (-(cmd.target_speed - speed).abs()).exp() * (K_HEADING * ((cmd.target_yaw - yaw).cos() - 1.0)).exp()
}

pub fn command_reward(state: &RobotState, cmd: &Command) -> f64 {
    let v = projected_speed(&state.base_linear_velocity, cmd.target_yaw);
    command_reward_from(v, state.yaw(), cmd)
}

/// `−0.25` for every contacting toe within 5 cm of a stair edge.
pub fn stair_edge_penalty(
    toe_positions: &[Vector3<f64>; NUM_LEGS],
    toe_contacts: &[bool; NUM_LEGS],
    field: &TerrainField,
) -> f64 {
    let mut penalty = 0.0;
    for (p, &c) in toe_positions.iter().zip(toe_contacts) {
        if c && field.nearest_stair_edge_distance(p) < STAIR_EDGE_MARGIN {
            penalty -= STAIR_PENALTY_PER_TOE;
        }
    }
    penalty
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RewardConfig {
    /// Multiplier on the stair-edge penalty added to the command reward.
    pub stair_penalty_weight: f64,
}

impl Default for RewardConfig {
    fn default() -> Self {
        Self { stair_penalty_weight: 1.0 }
    }
}
