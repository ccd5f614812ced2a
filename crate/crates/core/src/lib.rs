//! Two-stage quadruped locomotion learning.
//!
//! The first stage trains a latent-variable policy to track reference motion
//! clips; the second freezes the low-level controller and learns a command
//! encoder plus a gated residual terrain-adaptation module on a terrain
//! curriculum. Everything the pipeline needs lives here:
//!
//! - [`mocap`]: reference clips, interpolation, future-target windows, a
//!   synthetic trot generator and the dataset manifest.
//! - [`retarget`]: robot morphology, analytic leg IK/FK and keypoint retargeting.
//! - [`terrain`]: the seven terrain kinds, height patches, the α gate and the
//!   terrain curriculum.
//! - [`simenv`]: a simplified centroidal quadruped simulator with PD joints.
//! - [`rewards`]: imitation, command-tracking and stair-edge terms.
//! - [`policy`]: the encoder/decoder/adapter networks with manual backprop.
//! - [`trainer`]: rollouts, GAE, PPO and the two training stages.
//! - [`gaitmetrics`]: contact detection, style parameters, return tables.

pub mod gaitmetrics;
pub mod math;
pub mod mocap;
pub mod policy;
pub mod retarget;
pub mod rewards;
pub mod simenv;
pub mod terrain;
pub mod trainer;

/// Number of legs.
pub const NUM_LEGS: usize = 4;
/// Hinge joints on the robot (3 per leg).
pub const NUM_JOINTS: usize = 12;
/// Width of the latent code `z`.
pub const LATENT_DIM: usize = 8;
/// One proprioceptive frame: velocities 6, joint angles 12, joint velocities 12,
/// last action 12, base-frame gravity 3.
pub const PROPRIO_FRAME_DIM: usize = 45;
/// Frames stacked into one proprioceptive observation.
pub const PROPRIO_HISTORY: usize = 3;
/// Flattened proprioceptive observation.
pub const PROPRIO_DIM: usize = PROPRIO_FRAME_DIM * PROPRIO_HISTORY;
/// Height patch samples along the heading axis.
pub const PATCH_ROWS: usize = 64;
/// Height patch samples along the lateral axis.
pub const PATCH_COLS: usize = 16;
/// Flattened exteroceptive observation.
pub const EXTERO_DIM: usize = PATCH_ROWS * PATCH_COLS;
/// Encoded user command `(cos Δθ, sin Δθ, v̂)`.
pub const COMMAND_DIM: usize = 3;
/// Policy period (50 Hz).
pub const POLICY_DT: f64 = 0.02;
/// PD / integrator period (500 Hz).
pub const SIM_DT: f64 = 0.002;
/// Integrator substeps per policy step.
pub const SUBSTEPS: usize = 10;
/// Standard gravity magnitude.
pub const GRAVITY: f64 = 9.81;
