//! Procedural terrains, robot-centred height patches, the α gate and the
//! per-terrain difficulty curriculum.

use std::fmt;
use std::str::FromStr;

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::{EXTERO_DIM, PATCH_COLS, PATCH_ROWS};

/// Patch extent along the heading axis, metres.
pub const PATCH_LENGTH: f64 = 1.0;
/// Patch extent along the lateral axis, metres.
pub const PATCH_WIDTH: f64 = 0.5;
/// Height std above which the adaptation residual is enabled.
pub const GATE_STD_THRESHOLD: f64 = 0.01;
/// Residual gain when the gate is open.
pub const GATE_ALPHA: f64 = 0.1;
/// Stair edges extend this far either side of y = 0.
pub const EDGE_HALF_WIDTH: f64 = 50.0;
pub const DEFAULT_STREAK_REQUIRED: u32 = 3;

#[derive(Debug, Error)]
pub enum TerrainError {
    #[error("invalid terrain parameters: {0}")]
    Params(String),
    #[error("patch must have {EXTERO_DIM} samples, got {0}")]
    PatchSize(usize),
    #[error("unknown terrain kind `{0}`")]
    Kind(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum TerrainKind {
    Plane,
    SlopeUp,
    SlopeDown,
    StairUp,
    StairDown,
    Blocks,
    Hills,
}

impl TerrainKind {
    pub const ALL: [TerrainKind; 7] = [
        TerrainKind::Plane,
        TerrainKind::SlopeUp,
        TerrainKind::SlopeDown,
        TerrainKind::StairUp,
        TerrainKind::StairDown,
        TerrainKind::Blocks,
        TerrainKind::Hills,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            TerrainKind::Plane => "plane",
            TerrainKind::SlopeUp => "slopeup",
            TerrainKind::SlopeDown => "slopedown",
            TerrainKind::StairUp => "stairup",
            TerrainKind::StairDown => "stairdown",
            TerrainKind::Blocks => "blocks",
            TerrainKind::Hills => "hills",
        }
    }

    pub fn is_stair(self) -> bool {
        matches!(self, TerrainKind::StairUp | TerrainKind::StairDown)
    }

    /// Curriculum parameters that shape this kind.
    pub fn curriculum_params(self) -> &'static [CurriculumParam] {
        use CurriculumParam::*;
        match self {
            TerrainKind::Plane => &[],
            TerrainKind::SlopeUp | TerrainKind::SlopeDown => &[SlopeInclination],
            TerrainKind::StairUp | TerrainKind::StairDown => &[StairStepHeight, StairStepDepth, StairStepCount],
            TerrainKind::Blocks => &[BlockSize, BlockMaxHeight],
            TerrainKind::Hills => &[HillHeight],
        }
    }
}

impl FromStr for TerrainKind {
    type Err = TerrainError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let n: String = s.chars().filter(|c| *c != '_' && *c != '-').collect::<String>().to_ascii_lowercase();
        TerrainKind::ALL.into_iter().find(|k| k.as_str() == n).ok_or_else(|| TerrainError::Kind(s.to_string()))
    }
}

impl fmt::Display for TerrainKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TerrainParams {
    /// Radians; the sign comes from the kind.
    pub slope_inclination: f64,
    pub stair_step_height: f64,
    pub stair_step_depth: f64,
    pub stair_step_count: u32,
    pub block_size: f64,
    pub block_max_height: f64,
    pub hill_height: f64,
}

impl Default for TerrainParams {
    /// The easiest curriculum setting.
    fn default() -> Self {
        let s = |p: CurriculumParam| p.schedule().start;
        Self {
            slope_inclination: s(CurriculumParam::SlopeInclination),
            stair_step_height: s(CurriculumParam::StairStepHeight),
            stair_step_depth: s(CurriculumParam::StairStepDepth),
            stair_step_count: s(CurriculumParam::StairStepCount) as u32,
            block_size: s(CurriculumParam::BlockSize),
            block_max_height: s(CurriculumParam::BlockMaxHeight),
            hill_height: s(CurriculumParam::HillHeight),
        }
    }
}

impl TerrainParams {
    pub fn validate(&self) -> Result<(), TerrainError> {
        let err = |m: &str| Err(TerrainError::Params(m.to_string()));
        let finite = [
            self.slope_inclination,
            self.stair_step_height,
            self.stair_step_depth,
            self.block_size,
            self.block_max_height,
            self.hill_height,
        ]
        .iter()
        .all(|v| v.is_finite());
        if !finite {
            return err("all parameters must be finite");
        }
        if !(self.slope_inclination >= 0.0 && self.slope_inclination < std::f64::consts::FRAC_PI_2) {
            return err("slope inclination must lie in [0, pi/2)");
        }
        if self.stair_step_depth <= 0.0 {
            return err("stair step depth must be positive");
        }
        if self.stair_step_count < 1 {
            return err("stair step count must be at least 1");
        }
        if self.block_size <= 0.0 {
            return err("block size must be positive");
        }
        if self.stair_step_height < 0.0 || self.block_max_height < 0.0 || self.hill_height < 0.0 {
            return err("heights must be non-negative");
        }
        Ok(())
    }

    pub fn get(&self, p: CurriculumParam) -> f64 {
        match p {
            CurriculumParam::SlopeInclination => self.slope_inclination,
            CurriculumParam::StairStepHeight => self.stair_step_height,
            CurriculumParam::StairStepDepth => self.stair_step_depth,
            CurriculumParam::StairStepCount => self.stair_step_count as f64,
            CurriculumParam::BlockSize => self.block_size,
            CurriculumParam::BlockMaxHeight => self.block_max_height,
            CurriculumParam::HillHeight => self.hill_height,
        }
    }

    pub fn set(&mut self, p: CurriculumParam, v: f64) {
        match p {
            CurriculumParam::SlopeInclination => self.slope_inclination = v,
            CurriculumParam::StairStepHeight => self.stair_step_height = v,
            CurriculumParam::StairStepDepth => self.stair_step_depth = v,
            CurriculumParam::StairStepCount => self.stair_step_count = v.round().max(1.0) as u32,
            CurriculumParam::BlockSize => self.block_size = v,
            CurriculumParam::BlockMaxHeight => self.block_max_height = v,
            CurriculumParam::HillHeight => self.hill_height = v,
        }
    }
}

/// A stair nosing: the segment `x = x, y ∈ [y_min, y_max]` at height `z`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EdgeSegment {
    pub x: f64,
    pub y_min: f64,
    pub y_max: f64,
    pub z: f64,
}

impl EdgeSegment {
    pub fn horizontal_distance(&self, x: f64, y: f64) -> f64 {
        let dy = if y < self.y_min {
            self.y_min - y
        } else if y > self.y_max {
            y - self.y_max
        } else {
            0.0
        };
        (x - self.x).hypot(dy)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct HillWaves {
    kx: f64,
    ky: f64,
    phase_x: f64,
    phase_y: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TerrainField {
    pub kind: TerrainKind,
    pub params: TerrainParams,
    pub seed: u64,
    pub stair_edges: Vec<EdgeSegment>,
    hills: HillWaves,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn cell_uniform(seed: u64, ix: i64, iy: i64) -> f64 {
    let h = splitmix64(seed ^ splitmix64((ix as u64).wrapping_mul(0x1000_0000_01B3) ^ splitmix64(iy as u64)));
    (h >> 11) as f64 / (1u64 << 53) as f64
}

impl TerrainField {
    pub fn generate(kind: TerrainKind, params: TerrainParams, seed: u64) -> Result<Self, TerrainError> {
        params.validate()?;
        let mut stair_edges = Vec::new();
        if kind.is_stair() {
            let sign = if kind == TerrainKind::StairUp { 1.0 } else { -1.0 };
            for j in 0..params.stair_step_count {
                stair_edges.push(EdgeSegment {
                    x: j as f64 * params.stair_step_depth,
                    y_min: -EDGE_HALF_WIDTH,
                    y_max: EDGE_HALF_WIDTH,
                    z: sign * (j + 1) as f64 * params.stair_step_height,
                });
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let two_pi = std::f64::consts::TAU;
        let hills = HillWaves {
            kx: two_pi / rng.random_range(2.0..4.0),
            ky: two_pi / rng.random_range(2.0..4.0),
            phase_x: rng.random_range(0.0..two_pi),
            phase_y: rng.random_range(0.0..two_pi),
        };
        Ok(Self { kind, params, seed, stair_edges, hills })
    }

    pub fn plane() -> Self {
        Self::generate(TerrainKind::Plane, TerrainParams::default(), 0).expect("default parameters are valid")
    }

    fn stair_up_height(&self, x: f64) -> f64 {
        if x < 0.0 {
            return 0.0;
        }
        let p = &self.params;
        let steps = ((x / p.stair_step_depth).floor() + 1.0).min(p.stair_step_count as f64);
        steps * p.stair_step_height
    }

    /// Terrain height at `(x, y)`.
    pub fn height_at(&self, x: f64, y: f64) -> f64 {
        let p = &self.params;
        match self.kind {
            TerrainKind::Plane => 0.0,
            TerrainKind::SlopeUp => {
                if x >= 0.0 {
                    p.slope_inclination.tan() * x
                } else {
                    0.0
                }
            }
            TerrainKind::SlopeDown => {
                if x >= 0.0 {
                    -p.slope_inclination.tan() * x
                } else {
                    0.0
                }
            }
            TerrainKind::StairUp => self.stair_up_height(x),
            TerrainKind::StairDown => -self.stair_up_height(x),
            TerrainKind::Blocks => {
                let ix = (x / p.block_size).floor() as i64;
                let iy = (y / p.block_size).floor() as i64;
                p.block_max_height * cell_uniform(self.seed, ix, iy)
            }
            TerrainKind::Hills => {
                let w = &self.hills;
                p.hill_height / 4.0 * ((w.kx * x + w.phase_x).sin() + (w.ky * y + w.phase_y).sin())
            }
        }
    }

    /// Horizontal distance to the nearest stair edge; `INFINITY` off stairs.
    pub fn nearest_stair_edge_distance(&self, point: &Vector3<f64>) -> f64 {
        self.stair_edges
            .iter()
            .map(|e| e.horizontal_distance(point.x, point.y))
            .fold(f64::INFINITY, f64::min)
    }

    /// Plain-text grid: `rows cols cell_size` then `rows` lines of heights,
    /// sampled at `origin + (i·cell, j·cell)`.
    pub fn export_heightmap(&self, origin: (f64, f64), rows: usize, cols: usize, cell_size: f64) -> String {
        let mut out = format!("{rows} {cols} {cell_size}\n");
        for i in 0..rows {
            let row: Vec<String> = (0..cols)
                .map(|j| {
                    let x = origin.0 + i as f64 * cell_size;
                    let y = origin.1 + j as f64 * cell_size;
                    self.height_at(x, y).to_string()
                })
                .collect();
            out.push_str(&row.join(" "));
            out.push('\n');
        }
        out
    }
}

/// Robot-frame offset `(heading, lateral)` of patch cell `(row, col)`.
pub fn patch_offset(row: usize, col: usize) -> (f64, f64) {
    let u = -PATCH_LENGTH / 2.0 + row as f64 * PATCH_LENGTH / (PATCH_ROWS - 1) as f64;
    let v = -PATCH_WIDTH / 2.0 + col as f64 * PATCH_WIDTH / (PATCH_COLS - 1) as f64;
    (u, v)
}

/// World `(x, y)` of patch cell `(row, col)` for a robot at `base_xy` facing `yaw`.
pub fn patch_point(base_xy: (f64, f64), yaw: f64, row: usize, col: usize) -> (f64, f64) {
    let (u, v) = patch_offset(row, col);
    let (s, c) = yaw.sin_cos();
    (base_xy.0 + c * u - s * v, base_xy.1 + s * u + c * v)
}

/// 64×16 heights relative to the base, row-major (`row · 16 + col`).
#[derive(Clone, Debug, PartialEq)]
pub struct ExteroPatch {
    heights: Vec<f64>,
}

impl ExteroPatch {
    pub fn new(heights: Vec<f64>) -> Result<Self, TerrainError> {
        if heights.len() != EXTERO_DIM {
            return Err(TerrainError::PatchSize(heights.len()));
        }
        Ok(Self { heights })
    }

    pub fn constant(value: f64) -> Self {
        Self { heights: vec![value; EXTERO_DIM] }
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.heights
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.heights[row * PATCH_COLS + col]
    }
}

/// Samples the height patch around a robot at `base` facing `yaw`.
pub fn sample_patch<R: Rng + ?Sized>(
    field: &TerrainField,
    base: &Vector3<f64>,
    yaw: f64,
    noise_std: f64,
    rng: &mut R,
) -> ExteroPatch {
    let mut heights = Vec::with_capacity(EXTERO_DIM);
    for i in 0..PATCH_ROWS {
        for j in 0..PATCH_COLS {
            let (x, y) = patch_point((base.x, base.y), yaw, i, j);
            heights.push(field.height_at(x, y) - base.z);
        }
    }
    if noise_std > 0.0 {
        let normal = Normal::new(0.0, noise_std).expect("finite noise std");
        for h in &mut heights {
            *h += normal.sample(rng);
        }
    }
    ExteroPatch { heights }
}

/// Population std of the patch and the corresponding residual gain.
pub fn patch_std_gate(patch: &ExteroPatch) -> (f64, f64) {
    let std = population_std(patch.as_slice());
    let alpha = if std > GATE_STD_THRESHOLD { GATE_ALPHA } else { 0.0 };
    (std, alpha)
}

pub(crate) fn population_std(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let n = values.len() as f64;
    let shift = values[0];
    let mean = values.iter().map(|v| v - shift).sum::<f64>() / n;
    (values.iter().map(|v| (v - shift - mean).powi(2)).sum::<f64>() / n).sqrt()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum CurriculumParam {
    SlopeInclination,
    StairStepHeight,
    StairStepDepth,
    StairStepCount,
    BlockSize,
    BlockMaxHeight,
    HillHeight,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Schedule {
    pub start: f64,
    pub end: f64,
    pub step: f64,
}

impl Schedule {
    /// Advancements needed to reach `end`; the last one may be clamped.
    pub fn max_level(&self) -> u32 {
        ((self.end - self.start).abs() / self.step.abs() - 1e-9).ceil() as u32
    }

    pub fn value(&self, level: u32) -> f64 {
        if level >= self.max_level() {
            return self.end;
        }
        let v = self.start + level as f64 * self.step;
        if self.end >= self.start {
            v.min(self.end)
        } else {
            v.max(self.end)
        }
    }

    fn lo_hi(&self) -> (f64, f64) {
        (self.start.min(self.end), self.start.max(self.end))
    }
}

impl CurriculumParam {
    pub fn schedule(self) -> Schedule {
        let s = |start, end, step| Schedule { start, end, step };
        match self {
            CurriculumParam::SlopeInclination => s(0.1, 0.4, 0.02),
            CurriculumParam::StairStepHeight => s(0.0, 0.15, 0.01),
            CurriculumParam::StairStepDepth => s(0.4, 0.34, -0.005),
            CurriculumParam::StairStepCount => s(3.0, 10.0, 1.0),
            CurriculumParam::BlockSize => s(0.05, 0.15, 0.03),
            CurriculumParam::BlockMaxHeight => s(0.02, 0.1, 0.01),
            CurriculumParam::HillHeight => s(0.05, 0.2, 0.02),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamLevel {
    pub param: CurriculumParam,
    pub level: u32,
}

impl ParamLevel {
    pub fn value(&self) -> f64 {
        self.param.schedule().value(self.level)
    }

    pub fn at_max(&self) -> bool {
        self.level >= self.param.schedule().max_level()
    }
}

/// Difficulty state of one terrain kind.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurriculumState {
    pub kind: TerrainKind,
    pub params: Vec<ParamLevel>,
    pub success_streak: u32,
    pub advancements: u32,
}

impl CurriculumState {
    pub fn new(kind: TerrainKind) -> Self {
        Self {
            kind,
            params: kind.curriculum_params().iter().map(|&param| ParamLevel { param, level: 0 }).collect(),
            success_streak: 0,
            advancements: 0,
        }
    }

    pub fn value(&self, p: CurriculumParam) -> Option<f64> {
        self.params.iter().find(|l| l.param == p).map(|l| l.value())
    }

    pub fn at_max(&self, p: CurriculumParam) -> Option<bool> {
        self.params.iter().find(|l| l.param == p).map(|l| l.at_max())
    }

    /// Mean normalised level in [0, 1]; 1 for kinds without parameters.
    pub fn difficulty(&self) -> f64 {
        if self.params.is_empty() {
            return 1.0;
        }
        self.params.iter().map(|l| l.level as f64 / l.param.schedule().max_level() as f64).sum::<f64>()
            / self.params.len() as f64
    }

    /// Records one episode outcome. Returns true when difficulty advanced.
    pub fn record(&mut self, success: bool, streak_required: u32) -> bool {
        if !success {
            self.success_streak = 0;
            return false;
        }
        self.success_streak += 1;
        if self.success_streak < streak_required.max(1) {
            return false;
        }
        self.success_streak = 0;
        let mut advanced = false;
        for l in &mut self.params {
            if !l.at_max() {
                l.level += 1;
                advanced = true;
            }
        }
        if advanced {
            self.advancements += 1;
        }
        advanced
    }

    /// Parameters at the current difficulty.
    pub fn current_params(&self) -> TerrainParams {
        let mut p = TerrainParams::default();
        for l in &self.params {
            p.set(l.param, l.value());
        }
        p
    }

    /// Parameters for a new episode: maxed parameters are drawn uniformly
    /// between their start and end values.
    pub fn sample_params<R: Rng + ?Sized>(&self, rng: &mut R) -> TerrainParams {
        let mut p = self.current_params();
        for l in &self.params {
            if l.at_max() {
                let (lo, hi) = l.param.schedule().lo_hi();
                let v = if l.param == CurriculumParam::StairStepCount {
                    rng.random_range(lo as u32..=hi as u32) as f64
                } else {
                    rng.random_range(lo..=hi)
                };
                p.set(l.param, v);
            }
        }
        p
    }
}

/// Functional form of [`CurriculumState::record`].
pub fn curriculum_step(state: &CurriculumState, episode_success: bool, streak_required: u32) -> CurriculumState {
    let mut next = state.clone();
    next.record(episode_success, streak_required);
    next
}
