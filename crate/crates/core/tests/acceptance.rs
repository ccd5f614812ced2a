//! Pass/fail report over the thirteen acceptance criteria. Run with
//! `cargo test -p quadmimic-core --test acceptance -- --nocapture` to see the
//! per-criterion lines.

use std::time::{Duration, Instant};

use nalgebra::{UnitQuaternion, Vector3};
use quadmimic_core::gaitmetrics::{clip_to_dump, evaluate_return, gait_metrics_from_dump};
use quadmimic_core::mocap::{synthesize_gait, GaitSpec, ReferencePose, TROT_OFFSETS, WINDOW_FEATURES};
use quadmimic_core::policy::{
    kl_to_prior, GaussianLatent, PolicyConfig, PolicyError, PolicyInput, PolicyParams, Stage, Upstream,
};
use quadmimic_core::retarget::{leg_fk, leg_ik, Leg, RobotMorphology};
use quadmimic_core::rewards::{
    imitation_reward, stair_edge_penalty, K_BANG, K_BLIN, K_BPOS, K_BROT, K_EPOS, K_JPOS, K_JVEL, W_BPOSE, W_BVEL,
    W_EPOS, W_JPOS, W_JVEL,
};
use quadmimic_core::simenv::{Observation, RobotState};
use quadmimic_core::terrain::{
    sample_patch, CurriculumParam, CurriculumState, ExteroPatch, TerrainField, TerrainKind,
    TerrainParams,
};
use quadmimic_core::trainer::{
    collect_rollouts, gae, gae_brute_force, ppo_loss_grad, ppo_update, train_adaptation, train_imitation, train_task,
    Adam, CommandTask, CurveRow, EnvRunner, PointMassConfig, PointMassTask, PpoConfig, TrainConfig, Transition,
};
use quadmimic_core::{EXTERO_DIM, LATENT_DIM, NUM_JOINTS, NUM_LEGS, PROPRIO_DIM};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn within(elapsed: Duration, limit_s: u64) -> bool {
    elapsed <= Duration::from_secs(limit_s)
}

fn uniform<const N: usize>(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> [f64; N] {
    std::array::from_fn(|_| rng.random_range(lo..hi))
}

fn vec3(rng: &mut ChaCha8Rng, s: f64) -> Vector3<f64> {
    Vector3::new(rng.random_range(-s..s), rng.random_range(-s..s), rng.random_range(-s..s))
}

fn quat(rng: &mut ChaCha8Rng) -> UnitQuaternion<f64> {
    UnitQuaternion::from_euler_angles(rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5), rng.random_range(-3.0..3.0))
}

fn matched_pair() -> (RobotState, ReferencePose) {
    let m = RobotMorphology::default();
    let s = RobotState::standing(&m, &TerrainField::plane(), 0.3, -0.2);
    let r = ReferencePose {
        base_position: s.base_position,
        base_orientation: s.base_orientation,
        base_linear_velocity: s.base_linear_velocity,
        base_angular_velocity: s.base_angular_velocity,
        joint_angles: s.joint_angles,
        joint_velocities: s.joint_velocities,
        end_effector_positions: s.toe_positions,
    };
    (s, r)
}

fn criterion_1() -> Outcome {
    let (s, r) = matched_pair();
    let b = imitation_reward(&s, &r);
    let wsum = W_JPOS + W_JVEL + W_EPOS + W_BPOSE + W_BVEL;
    check(
        (b.total - 1.0).abs() <= 1e-12 && (wsum - 1.0).abs() <= 1e-12,
        format!("total {:.15}, weight sum {:.15}", b.total, wsum),
    )
}

/// Written from the reward equations without the crate's helpers.
fn oracle_terms(s: &RobotState, r: &ReferencePose) -> [f64; 5] {
    let sq = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>();
    let v = |x: &Vector3<f64>| [x.x, x.y, x.z];
    let jpos = sq(&r.joint_angles, &s.joint_angles);
    let jvel = sq(&r.joint_velocities, &s.joint_velocities);
    let epos: f64 = (0..NUM_LEGS).map(|e| sq(&v(&r.end_effector_positions[e]), &v(&s.toe_positions[e]))).sum();
    let bpos = sq(&v(&r.base_position), &v(&s.base_position));
    let (a, b) = (r.base_orientation.quaternion(), s.base_orientation.quaternion());
    let dot = (a.w * b.w + a.i * b.i + a.j * b.j + a.k * b.k).abs().min(1.0);
    let angle = 2.0 * dot.acos();
    let blin = sq(&v(&r.base_linear_velocity), &v(&s.base_linear_velocity));
    let bang = sq(&v(&r.base_angular_velocity), &v(&s.base_angular_velocity));
    [
        (-K_JPOS * jpos).exp(),
        (-K_JVEL * jvel).exp(),
        (-K_EPOS * epos).exp(),
        (-K_BPOS * bpos - K_BROT * angle).exp(),
        (-K_BLIN * blin - K_BANG * bang).exp(),
    ]
}

fn criterion_2() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let (mut s, mut r) = matched_pair();
        s.base_position += vec3(&mut rng, 0.1);
        s.base_orientation = quat(&mut rng);
        r.base_orientation = quat(&mut rng);
        s.base_linear_velocity = vec3(&mut rng, 1.0);
        r.base_linear_velocity = vec3(&mut rng, 1.0);
        s.base_angular_velocity = vec3(&mut rng, 2.0);
        s.joint_angles = uniform(&mut rng, -1.0, 1.0);
        r.joint_velocities = uniform(&mut rng, -3.0, 3.0);
        for e in 0..NUM_LEGS {
            s.toe_positions[e] += vec3(&mut rng, 0.1);
        }
        let b = imitation_reward(&s, &r);
        let o = oracle_terms(&s, &r);
        let got = [b.r_jpos, b.r_jvel, b.r_epos, b.r_bpose, b.r_bvel];
        for k in 0..5 {
            worst = worst.max((got[k] - o[k]).abs());
        }
        let total = W_JPOS * o[0] + W_JVEL * o[1] + W_EPOS * o[2] + W_BPOSE * o[3] + W_BVEL * o[4];
        worst = worst.max((b.total - total).abs());
    }
    check(worst <= 1e-12, format!("20 pairs, worst term error {worst:.2e}"))
}

fn tiny_policy(cond_dim: usize, width: usize) -> PolicyConfig {
    PolicyConfig { cond_dim, ..PolicyConfig::small(width, 4) }
}

fn random_proprio(rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..PROPRIO_DIM).map(|_| rng.random_range(-1.0..1.0)).collect()
}

fn criterion_3() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut s1 = PolicyParams::new(tiny_policy(WINDOW_FEATURES, 16), &mut rng).unwrap();
    for t in s1.tensors_mut() {
        for v in t.iter_mut() {
            *v += rng.random_range(-0.2..0.2);
        }
    }
    let mut s2 = s1.clone().into_adaptation(&mut rng).unwrap();
    for t in s2.tensors_mut() {
        for v in t.iter_mut() {
            *v += rng.random_range(-0.2..0.2);
        }
    }
    s2.decoder = s1.decoder.clone();
    let plane = TerrainField::plane();
    let mut mismatches = 0;
    for _ in 0..1000 {
        let base = Vector3::new(rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0), rng.random_range(0.2..0.6));
        let patch = sample_patch(&plane, &base, rng.random_range(-3.0..3.0), 0.0, &mut rng);
        let input = PolicyInput::new(uniform::<3>(&mut rng, -1.0, 1.0).to_vec(), random_proprio(&mut rng), &patch);
        let eps: [f64; LATENT_DIM] = std::array::from_fn(|_| rng.sample(StandardNormal));
        let tr = s2.forward(&input, &eps).unwrap();
        let a1 = s1.decode_action(&tr.z, &input.proprio, &input.extero).unwrap();
        if input.alpha != 0.0 || tr.mean_action.iter().zip(&a1).any(|(x, y)| x.to_bits() != y.to_bits()) {
            mismatches += 1;
        }
    }
    let stairs = TerrainField::generate(
        TerrainKind::StairUp,
        TerrainParams { stair_step_height: 0.15, stair_step_depth: 0.34, stair_step_count: 10, ..TerrainParams::default() },
        0,
    )
    .unwrap();
    let mut max_offset = 0.0f64;
    let mut gated = 0;
    for _ in 0..200 {
        let base = Vector3::new(rng.random_range(-0.5..2.0), rng.random_range(-0.3..0.3), 0.4);
        let patch = sample_patch(&stairs, &base, rng.random_range(-0.3..0.3), 0.0, &mut rng);
        let input = PolicyInput::new(uniform::<3>(&mut rng, -1.0, 1.0).to_vec(), random_proprio(&mut rng), &patch);
        if input.alpha > 0.0 {
            gated += 1;
        }
        let eps: [f64; LATENT_DIM] = std::array::from_fn(|_| rng.sample(StandardNormal));
        let tr = s2.forward(&input, &eps).unwrap();
        for j in 0..NUM_JOINTS {
            max_offset = max_offset.max((tr.mean_action[j] - tr.decoder_action[j]).abs());
        }
    }
    check(
        mismatches == 0 && gated > 0 && max_offset <= 0.1,
        format!("plane mismatches {mismatches}/1000; stair patches gated {gated}/200, max |offset| {max_offset:.4}"),
    )
}

fn criterion_4() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let g = GaussianLatent {
        mean: [0.5, -0.3, 1.0, 0.0, 0.2, -0.8, 0.1, 0.4],
        std: [0.7, 1.3, 0.5, 1.0, 0.9, 1.6, 0.8, 1.1],
    };
    let analytic = kl_to_prior(&g);
    let n = 1_000_000;
    let mut sum = 0.0;
    for _ in 0..n {
        let mut log_ratio = 0.0;
        for i in 0..LATENT_DIM {
            let e: f64 = rng.sample(StandardNormal);
            let z = g.mean[i] + g.std[i] * e;
            log_ratio += -0.5 * e * e - g.std[i].ln() + 0.5 * z * z;
        }
        sum += log_ratio;
    }
    let mc = sum / n as f64;
    let rel = (mc - analytic).abs() / analytic;
    let zero = kl_to_prior(&GaussianLatent::standard());

    let cfg = PpoConfig { kl_beta: 0.03, minibatch_size: 32, epochs_per_update: 1, ..PpoConfig::default() };
    let mut params = PolicyParams::new(tiny_policy(3, 8), &mut rng).unwrap();
    let mut runners: Vec<_> = (0..2).map(|i| EnvRunner::new(i, PointMassTask::new(PointMassConfig::default(), i as u64), 9 + i as u64)).collect();
    let mut batch = collect_rollouts(&params, &mut runners, 32, 0).unwrap();
    batch.compute_advantages(cfg.discount, cfg.gae_lambda, true);
    let mut adam = Adam::new(cfg.learning_rate, &params);
    let stats = ppo_update(&mut params, &mut adam, &batch, &cfg, 1).unwrap();
    let wired = stats.latent_kl > 0.0 && (stats.kl_penalty - 0.03 * stats.latent_kl).abs() <= 1e-15;
    check(
        rel <= 0.01 && zero.abs() <= 1e-12 && wired,
        format!(
            "analytic {analytic:.5}, Monte Carlo {mc:.5} (rel {rel:.2e}); KL(prior) {zero:.1e}; update stats kl {:.4} penalty {:.5}",
            stats.latent_kl, stats.kl_penalty
        ),
    )
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

fn perturbed(cfg: PolicyConfig, stage: Stage, rng: &mut ChaCha8Rng) -> PolicyParams {
    let mut p = PolicyParams::new(cfg, rng).unwrap();
    if stage == Stage::Adaptation {
        p = p.into_adaptation(rng).unwrap();
    }
    for t in p.tensors_mut() {
        for v in t.iter_mut() {
            *v += rng.random_range(-0.3..0.3);
        }
    }
    p
}

fn criterion_5() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let cfg = PolicyConfig { cond_dim: 3, ..PolicyConfig::small(6, 3) };
    let mut worst = 0.0f64;
    let mut nonzero_frozen = 0usize;
    let mut checked = 0usize;
    for stage in [Stage::Imitation, Stage::Adaptation] {
        let p = perturbed(cfg.clone(), stage, &mut rng);
        let input = PolicyInput {
            cond: uniform::<3>(&mut rng, -1.0, 1.0).to_vec(),
            proprio: random_proprio(&mut rng),
            extero: (0..EXTERO_DIM).map(|_| rng.random_range(-0.2..0.2)).collect(),
            alpha: 0.1,
        };
        let eps: [f64; LATENT_DIM] = uniform(&mut rng, -1.0, 1.0);
        let up = Upstream {
            d_action: uniform(&mut rng, -1.0, 1.0),
            d_value: 0.7,
            d_latent_mean: uniform(&mut rng, -1.0, 1.0),
            d_latent_std: uniform(&mut rng, -1.0, 1.0),
        };
        let f = |q: &PolicyParams| {
            let t = q.forward(&input, &eps).unwrap();
            let g = t.latent.unwrap();
            (0..NUM_JOINTS).map(|j| up.d_action[j] * t.mean_action[j]).sum::<f64>()
                + up.d_value * t.value_estimate
                + (0..LATENT_DIM).map(|i| up.d_latent_mean[i] * g.mean[i] + up.d_latent_std[i] * g.std[i]).sum::<f64>()
        };
        let trace = p.forward(&input, &eps).unwrap();
        let mut grads = p.zeros_like();
        p.backward(&input, &trace, &up, &mut grads).unwrap();
        let names = p.tensor_names();
        let analytic: Vec<Vec<f64>> = grads.tensors().iter().map(|t| t.to_vec()).collect();
        for (k, (name, trainable)) in names.iter().enumerate() {
            if name == "action_log_std" {
                continue;
            }
            if !trainable {
                nonzero_frozen += analytic[k].iter().filter(|g| **g != 0.0).count();
                continue;
            }
            for i in 0..analytic[k].len() {
                let h = 1e-5;
                let mut a = p.clone();
                a.tensors_mut()[k][i] += h;
                let mut b = p.clone();
                b.tensors_mut()[k][i] -= h;
                worst = worst.max(rel_err(analytic[k][i], (f(&a) - f(&b)) / (2.0 * h)));
                checked += 1;
            }
        }
    }

    let p = perturbed(cfg, Stage::Imitation, &mut rng);
    let mut runners = vec![EnvRunner::new(0, PointMassTask::new(PointMassConfig::default(), 1), 3)];
    let mut batch = collect_rollouts(&p, &mut runners, 4, 0).unwrap();
    batch.compute_advantages(0.9, 0.9, false);
    for t in &mut batch.transitions {
        t.log_prob += rng.random_range(-0.1..0.1);
    }
    let ppo = PpoConfig { entropy_coeff: 0.01, ..PpoConfig::default() };
    let items: Vec<&Transition> = batch.transitions.iter().collect();
    let mut grads = p.zeros_like();
    ppo_loss_grad(&p, &items, &ppo, &mut grads).unwrap();
    let loss = |q: &PolicyParams| {
        let mut g = q.zeros_like();
        ppo_loss_grad(q, &items, &ppo, &mut g).unwrap().total
    };
    let analytic: Vec<Vec<f64>> = grads.tensors().iter().map(|t| t.to_vec()).collect();
    let mut worst_loss = 0.0f64;
    for k in 0..analytic.len() {
        let len = analytic[k].len();
        for i in (0..len).step_by((len / 8).max(1)) {
            let h = 1e-6;
            let mut a = p.clone();
            a.tensors_mut()[k][i] += h;
            let mut b = p.clone();
            b.tensors_mut()[k][i] -= h;
            worst_loss = worst_loss.max(rel_err(analytic[k][i], (loss(&a) - loss(&b)) / (2.0 * h)));
        }
    }
    check(
        worst < 1e-4 && worst_loss < 1e-4 && nonzero_frozen == 0,
        format!(
            "{checked} network parameters, worst rel err {worst:.2e}; PPO loss worst {worst_loss:.2e}; nonzero frozen grads {nonzero_frozen}"
        ),
    )
}

fn criterion_6() -> Outcome {
    let m = RobotMorphology::default();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut worst = 0.0f64;
    for leg in Leg::ALL {
        let lim = &m.joint_limits[3 * leg.index()..3 * leg.index() + 3];
        for _ in 0..1000 {
            let knee_hi = lim[2].1.min(-0.1);
            let angles = [
                rng.random_range(lim[0].0..lim[0].1),
                rng.random_range(lim[1].0..lim[1].1),
                rng.random_range(lim[2].0..knee_hi),
            ];
            let target = leg_fk(&angles, leg, &m);
            let sol = match leg_ik(&target, leg, &m) {
                Ok(s) => s,
                Err(e) => return Err(format!("{leg}: reachable target rejected: {e}")),
            };
            worst = worst.max((leg_fk(&sol.angles, leg, &m) - target).norm());
        }
    }
    check(worst < 1e-6, format!("4000 targets, worst |FK(IK(p)) - p| {worst:.2e} m"))
}

fn advancements_to_end(kind: TerrainKind, p: CurriculumParam) -> (u32, Vec<f64>) {
    let mut c = CurriculumState::new(kind);
    let mut values = vec![c.value(p).unwrap()];
    let mut n = 0;
    while !c.at_max(p).unwrap() && n < 1000 {
        for _ in 0..3 {
            c.record(true, 3);
        }
        n += 1;
        values.push(c.value(p).unwrap());
    }
    (n, values)
}

fn criterion_7() -> Outcome {
    let (slope_n, _) = advancements_to_end(TerrainKind::SlopeUp, CurriculumParam::SlopeInclination);
    let (_, blocks) = advancements_to_end(TerrainKind::Blocks, CurriculumParam::BlockSize);
    let block_ok = blocks.len() == 5 && (blocks[3] - 0.14).abs() < 1e-12 && blocks[4] == 0.15;
    let stairs = TerrainField::generate(
        TerrainKind::StairUp,
        TerrainParams { stair_step_height: 0.16, stair_step_depth: 0.32, stair_step_count: 10, ..TerrainParams::default() },
        0,
    )
    .unwrap();
    let h = stairs.height_at(2.0 * 0.32 + 0.01, 0.0);
    let allowed = [0.0, -0.25, -0.5, -0.75, -1.0];
    let mut bad = 0;
    let mut seen = std::collections::BTreeSet::new();
    let xs: Vec<f64> = (0..25).map(|i| -0.1 + 0.02 * i as f64).collect();
    for &x0 in &xs {
        for &x1 in &xs {
            for mask in 0..16u32 {
                let toes = [
                    Vector3::new(x0, 0.1, 0.0),
                    Vector3::new(x1, -0.1, 0.0),
                    Vector3::new(x0 + 0.32, 0.1, 0.0),
                    Vector3::new(x1 + 0.31, -0.1, 0.0),
                ];
                let contacts = std::array::from_fn(|i| mask & (1 << i) != 0);
                let p = stair_edge_penalty(&toes, &contacts, &stairs);
                if !allowed.iter().any(|a| (a - p).abs() < 1e-12) {
                    bad += 1;
                }
                seen.insert((p * 4.0).round() as i64);
            }
        }
    }
    check(
        slope_n == 15 && block_ok && (h - 0.48).abs() < 1e-12 && bad == 0 && seen.len() == 5,
        format!(
            "slope advancements {slope_n}; block sizes {blocks:?}; stair height past third edge {h:.3}; penalty values seen {}, off-grid {bad}",
            seen.len()
        ),
    )
}

fn criterion_8() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let p = PolicyParams::new(tiny_policy(WINDOW_FEATURES, 8), &mut rng).unwrap();
    let good_p = random_proprio(&mut rng);
    let good_e = vec![0.0; EXTERO_DIM];
    let dim_err = |r: Result<GaussianLatent, PolicyError>| matches!(r, Err(PolicyError::Dim { .. }));
    let checks = [
        Observation::new(good_p.clone(), good_e.clone()).is_ok(),
        Observation::new(vec![0.0; 134], good_e.clone()).is_err(),
        Observation::new(good_p.clone(), vec![0.0; 1023]).is_err(),
        ExteroPatch::new(vec![0.0; 64 * 15]).is_err(),
        dim_err(p.encode_reference(&vec![0.0; WINDOW_FEATURES - 1], &good_p)),
        dim_err(p.encode_reference(&vec![0.0; WINDOW_FEATURES], &good_p[..100])),
        matches!(p.decode_action(&[0.0; 7], &good_p, &good_e), Err(PolicyError::Dim { .. })),
        matches!(p.decode_action(&[0.0; 8], &good_p, &good_e[..1000]), Err(PolicyError::Dim { .. })),
        p.decode_action(&[0.0; 8], &good_p, &good_e).map(|a| a.len() == 12).unwrap_or(false),
        PROPRIO_DIM == 135 && EXTERO_DIM == 1024 && LATENT_DIM == 8 && NUM_JOINTS == 12,
    ];
    let failed: Vec<usize> = checks.iter().enumerate().filter(|(_, ok)| !**ok).map(|(i, _)| i).collect();
    check(failed.is_empty(), format!("{} dimension checks, failing {failed:?}", checks.len()))
}

fn criterion_9() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let r: Vec<f64> = (0..16).map(|_| rng.random_range(-1.0..1.0)).collect();
        let v: Vec<f64> = (0..16).map(|_| rng.random_range(-2.0..2.0)).collect();
        let d: Vec<bool> = (0..16).map(|_| rng.random_bool(0.15)).collect();
        let boot = rng.random_range(-2.0..2.0);
        let (gamma, lambda) = (rng.random_range(0.8..1.0), rng.random_range(0.8..1.0));
        let (adv, _) = gae(&r, &v, &d, boot, gamma, lambda);
        let brute = gae_brute_force(&r, &v, &d, boot, gamma, lambda);
        for (a, b) in adv.iter().zip(&brute) {
            worst = worst.max((a - b).abs());
        }
    }
    check(worst <= 1e-10, format!("100 sequences of 16 steps, worst |recursive - brute force| {worst:.2e}"))
}

/// Best trailing mean of `window` consecutive curve values.
fn best_trailing(values: &[f64], window: usize) -> (f64, usize) {
    let mut best = (f64::NEG_INFINITY, 0);
    for end in window..=values.len() {
        let m = values[end - window..end].iter().sum::<f64>() / window as f64;
        if m > best.0 {
            best = (m, end - 1);
        }
    }
    best
}

fn criterion_10() -> Outcome {
    let t0 = Instant::now();
    let mut cfg = TrainConfig::default();
    cfg.policy = PolicyConfig { cond_dim: 3, init_action_log_std: -1.0, ..PolicyConfig::small(32, 8) };
    cfg.ppo = PpoConfig {
        learning_rate: 1e-3,
        epochs_per_update: 8,
        minibatch_size: 256,
        kl_beta: 0.0,
        max_updates: 300,
        ..PpoConfig::default()
    };
    let pm = PointMassConfig::default();
    let params = PolicyParams::new(cfg.policy.clone(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let tasks: Vec<_> = (0..cfg.ppo.num_envs).map(|i| PointMassTask::new(pm, 100 + i as u64)).collect();
    let run = train_task(params, tasks, &cfg, 0, 300, None, &mut |_: &CurveRow| {}).unwrap();
    let rewards: Vec<f64> = run.curve.iter().map(|r| r.mean_raw_reward).collect();
    let (best, at) = best_trailing(&rewards, 10);
    let table = evaluate_return(&run.params, "toy", &[TerrainKind::Plane], 32, |_, s| Ok(PointMassTask::new(pm, s)), 7)
        .unwrap();
    let eval = table.rows[0].cells[0].mean / pm.episode_steps as f64;
    let elapsed = t0.elapsed();
    check(
        best >= 0.8 && within(elapsed, 600),
        format!(
            "16 envs, 300 updates: best 10-update mean per-step reward {best:.3} (ending update {at}), deterministic eval {eval:.3}, {:.0} s",
            elapsed.as_secs_f64()
        ),
    )
}

fn criterion_11() -> Outcome {
    let t0 = Instant::now();
    let morph = RobotMorphology::default();
    let clip = synthesize_gait(&GaitSpec::default(), &morph).unwrap();
    let mut cfg = TrainConfig::default();
    cfg.policy = PolicyConfig::small(32, 8);
    cfg.ppo = PpoConfig {
        rollout_horizon: 256,
        learning_rate: 1e-3,
        epochs_per_update: 8,
        minibatch_size: 256,
        max_updates: 200,
        ..PpoConfig::default()
    };
    let out = train_imitation(&cfg, vec![clip], &morph, &mut |_: &CurveRow| {}).unwrap();
    let rewards: Vec<f64> = out.curve.iter().map(|r| r.mean_raw_reward).collect();
    let base = rewards[0];
    let (best, at) = best_trailing(&rewards, 10);
    let gain = best / base - 1.0;
    let elapsed = t0.elapsed();
    check(
        gain >= 0.5 && within(elapsed, 900),
        format!(
            "update-0 per-step reward {base:.4}, best 10-update mean {best:.4} (ending update {at}), improvement {:.1}%, {:.0} s",
            100.0 * gain,
            elapsed.as_secs_f64()
        ),
    )
}

fn criterion_12() -> Outcome {
    let spec = GaitSpec { cycle_time: 0.64, duty_factor: 0.38 / 0.64, duration: 4.0, ..GaitSpec::default() };
    let clip = synthesize_gait(&spec, &RobotMorphology::default()).unwrap();
    let g = gait_metrics_from_dump(&clip_to_dump(&clip, &spec.terrain())).unwrap();
    let tick = clip.dt();
    let d_expected = spec.speed * (TROT_OFFSETS[1] - TROT_OFFSETS[0]).abs() * spec.cycle_time;
    let d_err = (g.d_step.mean - d_expected).abs() / d_expected;
    check(
        (g.t_cycle.mean - 0.64).abs() <= tick + 1e-12 && (g.t_stance.mean - 0.38).abs() <= tick + 1e-12 && d_err <= 0.05,
        format!(
            "T_cycle {:.4}, T_stance {:.4} (tick {tick:.3}); D_step {:.4} vs speed x phase offset {d_expected:.4} ({:.2}%)",
            g.t_cycle.mean,
            g.t_stance.mean,
            g.d_step.mean,
            100.0 * d_err
        ),
    )
}

fn criterion_13() -> Outcome {
    let morph = RobotMorphology::default();
    let clip = synthesize_gait(&GaitSpec::default(), &morph).unwrap();
    let mut cfg = TrainConfig { seed: 17, ..TrainConfig::default() };
    cfg.policy = PolicyConfig::small(8, 4);
    cfg.ppo = PpoConfig { num_envs: 4, rollout_horizon: 32, minibatch_size: 64, max_updates: 3, ..PpoConfig::default() };
    let a = train_imitation(&cfg, vec![clip.clone()], &morph, &mut |_: &CurveRow| {}).unwrap();
    let b = train_imitation(&cfg, vec![clip], &morph, &mut |_: &CurveRow| {}).unwrap();
    let ckpt_same = a.checkpoint.to_json() == b.checkpoint.to_json();
    cfg.ppo.max_updates = 2;
    let s2 = train_adaptation(&cfg, &a.checkpoint, None, &morph, &mut |_: &CurveRow| {}).unwrap();
    let kinds = [TerrainKind::Plane, TerrainKind::StairUp];
    let eval = || {
        evaluate_return(
            &s2.checkpoint.params,
            "s2",
            &kinds,
            3,
            |k, s| CommandTask::for_evaluation(k, cfg.commands, cfg.rewards, cfg.sim.clone(), morph.clone(), s),
            5,
        )
        .unwrap()
        .to_csv()
    };
    let (x, y) = (eval(), eval());
    check(
        ckpt_same && x == y,
        format!(
            "checkpoints identical: {ckpt_same} ({} bytes); eval CSVs identical: {} ({} bytes)",
            a.checkpoint.to_json().len(),
            x == y,
            x.len()
        ),
    )
}

#[test]
fn acceptance() {
    let criteria: [(&str, fn() -> Outcome); 13] = [
        ("reward identity", criterion_1),
        ("reward arithmetic oracle", criterion_2),
        ("alpha-gate transparency", criterion_3),
        ("KL correctness", criterion_4),
        ("gradient checks", criterion_5),
        ("IK/FK round trip", criterion_6),
        ("terrain and curriculum", criterion_7),
        ("observation contract", criterion_8),
        ("GAE oracle", criterion_9),
        ("toy command following", criterion_10),
        ("imitation smoke training", criterion_11),
        ("gait metric round trip", criterion_12),
        ("determinism", criterion_13),
    ];
    let mut failed = Vec::new();
    for (i, (name, f)) in criteria.iter().enumerate() {
        let t = Instant::now();
        let outcome = f();
        let secs = t.elapsed().as_secs_f64();
        match outcome {
            Ok(d) => println!("PASS {:>2} {name}: {d} [{secs:.1} s]", i + 1),
            Err(d) => {
                println!("FAIL {:>2} {name}: {d} [{secs:.1} s]", i + 1);
                failed.push(i + 1);
            }
        }
    }
    assert!(failed.is_empty(), "failing criteria: {failed:?}");
}
