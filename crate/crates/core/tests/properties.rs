use proptest::prelude::*;
use quadmimic_core::policy::{PolicyConfig, PolicyParams};
use quadmimic_core::retarget::{leg_fk, leg_ik, Leg, RobotMorphology};
use quadmimic_core::rewards::imitation_reward;
use quadmimic_core::mocap::ReferencePose;
use quadmimic_core::simenv::RobotState;
use quadmimic_core::terrain::{patch_std_gate, ExteroPatch, TerrainField};
use quadmimic_core::trainer::{gae, gae_brute_force};
use quadmimic_core::{EXTERO_DIM, LATENT_DIM, NUM_JOINTS, PROPRIO_DIM};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn adapted(seed: u64) -> PolicyParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let p = PolicyParams::new(PolicyConfig { cond_dim: 3, ..PolicyConfig::small(8, 4) }, &mut rng).unwrap();
    let mut p = p.into_adaptation(&mut rng).unwrap();
    for t in p.tensors_mut() {
        t.iter_mut().for_each(|v| *v += rng.random_range(-2.0..2.0));
    }
    p
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn residual_never_exceeds_alpha(seed in 0u64..1000, alpha in 0.0f64..0.1, scale in 0.0f64..5.0) {
        let p = adapted(seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
        let z: Vec<f64> = (0..LATENT_DIM).map(|_| rng.random_range(-3.0..3.0)).collect();
        let proprio: Vec<f64> = (0..PROPRIO_DIM).map(|_| scale * rng.random_range(-1.0..1.0)).collect();
        let extero: Vec<f64> = (0..EXTERO_DIM).map(|_| scale * rng.random_range(-1.0..1.0)).collect();
        let base = p.decode_action(&z, &proprio, &extero).unwrap();
        let out = p.adapt_action(&z, &proprio, &extero, &base, alpha).unwrap();
        for j in 0..NUM_JOINTS {
            prop_assert!((out[j] - base[j]).abs() <= alpha + 1e-12);
        }
    }

    #[test]
    fn gate_is_bounded_and_zero_on_flat_patches(h in -1.0f64..1.0, bump in 0.0f64..0.5) {
        let (std, alpha) = patch_std_gate(&ExteroPatch::constant(h));
        prop_assert!(std.abs() < 1e-12 && alpha == 0.0);
        let mut v = vec![h; EXTERO_DIM];
        v[..EXTERO_DIM / 2].iter_mut().for_each(|x| *x += bump);
        let (std, alpha) = patch_std_gate(&ExteroPatch::new(v).unwrap());
        prop_assert!((std - bump / 2.0).abs() < 1e-9);
        prop_assert!((0.0..=0.1).contains(&alpha));
    }

    #[test]
    fn ik_inverts_fk(leg in 0usize..4, a in 0.0f64..1.0, b in 0.0f64..1.0, c in 0.0f64..1.0) {
        let m = RobotMorphology::default();
        let leg = Leg::ALL[leg];
        let lim = &m.joint_limits[3 * leg.index()..3 * leg.index() + 3];
        let lerp = |(lo, hi): (f64, f64), t: f64| lo + t * (hi - lo);
        let angles = [lerp(lim[0], a), lerp(lim[1], b), lerp((lim[2].0, lim[2].1.min(-0.1)), c)];
        let target = leg_fk(&angles, leg, &m);
        let sol = leg_ik(&target, leg, &m).unwrap();
        prop_assert!(sol.within_limits);
        prop_assert!((leg_fk(&sol.angles, leg, &m) - target).norm() < 1e-9);
    }

    #[test]
    fn gae_matches_brute_force(
        steps in prop::collection::vec((-1.0f64..1.0, -2.0f64..2.0, any::<bool>()), 1..40),
        boot in -2.0f64..2.0,
        gamma in 0.0f64..1.0,
        lambda in 0.0f64..1.0,
    ) {
        let r: Vec<f64> = steps.iter().map(|s| s.0).collect();
        let v: Vec<f64> = steps.iter().map(|s| s.1).collect();
        let d: Vec<bool> = steps.iter().map(|s| s.2).collect();
        let (adv, ret) = gae(&r, &v, &d, boot, gamma, lambda);
        let brute = gae_brute_force(&r, &v, &d, boot, gamma, lambda);
        for i in 0..r.len() {
            prop_assert!((adv[i] - brute[i]).abs() < 1e-10);
            prop_assert!((ret[i] - adv[i] - v[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn imitation_reward_lies_in_unit_interval(dq in prop::array::uniform12(-2.0f64..2.0), dx in -0.5f64..0.5, yaw in -3.0f64..3.0) {
        let m = RobotMorphology::default();
        let s = RobotState::standing(&m, &TerrainField::plane(), 0.0, 0.0);
        let mut r = ReferencePose {
            base_position: s.base_position,
            base_orientation: s.base_orientation,
            base_linear_velocity: s.base_linear_velocity,
            base_angular_velocity: s.base_angular_velocity,
            joint_angles: s.joint_angles,
            joint_velocities: s.joint_velocities,
            end_effector_positions: s.toe_positions,
        };
        for j in 0..NUM_JOINTS {
            r.joint_angles[j] += dq[j];
        }
        r.base_position.x += dx;
        r.base_orientation = nalgebra::UnitQuaternion::from_euler_angles(0.0, 0.0, yaw);
        let b = imitation_reward(&s, &r);
        prop_assert!(b.total > 0.0 && b.total <= 1.0);
        for t in [b.r_jpos, b.r_jvel, b.r_epos, b.r_bpose, b.r_bvel] {
            prop_assert!((0.0..=1.0).contains(&t));
        }
    }
}
