//! Rollout collection, GAE, the PPO objective and its gradient, and Adam.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::{PpoConfig, Task, TrainError};
use crate::policy::gaussian::{diag_gaussian_entropy, diag_gaussian_log_prob, kl_to_prior_grad, standard_normal};
use crate::policy::{kl_to_prior, GaussianLatent, OptimizerState, PolicyInput, PolicyParams, Upstream};
use crate::simenv::TerminationReason;
use crate::terrain::TerrainKind;
use crate::{LATENT_DIM, NUM_JOINTS};

#[derive(Clone, Debug, PartialEq)]
pub struct Transition {
    pub input: PolicyInput,
    /// Latent noise used for `z = μ + σ ε`.
    pub eps: [f64; LATENT_DIM],
    pub latent: GaussianLatent,
    pub action: [f64; NUM_JOINTS],
    pub log_prob: f64,
    pub reward: f64,
    pub raw_reward: f64,
    pub value: f64,
    pub done: bool,
    pub advantage: f64,
    pub ret: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeSummary {
    pub env: usize,
    pub kind: TerrainKind,
    pub ret: f64,
    pub raw_return: f64,
    pub steps: usize,
    pub termination: TerminationReason,
}

/// `num_envs × horizon` transitions, env-major.
#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryBatch {
    /// Parameter snapshot that produced every transition.
    pub snapshot: u64,
    pub num_envs: usize,
    pub horizon: usize,
    pub transitions: Vec<Transition>,
    /// `V(s_T)` for each env after its last transition.
    pub bootstrap: Vec<f64>,
    pub episodes: Vec<EpisodeSummary>,
}

impl TrajectoryBatch {
    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }

    pub fn env_slice(&self, env: usize) -> &[Transition] {
        &self.transitions[env * self.horizon..(env + 1) * self.horizon]
    }

    pub fn mean_reward(&self) -> f64 {
        self.transitions.iter().map(|t| t.reward).sum::<f64>() / self.len().max(1) as f64
    }

    pub fn mean_raw_reward(&self) -> f64 {
        self.transitions.iter().map(|t| t.raw_reward).sum::<f64>() / self.len().max(1) as f64
    }

    /// Fills advantages and returns per env, then optionally normalises advantages.
    pub fn compute_advantages(&mut self, gamma: f64, lambda: f64, normalize: bool) {
        let h = self.horizon;
        for e in 0..self.num_envs {
            let seg = &self.transitions[e * h..(e + 1) * h];
            let rewards: Vec<f64> = seg.iter().map(|t| t.reward).collect();
            let values: Vec<f64> = seg.iter().map(|t| t.value).collect();
            let dones: Vec<bool> = seg.iter().map(|t| t.done).collect();
            let (adv, ret) = gae(&rewards, &values, &dones, self.bootstrap[e], gamma, lambda);
            for (k, t) in self.transitions[e * h..(e + 1) * h].iter_mut().enumerate() {
                t.advantage = adv[k];
                t.ret = ret[k];
            }
        }
        if normalize && self.len() > 1 {
            let n = self.len() as f64;
            let mean = self.transitions.iter().map(|t| t.advantage).sum::<f64>() / n;
            let var = self.transitions.iter().map(|t| (t.advantage - mean).powi(2)).sum::<f64>() / n;
            let sd = var.sqrt().max(1e-8);
            for t in &mut self.transitions {
                t.advantage = (t.advantage - mean) / sd;
            }
        }
    }
}

/// `δ_t = r_t + γ V_{t+1} (1 − d_t) − V_t`, `A_t = δ_t + γλ (1 − d_t) A_{t+1}`;
/// returns `(A, A + V)`. `bootstrap` is `V` after the last step.
pub fn gae(rewards: &[f64], values: &[f64], dones: &[bool], bootstrap: f64, gamma: f64, lambda: f64) -> (Vec<f64>, Vec<f64>) {
    let n = rewards.len();
    assert!(values.len() == n && dones.len() == n, "gae inputs must share a length");
    let mut adv = vec![0.0; n];
    let mut next_value = bootstrap;
    let mut next_adv = 0.0;
    for t in (0..n).rev() {
        let keep = if dones[t] { 0.0 } else { 1.0 };
        let delta = rewards[t] + gamma * next_value * keep - values[t];
        next_adv = delta + gamma * lambda * keep * next_adv;
        adv[t] = next_adv;
        next_value = values[t];
    }
    let ret = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    (adv, ret)
}

/// Direct `Σ_k (γλ)^{k−t} δ_k` over the uninterrupted suffix; quadratic in length.
pub fn gae_brute_force(
    rewards: &[f64],
    values: &[f64],
    dones: &[bool],
    bootstrap: f64,
    gamma: f64,
    lambda: f64,
) -> Vec<f64> {
    let n = rewards.len();
    (0..n)
        .map(|t| {
            let mut total = 0.0;
            let mut w = 1.0;
            for k in t..n {
                let v_next = if dones[k] { 0.0 } else if k + 1 < n { values[k + 1] } else { bootstrap };
                total += w * (rewards[k] + gamma * v_next - values[k]);
                if dones[k] {
                    break;
                }
                w *= gamma * lambda;
            }
            total
        })
        .collect()
}

/// One environment plus its sampling stream and in-flight episode.
pub struct EnvRunner<T: Task> {
    pub index: usize,
    pub task: T,
    rng: ChaCha8Rng,
    current: Option<PolicyInput>,
    ep_return: f64,
    ep_raw: f64,
    ep_steps: usize,
}

impl<T: Task> EnvRunner<T> {
    pub fn new(index: usize, task: T, seed: u64) -> Self {
        Self { index, task, rng: ChaCha8Rng::seed_from_u64(seed), current: None, ep_return: 0.0, ep_raw: 0.0, ep_steps: 0 }
    }

    fn run(&mut self, params: &PolicyParams, horizon: usize) -> Result<(Vec<Transition>, f64, Vec<EpisodeSummary>), TrainError> {
        let log_std = &params.action_log_std;
        let std: Vec<f64> = log_std.iter().map(|l| l.exp()).collect();
        let mut out = Vec::with_capacity(horizon);
        let mut episodes = Vec::new();
        for _ in 0..horizon {
            let input = match self.current.take() {
                Some(i) => i,
                None => {
                    self.ep_return = 0.0;
                    self.ep_raw = 0.0;
                    self.ep_steps = 0;
                    self.task.reset()?
                }
            };
            let eps = standard_normal::<_, LATENT_DIM>(&mut self.rng);
            let trace = params.forward(&input, &eps)?;
            let xi = standard_normal::<_, NUM_JOINTS>(&mut self.rng);
            let action: [f64; NUM_JOINTS] = std::array::from_fn(|i| trace.mean_action[i] + std[i] * xi[i]);
            let log_prob = diag_gaussian_log_prob(&action, &trace.mean_action, &std);
            let kind = self.task.kind();
            let step = self.task.step(&action)?;
            self.ep_return += step.reward;
            self.ep_raw += step.raw_reward;
            self.ep_steps += 1;
            if step.done {
                episodes.push(EpisodeSummary {
                    env: self.index,
                    kind,
                    ret: self.ep_return,
                    raw_return: self.ep_raw,
                    steps: self.ep_steps,
                    termination: step.termination,
                });
            } else {
                self.current = Some(step.input);
            }
            out.push(Transition {
                input,
                eps,
                latent: trace.latent.expect("forward records the latent"),
                action,
                log_prob,
                reward: step.reward,
                raw_reward: step.raw_reward,
                value: trace.value_estimate,
                done: step.done,
                advantage: 0.0,
                ret: 0.0,
            });
        }
        let bootstrap = match &self.current {
            Some(i) => params.value_estimate(i)?,
            None => 0.0,
        };
        Ok((out, bootstrap, episodes))
    }
}

/// Runs every env for `horizon` steps on one parameter snapshot.
pub fn collect_rollouts<T: Task>(
    params: &PolicyParams,
    runners: &mut [EnvRunner<T>],
    horizon: usize,
    snapshot: u64,
) -> Result<TrajectoryBatch, TrainError> {
    let results: Vec<_> = runners.par_iter_mut().map(|r| r.run(params, horizon)).collect();
    let mut batch = TrajectoryBatch {
        snapshot,
        num_envs: runners.len(),
        horizon,
        transitions: Vec::with_capacity(runners.len() * horizon),
        bootstrap: Vec::with_capacity(runners.len()),
        episodes: Vec::new(),
    };
    for r in results {
        let (t, b, e) = r?;
        batch.transitions.extend(t);
        batch.bootstrap.push(b);
        batch.episodes.extend(e);
    }
    Ok(batch)
}

/// Loss terms of one minibatch.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossTerms {
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub latent_kl: f64,
    pub approx_kl: f64,
    pub clip_fraction: f64,
    pub total: f64,
}

/// Accumulates the gradient of the mean PPO objective over `items` into `grads`:
/// `−min(rA, clip(r)A) + c_v (V − R)² − c_e H + β KL(q(z) ‖ N(0, I))`.
pub fn ppo_loss_grad(
    params: &PolicyParams,
    items: &[&Transition],
    cfg: &PpoConfig,
    grads: &mut PolicyParams,
) -> Result<LossTerms, TrainError> {
    let m = items.len() as f64;
    let std: Vec<f64> = params.action_log_std.iter().map(|l| l.exp()).collect();
    let entropy = diag_gaussian_entropy(&params.action_log_std);
    let mut terms = LossTerms { entropy, ..Default::default() };
    let mut d_log_std = vec![0.0; NUM_JOINTS];
    for t in items {
        let trace = params.forward(&t.input, &t.eps)?;
        let mu = &trace.mean_action;
        let logp = diag_gaussian_log_prob(&t.action, mu, &std);
        let ratio = (logp - t.log_prob).exp();
        let a = t.advantage;
        let lo = 1.0 - cfg.clip_epsilon;
        let hi = 1.0 + cfg.clip_epsilon;
        let unclipped = ratio * a;
        let clipped = ratio.clamp(lo, hi) * a;
        terms.policy_loss -= unclipped.min(clipped) / m;
        if ratio < lo || ratio > hi {
            terms.clip_fraction += 1.0 / m;
        }
        terms.approx_kl += (t.log_prob - logp) / m;
        let active = unclipped <= clipped;
        let d_logp = if active { -ratio * a / m } else { 0.0 };

        let v = trace.value_estimate;
        terms.value_loss += (v - t.ret).powi(2) / m;
        let d_value = 2.0 * cfg.value_loss_coeff * (v - t.ret) / m;

        let g = trace.latent.expect("forward records the latent");
        terms.latent_kl += kl_to_prior(&g) / m;
        let (km, ks) = kl_to_prior_grad(&g);

        let mut up = Upstream { d_value, ..Default::default() };
        for j in 0..NUM_JOINTS {
            let u = (t.action[j] - mu[j]) / std[j];
            up.d_action[j] = d_logp * u / std[j];
            d_log_std[j] += d_logp * (u * u - 1.0);
        }
        for i in 0..LATENT_DIM {
            up.d_latent_mean[i] = cfg.kl_beta * km[i] / m;
            up.d_latent_std[i] = cfg.kl_beta * ks[i] / m;
        }
        params.backward(&t.input, &trace, &up, grads)?;
    }
    for j in 0..NUM_JOINTS {
        grads.action_log_std[j] += d_log_std[j] - cfg.entropy_coeff;
    }
    terms.total = terms.policy_loss + cfg.value_loss_coeff * terms.value_loss - cfg.entropy_coeff * entropy
        + cfg.kl_beta * terms.latent_kl;
    Ok(terms)
}

/// Adam over the trainable tensors of a [`PolicyParams`].
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub state: OptimizerState,
}

impl Adam {
    pub fn new(lr: f64, params: &PolicyParams) -> Self {
        let shapes: Vec<Vec<f64>> = params.tensors().iter().map(|t| vec![0.0; t.len()]).collect();
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, state: OptimizerState { step: 0, m: shapes.clone(), v: shapes } }
    }

    /// Restores moments when their shapes match `params`.
    pub fn with_state(lr: f64, params: &PolicyParams, state: OptimizerState) -> Result<Self, TrainError> {
        let mut a = Self::new(lr, params);
        let ok = state.m.len() == a.state.m.len()
            && state.m.iter().zip(&a.state.m).all(|(x, y)| x.len() == y.len())
            && state.v.iter().zip(&a.state.v).all(|(x, y)| x.len() == y.len());
        if !ok {
            return Err(TrainError::Config("optimizer state does not match the parameters".into()));
        }
        a.state = state;
        Ok(a)
    }

    /// Returns the pre-clip gradient norm.
    pub fn step(&mut self, params: &mut PolicyParams, grads: &PolicyParams, max_grad_norm: f64) -> f64 {
        let mask: Vec<bool> = params.tensor_names().into_iter().map(|(_, t)| t).collect();
        let g = grads.tensors();
        let norm = g
            .iter()
            .zip(&mask)
            .filter(|(_, &m)| m)
            .map(|(t, _)| t.iter().map(|x| x * x).sum::<f64>())
            .sum::<f64>()
            .sqrt();
        let scale = if max_grad_norm > 0.0 && norm > max_grad_norm { max_grad_norm / norm } else { 1.0 };
        self.state.step += 1;
        let b1t = 1.0 - self.beta1.powi(self.state.step as i32);
        let b2t = 1.0 - self.beta2.powi(self.state.step as i32);
        for (k, p) in params.tensors_mut().into_iter().enumerate() {
            if !mask[k] {
                continue;
            }
            let (m, v) = (&mut self.state.m[k], &mut self.state.v[k]);
            for i in 0..p.len() {
                let gi = g[k][i] * scale;
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                p[i] -= self.lr * (m[i] / b1t) / ((v[i] / b2t).sqrt() + self.eps);
            }
        }
        norm
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct UpdateStats {
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    /// Mean latent KL to the standard normal prior.
    pub latent_kl: f64,
    /// `β · latent_kl`, the KL term's contribution to the loss.
    pub kl_penalty: f64,
    pub approx_kl: f64,
    pub clip_fraction: f64,
    pub grad_norm: f64,
    pub minibatches: usize,
}

/// Epochs of shuffled minibatch Adam steps on a batch with advantages.
pub fn ppo_update(
    params: &mut PolicyParams,
    adam: &mut Adam,
    batch: &TrajectoryBatch,
    cfg: &PpoConfig,
    seed: u64,
) -> Result<UpdateStats, TrainError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..batch.len()).collect();
    let mb = cfg.minibatch_size.min(batch.len()).max(1);
    let mut stats = UpdateStats::default();
    for _ in 0..cfg.epochs_per_update {
        order.shuffle(&mut rng);
        for chunk in order.chunks(mb) {
            let items: Vec<&Transition> = chunk.iter().map(|&i| &batch.transitions[i]).collect();
            let mut grads = params.zeros_like();
            let terms = ppo_loss_grad(params, &items, cfg, &mut grads)?;
            if !terms.total.is_finite() || !terms.value_loss.is_finite() {
                return Err(TrainError::NonFinite {
                    update: batch.snapshot,
                    what: "loss".into(),
                    diagnostics: format!("{terms:?}"),
                });
            }
            let norm = adam.step(params, &grads, cfg.max_grad_norm);
            if !norm.is_finite() {
                return Err(TrainError::NonFinite {
                    update: batch.snapshot,
                    what: "gradient".into(),
                    diagnostics: format!("{terms:?}"),
                });
            }
            stats.policy_loss += terms.policy_loss;
            stats.value_loss += terms.value_loss;
            stats.entropy += terms.entropy;
            stats.latent_kl += terms.latent_kl;
            stats.approx_kl += terms.approx_kl;
            stats.clip_fraction += terms.clip_fraction;
            stats.grad_norm += norm;
            stats.minibatches += 1;
        }
    }
    let n = stats.minibatches.max(1) as f64;
    stats.policy_loss /= n;
    stats.value_loss /= n;
    stats.entropy /= n;
    stats.latent_kl /= n;
    stats.approx_kl /= n;
    stats.clip_fraction /= n;
    stats.grad_norm /= n;
    stats.kl_penalty = cfg.kl_beta * stats.latent_kl;
    if !params.is_finite() {
        return Err(TrainError::NonFinite { update: batch.snapshot, what: "parameters".into(), diagnostics: format!("{stats:?}") });
    }
    Ok(stats)
}
