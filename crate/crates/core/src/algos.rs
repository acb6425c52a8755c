//! Training algorithms over a shared [`UnifiedParams`]: semi-gradient
//! Q-learning with a replay buffer, advantage actor-critic, REINFORCE, and
//! the soft target update. All of them read and write the same θ layout, so
//! switching algorithm mid-run needs no conversion.

use std::collections::VecDeque;

use nalgebra::DVector;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::diffqp::QpError;
use crate::envs::Env;
use crate::unified::{Evaluation, PolicySample, ThetaGrad, UnifiedParams};

#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub x: DVector<f64>,
    pub u: DVector<f64>,
    pub reward: f64,
    pub x_next: DVector<f64>,
    pub done: bool,
    pub epsilon: Option<DVector<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub gamma: f64,
    pub alpha_actor: f64,
    pub alpha_critic: f64,
    pub tau_soft: f64,
    pub t_max: usize,
    pub episodes: usize,
    pub explore_sigma: f64,
    pub batch: usize,
    pub seed: u64,
    pub grad_clip: f64,
    pub replay_capacity: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            gamma: 1.0,
            alpha_actor: 1e-3,
            alpha_critic: 1e-3,
            tau_soft: 0.1,
            t_max: 200,
            episodes: 100,
            explore_sigma: 0.1,
            batch: 16,
            seed: 0,
            grad_clip: 10.0,
            replay_capacity: 10_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct EpisodeStats {
    pub episode_return: f64,
    pub steps: usize,
    pub critic_loss: f64,
    pub td_mean_sq: f64,
    pub updates: usize,
}

/// `target′ = τ·θ + (1 − τ)·target` on every trainable entry.
pub fn soft_update(target: &UnifiedParams, theta: &UnifiedParams, tau_soft: f64) -> UnifiedParams {
    let t = target.to_flat();
    let p = theta.to_flat();
    let blended: Vec<f64> = t.iter().zip(&p).map(|(a, b)| tau_soft * b + (1.0 - tau_soft) * a).collect();
    let mut out = target.clone();
    out.set_flat(&blended);
    out
}

/// `R_i = r_i + γ·R_{i+1}` seeded with `R_n = bootstrap`.
pub fn returns_to_go(rewards: &[f64], bootstrap: f64, gamma: f64) -> Vec<f64> {
    let mut out = vec![0.0; rewards.len()];
    let mut r = bootstrap;
    for (i, reward) in rewards.iter().enumerate().rev() {
        r = reward + gamma * r;
        out[i] = r;
    }
    out
}

/// `T = r + γ·V_target(x′)·(1 − done) − Q_θ(x, u)`.
pub fn td_error(theta: &UnifiedParams, target: &UnifiedParams, tr: &Transition, gamma: f64) -> Result<f64, QpError> {
    let bootstrap = if tr.done { 0.0 } else { target.value(&tr.x_next)?.0 };
    let q = theta.q_value(&tr.x, &tr.u)?.0;
    Ok(tr.reward + gamma * bootstrap - q)
}

#[derive(Debug, Clone, PartialEq)]
pub struct UpdateStats {
    pub mean_td_sq: f64,
    pub grad_norm: f64,
}

/// Gradient of the batch loss `½·mean T²` with the bootstrap held fixed.
pub fn q_learning_gradient(
    theta: &UnifiedParams,
    target: &UnifiedParams,
    batch: &[Transition],
    gamma: f64,
) -> Result<(ThetaGrad, f64), QpError> {
    assert!(!batch.is_empty(), "empty batch");
    let mut grad = ThetaGrad::zeros(theta.n_params());
    let mut td_sq = 0.0;
    let n = batch.len() as f64;
    for tr in batch {
        let bootstrap = if tr.done { 0.0 } else { target.value(&tr.x_next)?.0 };
        let (q, ev) = theta.q_value(&tr.x, &tr.u)?;
        let t = tr.reward + gamma * bootstrap - q;
        td_sq += t * t;
        if t != 0.0 {
            let g = theta.chain(&tr.x, &ev, &DVector::zeros(theta.n_mu()), 1.0)?;
            grad.add_scaled(&g, -t / n);
        }
    }
    Ok((grad, td_sq / n))
}

/// One semi-gradient step `θ′ = θ − α_c·∇(½·mean T²)` with norm clipping.
pub fn q_learning_update(
    theta: &UnifiedParams,
    target: &UnifiedParams,
    batch: &[Transition],
    cfg: &TrainConfig,
) -> Result<(UnifiedParams, UpdateStats), QpError> {
    let (mut grad, mean_td_sq) = q_learning_gradient(theta, target, batch, cfg.gamma)?;
    let grad_norm = grad.clip_norm(cfg.grad_clip);
    let mut next = theta.clone();
    next.apply(&grad, -cfg.alpha_critic);
    Ok((next, UpdateStats { mean_td_sq, grad_norm }))
}

/// FIFO transition memory with uniform sampling.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplayBuffer {
    capacity: usize,
    items: VecDeque<Transition>,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity,
            items: VecDeque::with_capacity(capacity.min(1024)),
        }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn push(&mut self, tr: Transition) {
        if self.items.len() == self.capacity {
            self.items.pop_front();
        }
        self.items.push_back(tr);
    }

    /// `n` transitions drawn uniformly with replacement.
    pub fn sample(&self, n: usize, rng: &mut impl Rng) -> Vec<Transition> {
        (0..n)
            .map(|_| self.items[rng.random_range(0..self.items.len())].clone())
            .collect()
    }
}

fn standard_normal(m: usize, rng: &mut impl Rng) -> DVector<f64> {
    DVector::from_fn(m, |_, _| rng.sample::<f64, _>(StandardNormal))
}

/// One Q-learning episode from `x0`: Gaussian exploration around the greedy
/// policy, clipped to the input box, one replayed batch update and one soft
/// target update per environment step once the buffer holds a full batch.
#[allow(clippy::too_many_arguments)]
pub fn q_learning_episode(
    env: &Env,
    theta: &mut UnifiedParams,
    target: &mut UnifiedParams,
    buffer: &mut ReplayBuffer,
    cfg: &TrainConfig,
    x0: &DVector<f64>,
    explore_rng: &mut impl Rng,
    replay_rng: &mut impl Rng,
) -> Result<EpisodeStats, QpError> {
    let mut stats = EpisodeStats::default();
    let input_box = env.spec().input_box;
    let mut x = x0.clone();
    let mut td_sum = 0.0;
    let mut discount = 1.0;
    if env.is_terminal(&x) {
        return Ok(stats);
    }
    while stats.steps < cfg.t_max {
        let eps = standard_normal(theta.m_u(), explore_rng);
        let u = input_box.clip(&(theta.policy(&x)? + eps * cfg.explore_sigma));
        let step = env.step(&x, &u);
        stats.episode_return += discount * step.reward;
        discount *= cfg.gamma;
        stats.steps += 1;
        buffer.push(Transition {
            x: x.clone(),
            u,
            reward: step.reward,
            x_next: step.next_state.clone(),
            done: step.done,
            epsilon: None,
        });
        if buffer.len() >= cfg.batch {
            let batch = buffer.sample(cfg.batch, replay_rng);
            let (next, upd) = q_learning_update(theta, target, &batch, cfg)?;
            *theta = next;
            *target = soft_update(target, theta, cfg.tau_soft);
            td_sum += upd.mean_td_sq;
            stats.updates += 1;
        }
        x = step.next_state;
        if step.done {
            break;
        }
    }
    if stats.updates > 0 {
        stats.td_mean_sq = td_sum / stats.updates as f64;
        stats.critic_loss = stats.td_mean_sq;
    }
    Ok(stats)
}

struct Rollout {
    steps: Vec<(Transition, Evaluation)>,
    last_state: DVector<f64>,
    terminal: bool,
}

fn rollout_stochastic(
    env: &Env,
    theta: &UnifiedParams,
    x0: &DVector<f64>,
    t_max: usize,
    rng: &mut impl Rng,
) -> Result<Rollout, QpError> {
    let mut steps = Vec::new();
    let mut x = x0.clone();
    let mut terminal = env.is_terminal(&x);
    while !terminal && steps.len() < t_max {
        let ev = theta.evaluate(&x, None)?;
        let mean = &theta.k * &ev.sol.mu_star;
        let eps = standard_normal(theta.m_u(), rng);
        let u = &mean + theta.noise_factor() * &eps;
        let step = env.step(&x, &u);
        terminal = step.done;
        steps.push((
            Transition {
                x: x.clone(),
                u,
                reward: step.reward,
                x_next: step.next_state.clone(),
                done: step.done,
                epsilon: Some(eps),
            },
            ev,
        ));
        x = step.next_state;
    }
    Ok(Rollout {
        steps,
        last_state: x,
        terminal,
    })
}

/// One episode of advantage actor-critic from `x0`. Every quantity is
/// evaluated under the θ held at the start of the episode; the accumulated
/// actor and critic gradients (each clipped to `grad_clip`) are applied once
/// at the end, after which the target is soft-updated. The bootstrap for a
/// truncated episode uses the target parameters.
pub fn a2c_episode(
    env: &Env,
    theta: &UnifiedParams,
    target: &UnifiedParams,
    cfg: &TrainConfig,
    x0: &DVector<f64>,
    rng: &mut impl Rng,
) -> Result<(UnifiedParams, UnifiedParams, EpisodeStats), QpError> {
    let ro = rollout_stochastic(env, theta, x0, cfg.t_max, rng)?;
    let mut stats = EpisodeStats {
        steps: ro.steps.len(),
        ..Default::default()
    };
    if ro.steps.is_empty() {
        return Ok((theta.clone(), target.clone(), stats));
    }
    let bootstrap = if ro.terminal { 0.0 } else { target.value(&ro.last_state)?.0 };
    let rewards: Vec<f64> = ro.steps.iter().map(|(t, _)| t.reward).collect();
    let mut discount = 1.0;
    for r in &rewards {
        stats.episode_return += discount * r;
        discount *= cfg.gamma;
    }
    let returns = returns_to_go(&rewards, bootstrap, cfg.gamma);
    let values: Vec<f64> = ro.steps.iter().map(|(_, ev)| ev.value()).collect();

    let n = theta.n_params();
    let mut actor = ThetaGrad::zeros(n);
    let mut critic = ThetaGrad::zeros(n);
    let mut loss = 0.0;
    let mut td_sq = 0.0;
    for (i, (tr, ev)) in ro.steps.iter().enumerate() {
        let adv = returns[i] - values[i];
        loss += adv * adv;
        let v_next = if i + 1 < values.len() {
            values[i + 1]
        } else {
            bootstrap
        };
        let td = tr.reward + cfg.gamma * v_next - values[i];
        td_sq += td * td;
        actor.add_scaled(&theta.grad_log_prob_at(&tr.x, ev, &tr.u, adv)?, 1.0);
        // −∂(R − V)²/∂θ = 2(R − V)·∂V/∂θ
        critic.add_scaled(&theta.chain(&tr.x, ev, &DVector::zeros(theta.n_mu()), 2.0 * adv)?, 1.0);
    }
    stats.critic_loss = loss / ro.steps.len() as f64;
    stats.td_mean_sq = td_sq / ro.steps.len() as f64;
    actor.clip_norm(cfg.grad_clip);
    critic.clip_norm(cfg.grad_clip);
    let mut step = ThetaGrad::zeros(n);
    step.add_scaled(&actor, cfg.alpha_actor);
    step.add_scaled(&critic, cfg.alpha_critic);
    let mut next = theta.clone();
    next.apply(&step, 1.0);
    let next_target = soft_update(target, &next, cfg.tau_soft);
    stats.updates = 1;
    Ok((next, next_target, stats))
}

/// `θ′ = θ + α_a · mean over steps of ∇log π(u|x)·R`, with `R` the
/// return-to-go of each step. Trajectories must carry the stored ε.
pub fn reinforce_update(
    theta: &UnifiedParams,
    trajectories: &[Vec<Transition>],
    cfg: &TrainConfig,
) -> Result<UnifiedParams, QpError> {
    let mut grad = ThetaGrad::zeros(theta.n_params());
    let mut count = 0usize;
    for traj in trajectories {
        let rewards: Vec<f64> = traj.iter().map(|t| t.reward).collect();
        let returns = returns_to_go(&rewards, 0.0, cfg.gamma);
        for (tr, ret) in traj.iter().zip(returns) {
            count += 1;
            if ret == 0.0 {
                continue;
            }
            let sample = PolicySample {
                u: tr.u.clone(),
                mean: tr.u.clone(),
                log_prob: 0.0,
                epsilon: tr.epsilon.clone().unwrap_or_else(|| DVector::zeros(tr.u.len())),
            };
            grad.add_scaled(&theta.grad_log_prob(&tr.x, &sample, ret)?, 1.0);
        }
    }
    if count == 0 {
        return Ok(theta.clone());
    }
    grad.scale(1.0 / count as f64);
    grad.clip_norm(cfg.grad_clip);
    let mut next = theta.clone();
    next.apply(&grad, cfg.alpha_actor);
    Ok(next)
}

/// Samples one trajectory from `x0` and applies [`reinforce_update`] to it.
pub fn reinforce_episode(
    env: &Env,
    theta: &UnifiedParams,
    target: &UnifiedParams,
    cfg: &TrainConfig,
    x0: &DVector<f64>,
    rng: &mut impl Rng,
) -> Result<(UnifiedParams, UnifiedParams, EpisodeStats), QpError> {
    let ro = rollout_stochastic(env, theta, x0, cfg.t_max, rng)?;
    let traj: Vec<Transition> = ro.steps.into_iter().map(|(t, _)| t).collect();
    let mut stats = EpisodeStats {
        steps: traj.len(),
        ..Default::default()
    };
    let mut discount = 1.0;
    for t in &traj {
        stats.episode_return += discount * t.reward;
        discount *= cfg.gamma;
    }
    if traj.is_empty() {
        return Ok((theta.clone(), target.clone(), stats));
    }
    let next = reinforce_update(theta, &[traj], cfg)?;
    let next_target = soft_update(target, &next, cfg.tau_soft);
    stats.updates = 1;
    Ok((next, next_target, stats))
}
