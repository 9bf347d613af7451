//! Offline meta-policy training: REINFORCE with a moving-average baseline
//! over episodes whose mode is drawn from the prior `ρ_z`.

use rand::distributions::{Distribution, WeightedIndex};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{ActionDistribution, Arch, PolicyParams};
use crate::env::{Action, Mode, Observation, SimConfig, Simulator};
use crate::error::{Error, Result};
use crate::rng;

/// Training environments: modes with prior weights, and the initial gaps to mix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainEnvs {
    pub sim: SimConfig,
    pub modes: Vec<Mode>,
    pub prior: Vec<f64>,
    pub gaps: Vec<f64>,
}

impl TrainEnvs {
    pub fn new(sim: SimConfig, modes: Vec<Mode>, prior: Vec<f64>, gaps: Vec<f64>) -> Result<Self> {
        let envs = TrainEnvs {
            sim,
            modes,
            prior,
            gaps,
        };
        envs.validate()?;
        Ok(envs)
    }

    fn validate(&self) -> Result<()> {
        if self.modes.is_empty() || self.modes.len() != self.prior.len() {
            return Err(Error::Config(format!(
                "{} modes but {} prior weights",
                self.modes.len(),
                self.prior.len()
            )));
        }
        if self.prior.iter().any(|w| !(w.is_finite() && *w >= 0.0)) || self.prior.iter().all(|w| *w == 0.0) {
            return Err(Error::Config("mode prior needs non-negative weights with positive mass".into()));
        }
        if self.gaps.is_empty() {
            return Err(Error::Config("no initial gaps to train on".into()));
        }
        for m in &self.modes {
            m.validate()?;
        }
        for &g in &self.gaps {
            self.sim.clone().with_gap(g).validate()?;
        }
        Ok(())
    }

    /// Draw the simulator for episode `seed`: mode from the prior, gap uniformly.
    fn draw(&self, seed: u64) -> Result<Simulator> {
        let mut r = rng::stream(seed, 7);
        let mode_ix = WeightedIndex::new(&self.prior)
            .map_err(|e| Error::Config(format!("mode prior: {e}")))?
            .sample(&mut r);
        let gap = self.gaps[r.gen_range(0..self.gaps.len())];
        Simulator::new(self.sim.clone().with_gap(gap), self.modes[mode_ix].clone())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub episodes: usize,
    pub batch_episodes: usize,
    pub learning_rate: f64,
    pub gamma: f64,
    pub baseline: bool,
    /// Smoothing rate of the per-timestep return baseline.
    pub baseline_rate: f64,
    /// Weight of the policy-entropy bonus in the training objective.
    pub entropy_bonus: f64,
    pub hidden: usize,
    pub seed: u64,
    /// Held-out evaluation episodes run after training (0 disables).
    pub eval_episodes: usize,
    /// Required improvement of the trained policy's mean return over the random policy's.
    pub margin: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            episodes: 30_000,
            batch_episodes: 16,
            learning_rate: 3e-3,
            gamma: 0.99,
            baseline: true,
            baseline_rate: 0.05,
            entropy_bonus: 0.02,
            hidden: 64,
            seed: 1,
            eval_episodes: 200,
            margin: 0.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(Error::Config(format!("discount {} outside (0, 1]", self.gamma)));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(Error::Config(format!("learning rate {} invalid", self.learning_rate)));
        }
        if self.batch_episodes == 0 {
            return Err(Error::Config("batch_episodes must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalComparison {
    pub policy_mean: f64,
    pub random_mean: f64,
    pub margin: f64,
}

impl EvalComparison {
    pub fn beats_random(&self) -> bool {
        self.policy_mean > self.random_mean + self.margin
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: PolicyParams,
    /// Mean undiscounted return of each training batch.
    pub batch_returns: Vec<f64>,
    pub eval: Option<EvalComparison>,
}

struct Episode {
    obs: Vec<Observation>,
    actions: Vec<Action>,
    rewards: Vec<f64>,
}

fn run_episode<F>(sim: &Simulator, seed: u64, mut dist: F) -> Result<Episode>
where
    F: FnMut(&Observation) -> ActionDistribution,
{
    let (mut state, mut obs) = sim.reset(seed);
    let mut env_rng = sim.step_stream(seed);
    let mut act_rng = rng::stream(seed, 2);
    let mut ep = Episode {
        obs: Vec::new(),
        actions: Vec::new(),
        rewards: Vec::new(),
    };
    while !state.is_terminal() {
        let a = dist(&obs).sample(&mut act_rng);
        let step = sim.step(&state, &obs, a, &mut env_rng)?;
        ep.obs.push(obs);
        ep.actions.push(a);
        ep.rewards.push(step.reward);
        state = step.next_state;
        obs = step.obs;
    }
    Ok(ep)
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    const B1: f64 = 0.9;
    const B2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(d: usize) -> Self {
        Adam {
            m: vec![0.0; d],
            v: vec![0.0; d],
            t: 0,
        }
    }

    /// Ascent step along `grad`.
    fn step(&mut self, theta: &mut [f64], grad: &[f64], lr: f64) {
        self.t += 1;
        let c1 = 1.0 - Self::B1.powi(self.t);
        let c2 = 1.0 - Self::B2.powi(self.t);
        for i in 0..theta.len() {
            self.m[i] = Self::B1 * self.m[i] + (1.0 - Self::B1) * grad[i];
            self.v[i] = Self::B2 * self.v[i] + (1.0 - Self::B2) * grad[i] * grad[i];
            theta[i] += lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + Self::EPS);
        }
    }
}

/// Train the meta-policy maximizing the prior-mixed expected discounted return.
pub fn train_meta(envs: &TrainEnvs, config: &TrainConfig) -> Result<TrainOutcome> {
    config.validate()?;
    envs.validate()?;
    let mut init_rng = rng::stream(config.seed, 0);
    let mut params = PolicyParams::init(Arch::with_hidden(config.hidden), config.seed, &mut init_rng)?;
    let d = params.dim();
    let mut adam = Adam::new(d);
    let mut baseline: Vec<f64> = Vec::new();
    let mut batch_returns = Vec::new();

    let n_batches = config.episodes.div_ceil(config.batch_episodes);
    let mut episode_ix = 0usize;
    for _ in 0..n_batches {
        let mut grad = vec![0.0; d];
        let mut batch_total = 0.0;
        let mut batch_n = 0usize;
        for _ in 0..config.batch_episodes {
            if episode_ix >= config.episodes {
                break;
            }
            let seed = rng::derive_seed(config.seed, &[1, episode_ix as u64]);
            let sim = envs.draw(seed)?;
            let ep = run_episode(&sim, seed, |o| ActionDistribution(params.forward(o).probs()))?;
            batch_total += ep.rewards.iter().sum::<f64>();
            batch_n += 1;

            let mut returns = vec![0.0; ep.rewards.len()];
            let mut g = 0.0;
            for t in (0..ep.rewards.len()).rev() {
                g = ep.rewards[t] + config.gamma * g;
                returns[t] = g;
            }
            if baseline.len() < returns.len() {
                baseline.resize(returns.len(), 0.0);
            }
            for t in 0..returns.len() {
                let adv = if config.baseline { returns[t] - baseline[t] } else { returns[t] };
                let fwd = params.forward(&ep.obs[t]);
                params.accumulate_log_prob_grad(&fwd, ep.actions[t], adv, &mut grad);
                if config.entropy_bonus > 0.0 {
                    params.accumulate_entropy_grad(&fwd, config.entropy_bonus, &mut grad);
                }
            }
            if config.baseline {
                for t in 0..returns.len() {
                    baseline[t] += config.baseline_rate * (returns[t] - baseline[t]);
                }
            }
            episode_ix += 1;
        }
        if batch_n == 0 {
            break;
        }
        let scale = 1.0 / batch_n as f64;
        grad.iter_mut().for_each(|g| *g *= scale);
        let mean_return = batch_total * scale;
        if !mean_return.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
            return Err(Error::TrainingDiverged {
                episode: episode_ix,
                detail: format!("batch mean return {mean_return}, gradient norm {norm}"),
            });
        }
        batch_returns.push(mean_return);
        adam.step(&mut params.theta, &grad, config.learning_rate);
        if let Some(i) = params.theta.iter().position(|v| !v.is_finite()) {
            return Err(Error::TrainingDiverged {
                episode: episode_ix,
                detail: format!("parameter {i} became non-finite"),
            });
        }
    }

    let eval = if config.eval_episodes > 0 {
        let eval_seed = rng::derive_seed(config.seed, &[2]);
        let policy_mean = evaluate_policy(&params, envs, config.eval_episodes, eval_seed)?;
        let random_mean = evaluate_random(envs, config.eval_episodes, eval_seed)?;
        Some(EvalComparison {
            policy_mean,
            random_mean,
            margin: config.margin,
        })
    } else {
        None
    };
    Ok(TrainOutcome {
        params,
        batch_returns,
        eval,
    })
}

fn evaluate_with<F>(envs: &TrainEnvs, episodes: usize, seed: u64, mut dist: F) -> Result<f64>
where
    F: FnMut(&Observation) -> ActionDistribution,
{
    if episodes == 0 {
        return Err(Error::Usage("evaluation needs at least one episode".into()));
    }
    let mut total = 0.0;
    for i in 0..episodes {
        let ep_seed = rng::derive_seed(seed, &[i as u64]);
        let sim = envs.draw(ep_seed)?;
        total += run_episode(&sim, ep_seed, &mut dist)?.rewards.iter().sum::<f64>();
    }
    Ok(total / episodes as f64)
}

/// Mean undiscounted return of `params` over `episodes` prior-mixed episodes.
pub fn evaluate_policy(params: &PolicyParams, envs: &TrainEnvs, episodes: usize, seed: u64) -> Result<f64> {
    evaluate_with(envs, episodes, seed, |o| ActionDistribution(params.forward(o).probs()))
}

/// Same episodes as [`evaluate_policy`] driven by the uniform random policy.
pub fn evaluate_random(envs: &TrainEnvs, episodes: usize, seed: u64) -> Result<f64> {
    evaluate_with(envs, episodes, seed, |_| ActionDistribution::uniform())
}
