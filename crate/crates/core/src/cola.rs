//! Conjectural lookahead adaptation: an importance-weighted K-step surrogate
//! of the adapted policy's return, maximized under a KL trust region around
//! the current parameters.

use std::path::Path;

use rand::distributions::{Distribution, WeightedIndex};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::belief::Belief;
use crate::env::{Action, Mode, Observation, SimConfig, Simulator, WorldState, N_ACTIONS};
use crate::error::{Error, Result};
use crate::io;
use crate::policy::{kl_categorical, ActionDistribution, PolicyParams, PolicyVersion};
use crate::rng::{self, Stream};

/// Importance ratios are clipped at `exp(LOG_RATIO_CAP)`.
pub const LOG_RATIO_CAP: f64 = 20.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ColaConfig {
    /// Lookahead horizon `K`.
    pub k: usize,
    /// Samples per conjecture `M`.
    pub m: usize,
    /// Trust-region radius `δ` on the mean KL.
    pub delta: f64,
    pub max_iters: usize,
    pub max_backtracks: usize,
    /// Adapt on every `cadence`-th step.
    pub cadence: u32,
    /// Which windows of a bucket the conjecture draws from.
    pub conditioning: Conditioning,
}

impl Default for ColaConfig {
    fn default() -> Self {
        ColaConfig {
            k: 30,
            m: 16,
            delta: 0.01,
            max_iters: 5,
            max_backtracks: 20,
            cadence: 10,
            conditioning: Conditioning::Nearest { pool: 64 },
        }
    }
}

impl ColaConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.m == 0 {
            return Err(Error::Config("lookahead needs K >= 1 and M >= 1".into()));
        }
        if !(self.delta.is_finite() && self.delta >= 0.0) {
            return Err(Error::Config(format!("trust region delta must be non-negative, got {}", self.delta)));
        }
        if self.cadence == 0 {
            return Err(Error::Config("adaptation cadence must be at least 1".into()));
        }
        Ok(())
    }
}

/// A K-step window of one behavior-policy episode.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LookaheadSample {
    pub start_t: u32,
    pub start_state: WorldState,
    /// `s_0 ..= s_K`; entries after the episode ended repeat the terminal observation.
    pub states: Vec<Observation>,
    pub actions: Vec<Action>,
    pub rewards: Vec<f64>,
    /// `log μ(a_k | s_k)` under the behavior policy.
    pub behavior_log_probs: Vec<f64>,
    /// Steps before the episode ended; later steps are absorbing padding with zero reward.
    pub valid: usize,
}

impl LookaheadSample {
    pub fn ret(&self) -> f64 {
        self.rewards.iter().sum()
    }

    fn validate(&self, k: usize) -> Result<()> {
        if self.states.len() != k + 1
            || self.actions.len() != k
            || self.rewards.len() != k
            || self.behavior_log_probs.len() != k
            || self.valid > k
        {
            return Err(Error::Usage(format!("lookahead sample at t={} does not have length K={k}", self.start_t)));
        }
        Ok(())
    }
}

/// Behavior-policy windows bucketed by the mode that generated them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleBank {
    pub k: usize,
    pub version: PolicyVersion,
    pub sim: SimConfig,
    pub modes: Vec<Mode>,
    /// Parallel to `modes`.
    pub buckets: Vec<Vec<LookaheadSample>>,
}

const BANK_FORMAT: &str = "crossbench.sample-bank";
const BANK_VERSION: u32 = 1;

impl SampleBank {
    pub fn is_empty(&self) -> bool {
        self.buckets.iter().all(Vec::is_empty)
    }

    pub fn len(&self) -> usize {
        self.buckets.iter().map(Vec::len).sum()
    }

    pub fn counts(&self) -> Vec<(String, usize)> {
        self.modes.iter().zip(&self.buckets).map(|(m, b)| (m.id.clone(), b.len())).collect()
    }

    pub fn bucket(&self, mode_id: &str) -> Option<&[LookaheadSample]> {
        self.modes.iter().position(|m| m.id == mode_id).map(|i| self.buckets[i].as_slice())
    }

    pub fn validate(&self) -> Result<()> {
        if self.modes.len() != self.buckets.len() {
            return Err(Error::Usage("sample bank has a bucket count different from its mode list".into()));
        }
        for s in self.buckets.iter().flatten() {
            s.validate(self.k)?;
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.validate()?;
        io::save_versioned(path, BANK_FORMAT, BANK_VERSION, self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bank: SampleBank = io::load_versioned(path, BANK_FORMAT, BANK_VERSION)?;
        bank.validate().map_err(|e| Error::corrupt(path, e))?;
        Ok(bank)
    }

    /// Merge windows collected for further modes under the same policy.
    pub fn extend(&mut self, other: SampleBank) -> Result<()> {
        if other.k != self.k || other.version != self.version {
            return Err(Error::StaleBank {
                bank: format!("K={} policy {}", other.k, other.version),
                policy: format!("K={} policy {}", self.k, self.version),
            });
        }
        for (mode, bucket) in other.modes.into_iter().zip(other.buckets) {
            match self.modes.iter().position(|m| m.id == mode.id) {
                Some(i) => self.buckets[i].extend(bucket),
                None => {
                    self.modes.push(mode);
                    self.buckets.push(bucket);
                }
            }
        }
        Ok(())
    }
}

/// How the bank is collected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BankSpec {
    pub episodes_per_mode: usize,
    pub k: usize,
    /// Episode `i` of each mode starts at `gaps[i % gaps.len()]`.
    pub gaps: Vec<f64>,
    pub seed: u64,
}

impl Default for BankSpec {
    fn default() -> Self {
        BankSpec {
            episodes_per_mode: 60,
            k: 30,
            gaps: crate::env::STANDARD_GAPS.to_vec(),
            seed: 11,
        }
    }
}

struct Step {
    state: WorldState,
    obs: Observation,
    action: Action,
    log_prob: f64,
    reward: f64,
}

fn behavior_episode(params: &PolicyParams, sim: &Simulator, seed: u64) -> Result<(Vec<Step>, Observation)> {
    let (mut state, mut obs) = sim.reset(seed);
    let mut env_rng = sim.step_stream(seed);
    let mut act_rng = rng::stream(seed, 2);
    let mut steps = Vec::new();
    while !state.is_terminal() {
        let fwd = params.forward(&obs);
        let a = ActionDistribution(fwd.probs()).sample(&mut act_rng);
        let out = sim.step(&state, &obs, a, &mut env_rng)?;
        steps.push(Step {
            state,
            obs,
            action: a,
            log_prob: fwd.log_probs[a.index()],
            reward: out.reward,
        });
        state = out.next_state;
        obs = out.obs;
    }
    Ok((steps, obs))
}

/// Roll out `params` in every mode and keep every K-step window.
pub fn build_sample_bank(params: &PolicyParams, sim: &SimConfig, modes: &[Mode], spec: &BankSpec) -> Result<SampleBank> {
    params.check()?;
    if spec.k == 0 {
        return Err(Error::Config("bank horizon K must be at least 1".into()));
    }
    if spec.gaps.is_empty() {
        return Err(Error::Config("bank needs at least one initial gap".into()));
    }
    let k = spec.k;
    let mut buckets = Vec::with_capacity(modes.len());
    for (j, mode) in modes.iter().enumerate() {
        let mut bucket = Vec::new();
        for i in 0..spec.episodes_per_mode {
            let gap = spec.gaps[i % spec.gaps.len()];
            let simulator = Simulator::new(sim.clone().with_gap(gap), mode.clone())?;
            let seed = rng::derive_seed(spec.seed, &[j as u64, i as u64]);
            let (steps, terminal_obs) = behavior_episode(params, &simulator, seed)?;
            let n = steps.len();
            for t in 0..n {
                let valid = k.min(n - t);
                let mut states: Vec<Observation> = steps[t..t + valid].iter().map(|s| s.obs).collect();
                let pad = if t + valid < n { steps[t + valid].obs } else { terminal_obs };
                states.resize(k + 1, pad);
                let mut actions: Vec<Action> = steps[t..t + valid].iter().map(|s| s.action).collect();
                let mut rewards: Vec<f64> = steps[t..t + valid].iter().map(|s| s.reward).collect();
                let mut logps: Vec<f64> = steps[t..t + valid].iter().map(|s| s.log_prob).collect();
                actions.resize(k, Action::FULL_BRAKE);
                rewards.resize(k, 0.0);
                logps.resize(k, 0.0);
                bucket.push(LookaheadSample {
                    start_t: steps[t].state.t,
                    start_state: steps[t].state.clone(),
                    states,
                    actions,
                    rewards,
                    behavior_log_probs: logps,
                    valid,
                });
            }
        }
        log::debug!("bank bucket `{}`: {} windows", mode.id, bucket.len());
        buckets.push(bucket);
    }
    Ok(SampleBank {
        k,
        version: params.version,
        sim: sim.clone(),
        modes: modes.to_vec(),
        buckets,
    })
}

/// Restricts each bucket to the windows relevant to the current situation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Conditioning {
    /// Every window of the bucket.
    Unconditioned,
    /// Windows starting within `slack` steps of the current step.
    Time { slack: u32 },
    /// The `pool` windows whose first observation is closest to the current one.
    Nearest { pool: usize },
}

/// Where the agent is when it conjectures.
#[derive(Clone, Copy, Debug)]
pub struct Here<'a> {
    pub t: u32,
    pub obs: &'a Observation,
}

/// Scaled distance between two start situations. Windows that disagree on
/// whether the pedestrian is visible are far apart.
fn situation_distance(a: &Observation, ta: u32, b: &Observation, tb: u32) -> f64 {
    let mut d = ((a.d_c() - b.d_c()) / 2.0).powi(2) + (a.v_c() - b.v_c()).powi(2);
    d += ((f64::from(ta) - f64::from(tb)) / 10.0).powi(2);
    match (a.pedestrian_masked(), b.pedestrian_masked()) {
        (true, true) => {}
        (false, false) => {
            d += ((a.d_p() - b.d_p()) / 0.3).powi(2) + ((a.v_p() - b.v_p()) / 0.5).powi(2) + (a.light() - b.light()).powi(2);
        }
        _ => d += 1e6,
    }
    d
}

fn condition<'a>(bucket: &'a [LookaheadSample], cond: Conditioning, here: Option<Here<'_>>) -> Vec<&'a LookaheadSample> {
    let all = || bucket.iter().collect::<Vec<_>>();
    let Some(here) = here else {
        return all();
    };
    match cond {
        Conditioning::Unconditioned => all(),
        Conditioning::Time { slack } => {
            let close: Vec<_> = bucket.iter().filter(|s| s.start_t.abs_diff(here.t) <= slack).collect();
            if close.is_empty() {
                all()
            } else {
                close
            }
        }
        Conditioning::Nearest { pool } => {
            let mut scored: Vec<(f64, &LookaheadSample)> = bucket
                .iter()
                .map(|s| (situation_distance(here.obs, here.t, &s.states[0], s.start_t), s))
                .collect();
            let keep = pool.clamp(1, scored.len().max(1));
            if keep < scored.len() {
                scored.select_nth_unstable_by(keep - 1, |x, y| x.0.total_cmp(&y.0));
                scored.truncate(keep);
            }
            scored.into_iter().map(|(_, s)| s).collect()
        }
    }
}

/// A batch of windows drawn for one adaptation step.
#[derive(Clone, Debug)]
pub struct Conjecture<'a> {
    pub version: PolicyVersion,
    pub samples: Vec<&'a LookaheadSample>,
}

/// Draw `m` windows: a mode from the belief, then a window uniformly from its
/// bucket, restricted per `cond` around `here`.
pub fn sample_conjecture<'a>(
    bank: &'a SampleBank,
    belief: &Belief,
    m: usize,
    cond: Conditioning,
    here: Option<Here<'_>>,
    rng: &mut Stream,
) -> Result<Conjecture<'a>> {
    let mut pools: Vec<Vec<&'a LookaheadSample>> = Vec::with_capacity(belief.probs.len());
    for (id, &p) in belief.mode_ids.iter().zip(&belief.probs) {
        let bucket = bank.bucket(id).unwrap_or(&[]);
        if p > 0.0 && bucket.is_empty() {
            return Err(Error::BankCoverage(format!(
                "belief puts {p} on mode `{id}` but the sample bank has no windows for it"
            )));
        }
        pools.push(if p > 0.0 { condition(bucket, cond, here) } else { Vec::new() });
    }
    let weights = WeightedIndex::new(&belief.probs).map_err(|e| Error::Usage(format!("belief weights: {e}")))?;
    let samples = (0..m)
        .map(|_| {
            let pool = &pools[weights.sample(rng)];
            pool[rng.gen_range(0..pool.len())]
        })
        .collect();
    Ok(Conjecture {
        version: bank.version,
        samples,
    })
}

/// Surrogate value, gradient and KL of one candidate on a conjecture.
struct Eval {
    value: f64,
    clipped: usize,
    kl: f64,
}

/// Reference distributions of the trust-region center on every valid state.
struct Center {
    probs: Vec<[f64; N_ACTIONS]>,
    log_probs: Vec<[f64; N_ACTIONS]>,
}

impl Center {
    fn new(params: &PolicyParams, samples: &[&LookaheadSample]) -> Self {
        let mut probs = Vec::new();
        let mut log_probs = Vec::new();
        for s in samples {
            for obs in &s.states[..s.valid] {
                let f = params.forward(obs);
                probs.push(f.probs());
                log_probs.push(f.log_probs);
            }
        }
        Center { probs, log_probs }
    }

    fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }
}

fn evaluate(params: &PolicyParams, samples: &[&LookaheadSample], center: Option<&Center>, mut grad: Option<&mut [f64]>) -> Eval {
    let mut value = 0.0;
    let mut clipped = 0;
    let mut kl = 0.0;
    let mut kl_ix = 0;
    for s in samples {
        let fwds: Vec<_> = s.states[..s.valid].iter().map(|o| params.forward(o)).collect();
        let mut log_ratio = 0.0;
        for (k, f) in fwds.iter().enumerate() {
            log_ratio += f.log_probs[s.actions[k].index()] - s.behavior_log_probs[k];
            if let Some(c) = center {
                kl += kl_categorical(&c.probs[kl_ix], &c.log_probs[kl_ix], &f.log_probs);
                kl_ix += 1;
            }
        }
        let ret = s.ret();
        let ratio = if log_ratio > LOG_RATIO_CAP {
            clipped += 1;
            LOG_RATIO_CAP.exp()
        } else {
            log_ratio.exp()
        };
        value += ratio * ret;
        if let Some(g) = grad.as_deref_mut() {
            if log_ratio <= LOG_RATIO_CAP {
                for (k, f) in fwds.iter().enumerate() {
                    params.accumulate_log_prob_grad(f, s.actions[k], ratio * ret, g);
                }
            }
        }
    }
    let m = samples.len().max(1) as f64;
    if let Some(g) = grad {
        g.iter_mut().for_each(|x| *x /= m);
    }
    Eval {
        value: value / m,
        clipped,
        kl: if kl_ix > 0 { kl / kl_ix as f64 } else { 0.0 },
    }
}

fn check_behavior(theta_old: &PolicyParams, batch: &Conjecture<'_>) -> Result<()> {
    if theta_old.version != batch.version {
        return Err(Error::StaleBank {
            bank: batch.version.to_string(),
            policy: theta_old.version.to_string(),
        });
    }
    Ok(())
}

/// `(1/M) Σ_m [Π_k π(a_k|s_k; θ') / μ(a_k|s_k)] Σ_k r_k`, where `μ` are the
/// stored probabilities of the behavior policy `theta_old`.
pub fn surrogate_objective(theta_new: &PolicyParams, theta_old: &PolicyParams, batch: &Conjecture<'_>) -> Result<f64> {
    check_behavior(theta_old, batch)?;
    theta_new.check()?;
    Ok(evaluate(theta_new, &batch.samples, None, None).value)
}

/// `∇θ'` of [`surrogate_objective`]. Windows with a clipped ratio contribute nothing.
pub fn surrogate_gradient(theta_new: &PolicyParams, theta_old: &PolicyParams, batch: &Conjecture<'_>) -> Result<Vec<f64>> {
    check_behavior(theta_old, batch)?;
    theta_new.check()?;
    let mut g = vec![0.0; theta_new.dim()];
    evaluate(theta_new, &batch.samples, None, Some(&mut g));
    Ok(g)
}

#[derive(Clone, Debug, PartialEq)]
pub struct CloResult {
    pub params: PolicyParams,
    pub surrogate_before: f64,
    pub surrogate_after: f64,
    /// Mean KL from the starting parameters on the batch's states.
    pub kl: f64,
    /// At least one step improved the surrogate inside the trust region.
    pub accepted: bool,
    pub iterations: usize,
    pub backtracks: usize,
    pub clipped: usize,
}

impl CloResult {
    fn unchanged(params: &PolicyParams, value: f64, clipped: usize) -> Self {
        CloResult {
            params: params.clone(),
            surrogate_before: value,
            surrogate_after: value,
            kl: 0.0,
            accepted: false,
            iterations: 0,
            backtracks: 0,
            clipped,
        }
    }
}

/// `ḡᵀ F ḡ` on the center's states: the second-order KL along `dir`, from a
/// finite difference of the log-probabilities.
fn fisher_quadratic(params: &PolicyParams, dir: &[f64], samples: &[&LookaheadSample], center: &Center) -> f64 {
    let norm_inf = dir.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    if norm_inf == 0.0 {
        return 0.0;
    }
    let eps = 1e-6 / norm_inf;
    let shifted = PolicyParams {
        theta: params.theta.iter().zip(dir).map(|(t, d)| t + eps * d).collect(),
        ..params.clone()
    };
    let mut total = 0.0;
    let mut ix = 0;
    for s in samples {
        for obs in &s.states[..s.valid] {
            let p = &center.probs[ix];
            let lp0 = &center.log_probs[ix];
            let lp1 = shifted.forward(obs).log_probs;
            let mut dz = [0.0; N_ACTIONS];
            for a in 0..N_ACTIONS {
                dz[a] = (lp1[a] - lp0[a]) / eps;
            }
            let mean: f64 = (0..N_ACTIONS).map(|a| p[a] * dz[a]).sum();
            total += (0..N_ACTIONS).map(|a| p[a] * (dz[a] - mean).powi(2)).sum::<f64>();
            ix += 1;
        }
    }
    total / ix.max(1) as f64
}

/// Maximize the surrogate on `batch` subject to `mean KL(θ ‖ θ') ≤ δ`, by
/// natural-gradient-scaled ascent with backtracking. `params` may be an
/// adapted descendant of the bank's behavior policy.
pub fn solve_clo(params: &PolicyParams, batch: &Conjecture<'_>, cfg: &ColaConfig) -> Result<CloResult> {
    params.check()?;
    if params.version.lineage != batch.version.lineage {
        return Err(Error::StaleBank {
            bank: batch.version.to_string(),
            policy: params.version.to_string(),
        });
    }
    let samples = &batch.samples;
    let center = Center::new(params, samples);
    let start = evaluate(params, samples, None, None);
    if samples.is_empty() || center.is_empty() || cfg.delta <= 0.0 {
        return Ok(CloResult::unchanged(params, start.value, start.clipped));
    }

    let mut current = params.clone();
    let mut current_value = start.value;
    let mut current_kl = 0.0;
    let mut clipped = start.clipped;
    let mut iterations = 0;
    let mut backtracks = 0;
    let mut accepted = false;
    for _ in 0..cfg.max_iters {
        let mut g = vec![0.0; params.dim()];
        evaluate(&current, samples, None, Some(&mut g));
        if g.iter().any(|x| !x.is_finite()) {
            return Err(Error::Numeric("non-finite surrogate gradient".into()));
        }
        if g.iter().all(|x| *x == 0.0) {
            break;
        }
        iterations += 1;
        let quad = fisher_quadratic(&current, &g, samples, &center);
        let mut eta = if quad > 0.0 && quad.is_finite() {
            (2.0 * cfg.delta / quad).sqrt()
        } else {
            let norm = g.iter().map(|x| x * x).sum::<f64>().sqrt();
            cfg.delta.sqrt() / norm
        };
        let mut step_taken = false;
        for _ in 0..=cfg.max_backtracks {
            let cand = PolicyParams {
                theta: current.theta.iter().zip(&g).map(|(t, gi)| t + eta * gi).collect(),
                ..current.clone()
            };
            let ev = evaluate(&cand, samples, Some(&center), None);
            if ev.value.is_finite() && ev.kl <= cfg.delta && ev.value > current_value {
                current = cand;
                current_value = ev.value;
                current_kl = ev.kl;
                clipped = ev.clipped;
                step_taken = true;
                break;
            }
            backtracks += 1;
            eta *= 0.5;
        }
        if !step_taken {
            break;
        }
        accepted = true;
    }
    let params_out = if accepted { params.derive(current.theta) } else { params.clone() };
    Ok(CloResult {
        params: params_out,
        surrogate_before: start.value,
        surrogate_after: current_value,
        kl: current_kl,
        accepted,
        iterations,
        backtracks,
        clipped,
    })
}

/// One adaptation step: conjecture from the bank under `belief`, then solve.
/// An empty bank leaves the policy unchanged.
pub fn cola_step(params: &PolicyParams, belief: &Belief, bank: &SampleBank, cfg: &ColaConfig, here: Here<'_>, rng: &mut Stream) -> Result<CloResult> {
    if bank.is_empty() {
        log::warn!("empty sample bank; skipping adaptation");
        return Ok(CloResult::unchanged(params, 0.0, 0));
    }
    if cfg.k != bank.k {
        return Err(Error::Config(format!("lookahead K={} but the sample bank holds K={} windows", cfg.k, bank.k)));
    }
    let batch = sample_conjecture(bank, belief, cfg.m, cfg.conditioning, Some(here), rng)?;
    solve_clo(params, &batch, cfg)
}
