//! Stochastic discrete-action policy `π(a | s; θ)`: a one-hidden-layer tanh
//! network with a softmax head, hand-written backprop, and the KL divergence
//! used by the trust region.

mod train;

use std::fmt;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::env::{Action, Observation, MASKED, N_ACTIONS, OBS_DIM};
use crate::error::{Error, Result};
use crate::io;

pub use train::{
    evaluate_policy, evaluate_random, train_meta, EvalComparison, TrainConfig, TrainEnvs,
    TrainOutcome,
};

/// Fixed input scaling applied before the first layer. Masked entries are fed as-is.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct InputScale {
    pub distance: f64,
    pub speed: f64,
    pub light: f64,
}

impl Default for InputScale {
    fn default() -> Self {
        InputScale {
            distance: 50.0,
            speed: 15.0,
            light: 2.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Tanh,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Arch {
    pub input_dim: usize,
    pub hidden: usize,
    pub activation: Activation,
    pub n_actions: usize,
    pub input_scale: InputScale,
}

impl Default for Arch {
    fn default() -> Self {
        Arch {
            input_dim: OBS_DIM,
            hidden: 64,
            activation: Activation::Tanh,
            n_actions: N_ACTIONS,
            input_scale: InputScale::default(),
        }
    }
}

impl Arch {
    pub fn with_hidden(hidden: usize) -> Self {
        Arch {
            hidden,
            ..Arch::default()
        }
    }

    /// Number of parameters: `W1, b1, W2, b2` flattened in that order.
    pub fn param_count(&self) -> usize {
        self.hidden * self.input_dim + self.hidden + self.n_actions * self.hidden + self.n_actions
    }

    fn validate(&self) -> Result<()> {
        if self.input_dim != OBS_DIM || self.n_actions != N_ACTIONS || self.hidden == 0 {
            return Err(Error::Config(format!(
                "unsupported architecture {}x{}x{}",
                self.input_dim, self.hidden, self.n_actions
            )));
        }
        Ok(())
    }

    fn offsets(&self) -> (usize, usize, usize) {
        let b1 = self.hidden * self.input_dim;
        let w2 = b1 + self.hidden;
        let b2 = w2 + self.n_actions * self.hidden;
        (b1, w2, b2)
    }

    pub fn normalize(&self, obs: &Observation) -> [f64; OBS_DIM] {
        let s = &self.input_scale;
        let scale = [
            s.distance, s.distance, s.speed, s.speed, s.light, s.distance, s.distance, s.speed, s.speed, s.light,
        ];
        let mut x = [0.0; OBS_DIM];
        for i in 0..OBS_DIM {
            let v = obs.0[i];
            x[i] = if v == MASKED { MASKED } else { v / scale[i] };
        }
        x
    }
}

/// Identifies the policy a sample bank was collected with: the training
/// lineage plus the number of adaptation updates applied since.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PolicyVersion {
    pub lineage: u64,
    pub revision: u32,
}

impl fmt::Display for PolicyVersion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:016x}.{}", self.lineage, self.revision)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicyParams {
    pub arch: Arch,
    pub theta: Vec<f64>,
    pub version: PolicyVersion,
}

/// Probabilities over the seven vehicle actions.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActionDistribution(pub [f64; N_ACTIONS]);

impl ActionDistribution {
    pub fn uniform() -> Self {
        ActionDistribution([1.0 / N_ACTIONS as f64; N_ACTIONS])
    }

    pub fn one_hot(a: Action) -> Self {
        let mut p = [0.0; N_ACTIONS];
        p[a.index()] = 1.0;
        ActionDistribution(p)
    }

    pub fn probs(&self) -> &[f64; N_ACTIONS] {
        &self.0
    }

    pub fn prob(&self, a: Action) -> f64 {
        self.0[a.index()]
    }

    pub fn is_valid(&self, tol: f64) -> bool {
        let sum: f64 = self.0.iter().sum();
        self.0.iter().all(|&p| p >= 0.0 && p.is_finite()) && (sum - 1.0).abs() <= tol
    }

    /// Inverse-CDF sampling over indices in fixed order.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Action {
        let u: f64 = rng.gen();
        let mut cum = 0.0;
        let mut last_positive = 0;
        for (i, &p) in self.0.iter().enumerate() {
            if p > 0.0 {
                last_positive = i;
            }
            cum += p;
            if u < cum {
                return Action::new(i).expect("index < N_ACTIONS");
            }
        }
        Action::new(last_positive).expect("index < N_ACTIONS")
    }
}

pub fn sample_action<R: Rng + ?Sized>(dist: &ActionDistribution, rng: &mut R) -> Action {
    dist.sample(rng)
}

/// Intermediate activations kept for backprop.
pub(crate) struct Forward {
    x: [f64; OBS_DIM],
    h: Vec<f64>,
    pub(crate) log_probs: [f64; N_ACTIONS],
}

impl Forward {
    pub(crate) fn probs(&self) -> [f64; N_ACTIONS] {
        self.log_probs.map(f64::exp)
    }
}

impl PolicyParams {
    /// Uniform(-0.05, 0.05) weights, zero biases.
    pub fn init<R: Rng + ?Sized>(arch: Arch, lineage: u64, rng: &mut R) -> Result<Self> {
        arch.validate()?;
        let mut theta = vec![0.0; arch.param_count()];
        let (b1, w2, b2) = arch.offsets();
        for (i, w) in theta.iter_mut().enumerate() {
            let is_bias = (b1..w2).contains(&i) || i >= b2;
            if !is_bias {
                *w = rng.gen_range(-0.05..0.05);
            }
        }
        Ok(PolicyParams {
            arch,
            theta,
            version: PolicyVersion { lineage, revision: 0 },
        })
    }

    pub fn zeros(arch: Arch) -> Result<Self> {
        arch.validate()?;
        Ok(PolicyParams {
            theta: vec![0.0; arch.param_count()],
            arch,
            version: PolicyVersion {
                lineage: 0,
                revision: 0,
            },
        })
    }

    pub fn dim(&self) -> usize {
        self.theta.len()
    }

    pub fn check(&self) -> Result<()> {
        self.arch.validate()?;
        if self.theta.len() != self.arch.param_count() {
            return Err(Error::Config(format!(
                "parameter vector has length {}, architecture implies {}",
                self.theta.len(),
                self.arch.param_count()
            )));
        }
        if let Some(i) = self.theta.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("parameter {i} is {}", self.theta[i])));
        }
        Ok(())
    }

    /// A copy with `theta` replaced and the revision bumped.
    pub fn derive(&self, theta: Vec<f64>) -> Self {
        PolicyParams {
            arch: self.arch,
            theta,
            version: PolicyVersion {
                lineage: self.version.lineage,
                revision: self.version.revision + 1,
            },
        }
    }

    pub(crate) fn forward(&self, obs: &Observation) -> Forward {
        let arch = &self.arch;
        let (b1o, w2o, b2o) = arch.offsets();
        let x = arch.normalize(obs);
        let th = &self.theta;
        let mut h = Vec::with_capacity(arch.hidden);
        for k in 0..arch.hidden {
            let row = &th[k * arch.input_dim..(k + 1) * arch.input_dim];
            let pre = row.iter().zip(&x).map(|(w, xi)| w * xi).sum::<f64>() + th[b1o + k];
            h.push(pre.tanh());
        }
        let mut logits = [0.0; N_ACTIONS];
        for (j, z) in logits.iter_mut().enumerate() {
            let row = &th[w2o + j * arch.hidden..w2o + (j + 1) * arch.hidden];
            *z = row.iter().zip(&h).map(|(w, hk)| w * hk).sum::<f64>() + th[b2o + j];
        }
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
        Forward {
            x,
            h,
            log_probs: logits.map(|z| z - lse),
        }
    }

    /// Add `weight · ∇θ log π(a | s)` into `out`, reusing a forward pass.
    pub(crate) fn accumulate_log_prob_grad(&self, fwd: &Forward, action: Action, weight: f64, out: &mut [f64]) {
        if weight == 0.0 {
            return;
        }
        let probs = fwd.probs();
        let mut g = [0.0; N_ACTIONS];
        for (j, gj) in g.iter_mut().enumerate() {
            let indicator = if j == action.index() { 1.0 } else { 0.0 };
            *gj = weight * (indicator - probs[j]);
        }
        self.backprop_logits(fwd, &g, out);
    }

    /// Add `weight · ∇θ H(π(·|s))` into `out`.
    pub(crate) fn accumulate_entropy_grad(&self, fwd: &Forward, weight: f64, out: &mut [f64]) {
        let probs = fwd.probs();
        let entropy: f64 = -probs.iter().zip(&fwd.log_probs).map(|(p, lp)| p * lp).sum::<f64>();
        let mut g = [0.0; N_ACTIONS];
        for j in 0..N_ACTIONS {
            g[j] = -weight * probs[j] * (fwd.log_probs[j] + entropy);
        }
        self.backprop_logits(fwd, &g, out);
    }

    /// Chain a gradient with respect to the logits back onto the parameters.
    fn backprop_logits(&self, fwd: &Forward, g: &[f64; N_ACTIONS], out: &mut [f64]) {
        let arch = &self.arch;
        let (b1o, w2o, b2o) = arch.offsets();
        for j in 0..N_ACTIONS {
            out[b2o + j] += g[j];
            let row = &mut out[w2o + j * arch.hidden..w2o + (j + 1) * arch.hidden];
            for (o, hk) in row.iter_mut().zip(&fwd.h) {
                *o += g[j] * hk;
            }
        }
        for k in 0..arch.hidden {
            let back: f64 = (0..N_ACTIONS)
                .map(|j| self.theta[w2o + j * arch.hidden + k] * g[j])
                .sum();
            let delta = back * (1.0 - fwd.h[k] * fwd.h[k]);
            if delta == 0.0 {
                continue;
            }
            out[b1o + k] += delta;
            let row = &mut out[k * arch.input_dim..(k + 1) * arch.input_dim];
            for (o, xi) in row.iter_mut().zip(&fwd.x) {
                *o += delta * xi;
            }
        }
    }

    pub fn save(&self, path: &Path, seed: u64) -> Result<()> {
        self.check()?;
        let ckpt = Checkpoint {
            arch: self.arch,
            d: self.dim(),
            seed,
            version: self.version,
            theta: self.theta.clone(),
        };
        io::save_versioned(path, CHECKPOINT_FORMAT, CHECKPOINT_VERSION, &ckpt)
    }

    /// Load a checkpoint; `expected_arch` rejects architecture mismatches.
    pub fn load(path: &Path, expected_arch: Option<&Arch>) -> Result<(Self, u64)> {
        let ckpt: Checkpoint = io::load_versioned(path, CHECKPOINT_FORMAT, CHECKPOINT_VERSION)?;
        if let Some(arch) = expected_arch {
            if *arch != ckpt.arch {
                return Err(Error::VersionMismatch {
                    path: path.into(),
                    expected: format!("architecture {arch:?}"),
                    found: format!("architecture {:?}", ckpt.arch),
                });
            }
        }
        if ckpt.d != ckpt.arch.param_count() || ckpt.theta.len() != ckpt.d {
            return Err(Error::corrupt(
                path,
                format!(
                    "header says d={}, architecture implies {}, file holds {}",
                    ckpt.d,
                    ckpt.arch.param_count(),
                    ckpt.theta.len()
                ),
            ));
        }
        let params = PolicyParams {
            arch: ckpt.arch,
            theta: ckpt.theta,
            version: ckpt.version,
        };
        params.check().map_err(|e| Error::corrupt(path, e))?;
        Ok((params, ckpt.seed))
    }
}

const CHECKPOINT_FORMAT: &str = "crossbench.checkpoint";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    arch: Arch,
    d: usize,
    /// Seed the parameters were trained from.
    seed: u64,
    version: PolicyVersion,
    theta: Vec<f64>,
}

pub fn action_probs(params: &PolicyParams, obs: &Observation) -> Result<ActionDistribution> {
    if let Some(i) = params.theta.iter().position(|v| !v.is_finite()) {
        return Err(Error::Numeric(format!("parameter {i} is not finite")));
    }
    Ok(ActionDistribution(params.forward(obs).probs()))
}

pub fn log_prob(params: &PolicyParams, obs: &Observation, action: Action) -> f64 {
    params.forward(obs).log_probs[action.index()]
}

/// `∇θ log π(action | obs; θ)`.
pub fn log_prob_grad(params: &PolicyParams, obs: &Observation, action: Action) -> Vec<f64> {
    let mut out = vec![0.0; params.dim()];
    let fwd = params.forward(obs);
    params.accumulate_log_prob_grad(&fwd, action, 1.0, &mut out);
    out
}

/// `Σ_a p(a) ln(p(a) / q(a))`.
pub fn kl_categorical(p: &[f64; N_ACTIONS], log_p: &[f64; N_ACTIONS], log_q: &[f64; N_ACTIONS]) -> f64 {
    let mut kl = 0.0;
    for a in 0..N_ACTIONS {
        if p[a] > 0.0 {
            kl += p[a] * (log_p[a] - log_q[a]);
        }
    }
    kl.max(0.0)
}

/// Mean over `states` of `KL(π(·|s; old) ‖ π(·|s; new))`.
pub fn kl_divergence(old: &PolicyParams, new: &PolicyParams, states: &[Observation]) -> Result<f64> {
    if states.is_empty() {
        return Err(Error::Usage("kl_divergence needs at least one state".into()));
    }
    let total: f64 = states
        .iter()
        .map(|s| {
            let fo = old.forward(s);
            let fnew = new.forward(s);
            kl_categorical(&fo.probs(), &fo.log_probs, &fnew.log_probs)
        })
        .sum();
    Ok(total / states.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn obs(v: [f64; OBS_DIM]) -> Observation {
        Observation(v)
    }

    fn random_obs<R: Rng>(rng: &mut R) -> Observation {
        let mut v = [0.0; OBS_DIM];
        for x in v.iter_mut() {
            *x = if rng.gen_bool(0.2) { MASKED } else { rng.gen_range(0.0..30.0) };
        }
        obs(v)
    }

    #[test]
    fn zero_params_give_uniform() {
        let p = PolicyParams::zeros(Arch::default()).unwrap();
        let d = action_probs(&p, &obs([3.0; OBS_DIM])).unwrap();
        for &q in d.probs() {
            assert!((q - 1.0 / 7.0).abs() < 1e-15);
        }
    }

    #[test]
    fn non_finite_params_are_rejected() {
        let mut p = PolicyParams::zeros(Arch::default()).unwrap();
        p.theta[5] = f64::NAN;
        assert!(matches!(action_probs(&p, &obs([0.0; OBS_DIM])), Err(Error::Numeric(_))));
    }

    #[test]
    fn param_count_matches_layout() {
        assert_eq!(Arch::default().param_count(), 64 * 10 + 64 + 7 * 64 + 7);
    }

    #[test]
    fn masked_entries_pass_through() {
        let arch = Arch::default();
        let x = arch.normalize(&obs([10.0, MASKED, 7.5, MASKED, MASKED, 12.5, MASKED, 15.0, MASKED, 1.0]));
        assert_eq!(x, [0.2, -1.0, 0.5, -1.0, -1.0, 0.25, -1.0, 1.0, -1.0, 0.5]);
    }

    #[test]
    fn one_hot_sampling_is_certain() {
        let d = ActionDistribution::one_hot(Action::new(3).unwrap());
        let mut r = rng::stream(1, 0);
        for _ in 0..100 {
            assert_eq!(d.sample(&mut r).index(), 3);
        }
    }

    #[test]
    fn sampling_is_deterministic_per_stream() {
        let d = ActionDistribution::uniform();
        let a: Vec<_> = (0..20).scan(rng::stream(9, 2), |r, _| Some(d.sample(r))).collect();
        let b: Vec<_> = (0..20).scan(rng::stream(9, 2), |r, _| Some(d.sample(r))).collect();
        assert_eq!(a, b);
    }

    #[test]
    fn uniform_sampling_frequencies_within_five_sigma() {
        let d = ActionDistribution::uniform();
        let mut r = rng::stream(123, 0);
        let n = 70_000usize;
        let mut counts = [0usize; N_ACTIONS];
        for _ in 0..n {
            counts[d.sample(&mut r).index()] += 1;
        }
        let p = 1.0 / 7.0;
        let sigma = (n as f64 * p * (1.0 - p)).sqrt();
        for c in counts {
            assert!((c as f64 - n as f64 * p).abs() < 5.0 * sigma, "{counts:?}");
        }
    }

    #[test]
    fn score_identity_holds() {
        let mut r = rng::stream(5, 0);
        for _ in 0..20 {
            let mut p = PolicyParams::init(Arch::default(), 1, &mut r).unwrap();
            for w in p.theta.iter_mut() {
                *w *= 20.0;
            }
            let s = random_obs(&mut r);
            let dist = action_probs(&p, &s).unwrap();
            let mut total = vec![0.0; p.dim()];
            for a in Action::all() {
                let g = log_prob_grad(&p, &s, a);
                for (t, gi) in total.iter_mut().zip(g) {
                    *t += dist.prob(a) * gi;
                }
            }
            assert!(total.iter().all(|t| t.abs() < 1e-8));
        }
    }

    #[test]
    fn zero_theta_gradients_sum_to_zero() {
        let p = PolicyParams::zeros(Arch::default()).unwrap();
        let s = obs([4.0, 2.0, 8.0, 1.5, 1.0, 4.8, 2.15, 8.0, 1.5, 1.0]);
        let mut total = vec![0.0; p.dim()];
        for a in Action::all() {
            for (t, g) in total.iter_mut().zip(log_prob_grad(&p, &s, a)) {
                *t += g;
            }
        }
        assert!(total.iter().all(|t| t.abs() < 1e-12));
    }

    #[test]
    fn kl_of_identical_params_is_exactly_zero() {
        let mut r = rng::stream(2, 0);
        let p = PolicyParams::init(Arch::default(), 1, &mut r).unwrap();
        let states: Vec<_> = (0..10).map(|_| random_obs(&mut r)).collect();
        assert_eq!(kl_divergence(&p, &p, &states).unwrap(), 0.0);
        assert!(matches!(kl_divergence(&p, &p, &[]), Err(Error::Usage(_))));
    }

    #[test]
    fn kl_matches_direct_summation() {
        // Only the output biases are non-zero, so the policy is state independent
        // and the distributions are softmax(b) for the two bias vectors.
        let arch = Arch::default();
        let (_, _, b2) = arch.offsets();
        let mut old = PolicyParams::zeros(arch).unwrap();
        let mut new = old.clone();
        let bo = [0.3, -0.2, 0.0, 0.5, 1.0, -1.0, 0.1];
        let bn = [0.0, 0.4, -0.3, 0.2, 0.6, -0.5, 0.0];
        old.theta[b2..].copy_from_slice(&bo);
        new.theta[b2..].copy_from_slice(&bn);
        // Independent reference: direct Σ p ln(p/q) on the softmaxed biases.
        let softmax = |b: &[f64; 7]| {
            let z: f64 = b.iter().map(|x| x.exp()).sum();
            b.map(|x| x.exp() / z)
        };
        let (p, q) = (softmax(&bo), softmax(&bn));
        let expected: f64 = p.iter().zip(&q).map(|(pi, qi)| pi * (pi / qi).ln()).sum();
        let got = kl_divergence(&old, &new, &[obs([1.0; OBS_DIM])]).unwrap();
        assert!((got - expected).abs() < 1e-14, "{got} vs {expected}");
        // Frozen from an independent numpy evaluation of the same two softmaxes.
        assert!((got - 0.057_660_232_138_211_406).abs() < 1e-12, "{got}");
    }
}
