//! Symbolic safety constraints: a first-match piecewise map from mode
//! features to action-masking rule sets, the `Safe` assessor, per-partition
//! constraint synthesis and online knowledge expansion.

use std::fmt;
use std::path::Path;

use rand::distributions::{Distribution, WeightedIndex};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::belief::Belief;
use crate::cola::SampleBank;
use crate::env::{Action, Mode, Observation, SimConfig, Simulator, WorldState, MODE_FEATURE_DIM, N_ACTIONS, REDUCED_DIM};
use crate::error::{Error, Result};
use crate::io;
use crate::policy::{ActionDistribution, PolicyParams};
use crate::rng::Stream;

/// Allowed mass below this triggers the full-brake fallback.
pub const FALLBACK_MASS: f64 = 1e-12;

/// A subset of the seven action indices.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "Vec<usize>", into = "Vec<usize>")]
pub struct ActionSet(u8);

impl ActionSet {
    pub const ALL: ActionSet = ActionSet(0b111_1111);
    /// Coast or brake: `{0, 4, 5, 6}`.
    pub const NON_THROTTLE: ActionSet = ActionSet(0b111_0001);
    /// `{4, 5, 6}`.
    pub const BRAKE_ONLY: ActionSet = ActionSet(0b111_0000);

    pub fn from_indices(indices: &[usize]) -> Result<Self> {
        let mut bits = 0u8;
        for &i in indices {
            bits |= 1 << Action::new(i)?.index();
        }
        if bits == 0 {
            return Err(Error::Config("allowed action set is empty".into()));
        }
        Ok(ActionSet(bits))
    }

    pub fn contains(self, a: Action) -> bool {
        self.0 & (1 << a.index()) != 0
    }

    pub fn len(self) -> usize {
        self.0.count_ones() as usize
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    pub fn indices(self) -> Vec<usize> {
        (0..N_ACTIONS).filter(|i| self.0 & (1 << i) != 0).collect()
    }
}

impl fmt::Debug for ActionSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?}", self.indices())
    }
}

impl TryFrom<Vec<usize>> for ActionSet {
    type Error = Error;
    fn try_from(v: Vec<usize>) -> Result<Self> {
        ActionSet::from_indices(&v)
    }
}

impl From<ActionSet> for Vec<usize> {
    fn from(s: ActionSet) -> Vec<usize> {
        s.indices()
    }
}

/// `coeffs · x ≤ bound`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearIneq {
    pub coeffs: Vec<f64>,
    pub bound: f64,
}

impl LinearIneq {
    /// `x[i] ≤ c`.
    pub fn upper(dim: usize, i: usize, c: f64) -> Self {
        let mut coeffs = vec![0.0; dim];
        coeffs[i] = 1.0;
        LinearIneq { coeffs, bound: c }
    }

    /// `x[i] ≥ c`.
    pub fn lower(dim: usize, i: usize, c: f64) -> Self {
        let mut coeffs = vec![0.0; dim];
        coeffs[i] = -1.0;
        LinearIneq { coeffs, bound: -c }
    }

    pub fn holds(&self, x: &[f64]) -> bool {
        self.coeffs.iter().zip(x).map(|(w, v)| w * v).sum::<f64>() <= self.bound
    }
}

/// Conjunction of linear inequalities; empty means `true`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Conjunction(pub Vec<LinearIneq>);

impl Conjunction {
    pub fn always() -> Self {
        Conjunction(Vec::new())
    }

    pub fn and(mut self, ineq: LinearIneq) -> Self {
        self.0.push(ineq);
        self
    }

    pub fn is_trivial(&self) -> bool {
        self.0.is_empty()
    }

    fn check(&self, dim: usize, what: &str) -> Result<()> {
        for ineq in &self.0 {
            if ineq.coeffs.len() != dim {
                return Err(Error::Config(format!(
                    "{what}: inequality has {} coefficients, expected {dim}",
                    ineq.coeffs.len()
                )));
            }
            if ineq.coeffs.iter().any(|c| !c.is_finite()) || ineq.bound.is_nan() {
                return Err(Error::Config(format!("{what}: non-finite coefficient")));
            }
        }
        Ok(())
    }

    pub fn holds(&self, x: &[f64]) -> bool {
        self.0.iter().all(|i| i.holds(x))
    }

    /// Tightest axis-aligned box around `points`.
    pub fn bounding_box(points: &[Vec<f64>]) -> Self {
        let Some(first) = points.first() else {
            return Conjunction::always();
        };
        let dim = first.len();
        let mut c = Conjunction::always();
        for i in 0..dim {
            let lo = points.iter().map(|p| p[i]).fold(f64::INFINITY, f64::min);
            let hi = points.iter().map(|p| p[i]).fold(f64::NEG_INFINITY, f64::max);
            c = c.and(LinearIneq::upper(dim, i, hi)).and(LinearIneq::lower(dim, i, lo));
        }
        c
    }
}

/// Guards over the reduced state `ŝ = (d_c, d_p, v_c, v_p, l)`.
pub mod guard {
    use super::{Conjunction, LinearIneq};
    use crate::env::REDUCED_DIM;

    /// A pedestrian is sensed and has not finished crossing: `d_p ≥ 0.5`.
    pub fn pedestrian_sensed() -> Conjunction {
        Conjunction::always().and(LinearIneq::lower(REDUCED_DIM, 1, 0.5))
    }

    /// A sensed pedestrian is walking and has not yet cleared the lane.
    pub fn pedestrian_crossing() -> Conjunction {
        pedestrian_sensed().and(LinearIneq::lower(REDUCED_DIM, 3, 1e-6))
    }

    pub fn within(mut base: Conjunction, d_c: f64) -> Conjunction {
        base.0.push(LinearIneq::upper(REDUCED_DIM, 0, d_c));
        base
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Rule {
    pub guard: Conjunction,
    pub allowed: ActionSet,
}

/// Ordered rules over `ŝ`; the first rule whose guard holds applies. The last
/// rule must be unguarded.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConstraintSet {
    pub name: String,
    pub rules: Vec<Rule>,
}

impl ConstraintSet {
    pub fn new(name: impl Into<String>, rules: Vec<Rule>) -> Result<Self> {
        let cs = ConstraintSet { name: name.into(), rules };
        cs.validate()?;
        Ok(cs)
    }

    pub fn validate(&self) -> Result<()> {
        match self.rules.last() {
            Some(r) if r.guard.is_trivial() => {}
            _ => return Err(Error::Config(format!("constraint set `{}` lacks a final default rule", self.name))),
        }
        for r in &self.rules {
            r.guard.check(REDUCED_DIM, &self.name)?;
            if r.allowed.is_empty() {
                return Err(Error::Config(format!("constraint set `{}` has an empty allowed set", self.name)));
            }
        }
        Ok(())
    }

    /// No restriction anywhere.
    pub fn all() -> Self {
        Self::unguarded("all", ActionSet::ALL)
    }

    pub fn unguarded(name: &str, allowed: ActionSet) -> Self {
        ConstraintSet {
            name: name.into(),
            rules: vec![Rule {
                guard: Conjunction::always(),
                allowed,
            }],
        }
    }

    /// `allowed` while a sensed pedestrian is present and `d_c ≤ t`, otherwise everything.
    pub fn guarded(name: &str, allowed: ActionSet, t: f64) -> Self {
        ConstraintSet {
            name: name.into(),
            rules: vec![
                Rule {
                    guard: guard::within(guard::pedestrian_sensed(), t),
                    allowed,
                },
                Rule {
                    guard: Conjunction::always(),
                    allowed: ActionSet::ALL,
                },
            ],
        }
    }

    /// Used when a mode falls outside every partition.
    pub fn max_caution() -> Self {
        ConstraintSet {
            name: "max-caution".into(),
            rules: vec![
                Rule {
                    guard: guard::pedestrian_sensed(),
                    allowed: ActionSet::BRAKE_ONLY,
                },
                Rule {
                    guard: Conjunction::always(),
                    allowed: ActionSet::ALL,
                },
            ],
        }
    }

    /// Brake-only near a crossing pedestrian, no throttle near a sensed one.
    pub fn baseline() -> Self {
        ConstraintSet {
            name: "baseline".into(),
            rules: vec![
                Rule {
                    guard: guard::within(guard::pedestrian_crossing(), 5.0),
                    allowed: ActionSet::BRAKE_ONLY,
                },
                Rule {
                    guard: guard::within(guard::pedestrian_sensed(), 10.0),
                    allowed: ActionSet::NON_THROTTLE,
                },
                Rule {
                    guard: Conjunction::always(),
                    allowed: ActionSet::ALL,
                },
            ],
        }
    }

    /// Sum of allowed-set sizes over the rules.
    pub fn allowed_count(&self) -> usize {
        self.rules.iter().map(|r| r.allowed.len()).sum()
    }

    pub fn rule_for(&self, s_hat: &[f64; REDUCED_DIM]) -> usize {
        self.rules
            .iter()
            .position(|r| r.guard.holds(s_hat))
            .unwrap_or(self.rules.len() - 1)
    }
}

/// The twelve synthesis candidates: {all, non-throttle, brake-only} ×
/// {unguarded, guarded at d_c ≤ 5, 10, 15 m}.
pub fn candidate_grammar() -> Vec<ConstraintSet> {
    let sets = [
        ("all", ActionSet::ALL),
        ("non-throttle", ActionSet::NON_THROTTLE),
        ("brake-only", ActionSet::BRAKE_ONLY),
    ];
    let mut out = Vec::with_capacity(12);
    for (name, set) in sets {
        out.push(ConstraintSet::unguarded(name, set));
        for t in [5.0, 10.0, 15.0] {
            out.push(ConstraintSet::guarded(&format!("{name}@{t}"), set, t));
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Case {
    pub predicate: Conjunction,
    pub constraints: ConstraintSet,
}

/// Ordered `(χ_i, φ_i)` cases with first-match dispatch on mode features.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SscFunction {
    pub version: u32,
    pub feature_dim: usize,
    pub cases: Vec<Case>,
}

const KB_FORMAT: &str = "crossbench.knowledge-base";
const KB_VERSION: u32 = 1;

pub fn mode_features(mode: &Mode, sim: &SimConfig) -> Vec<f64> {
    mode.features(&sim.light_cycle, sim.h_max)
}

impl SscFunction {
    /// One case whose predicate is the bounding box of `modes`, with [`ConstraintSet::baseline`].
    pub fn baseline(modes: &[Mode], sim: &SimConfig) -> Self {
        Self::single(modes, sim, ConstraintSet::baseline())
    }

    /// One case over the bounding box of `modes` enforcing `constraints`.
    pub fn single(modes: &[Mode], sim: &SimConfig, constraints: ConstraintSet) -> Self {
        let feats: Vec<Vec<f64>> = modes.iter().map(|m| mode_features(m, sim)).collect();
        SscFunction {
            version: 0,
            feature_dim: MODE_FEATURE_DIM,
            cases: vec![Case {
                predicate: Conjunction::bounding_box(&feats),
                constraints,
            }],
        }
    }

    pub fn empty() -> Self {
        SscFunction {
            version: 0,
            feature_dim: MODE_FEATURE_DIM,
            cases: Vec::new(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (i, c) in self.cases.iter().enumerate() {
            c.predicate.check(self.feature_dim, &format!("case {i} predicate"))?;
            c.constraints.validate()?;
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.validate()?;
        io::save_versioned(path, KB_FORMAT, KB_VERSION, self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f: SscFunction = io::load_versioned(path, KB_FORMAT, KB_VERSION)?;
        f.validate().map_err(|e| Error::corrupt(path, e))?;
        Ok(f)
    }
}

/// Index and constraint set of the first case whose predicate holds, or `None`
/// when the features are not covered.
pub fn evaluate_ssc<'a>(f: &'a SscFunction, features: &[f64]) -> Result<Option<(usize, &'a ConstraintSet)>> {
    if features.len() != f.feature_dim {
        return Err(Error::Usage(format!(
            "mode features have dimension {}, knowledge base expects {}",
            features.len(),
            f.feature_dim
        )));
    }
    Ok(f.cases
        .iter()
        .enumerate()
        .find(|(_, c)| c.predicate.holds(features))
        .map(|(i, c)| (i, &c.constraints)))
}

pub fn covers(f: &SscFunction, features: &[f64]) -> bool {
    features.len() == f.feature_dim && f.cases.iter().any(|c| c.predicate.holds(features))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SafetyAssessor {
    /// Minimum clearance (m) between the vehicle and the crossing window while the pedestrian is in the lane.
    pub d_safe: f64,
    /// Extrapolation horizon in steps.
    pub horizon: u32,
}

impl Default for SafetyAssessor {
    fn default() -> Self {
        SafetyAssessor {
            d_safe: 3.0,
            horizon: 10,
        }
    }
}

impl SafetyAssessor {
    pub fn validate(&self) -> Result<()> {
        if !(self.d_safe.is_finite() && self.d_safe > 0.0) {
            return Err(Error::Config(format!("d_safe must be positive, got {}", self.d_safe)));
        }
        Ok(())
    }
}

/// 1 if `(state, action)` is unsafe, 0 if safe.
///
/// The vehicle keeps the speed reached after applying `action` for one step;
/// the pedestrian keeps its lateral speed. Unsafe when, at some step within
/// the horizon, the pedestrian is inside the lane band while the vehicle is
/// closer than `d_safe` to the crossing window.
pub fn safe(cfg: &SimConfig, state: &WorldState, action: Action, assessor: &SafetyAssessor) -> u8 {
    let v = (state.v_c + action.value() * cfg.a_max * cfg.dt).clamp(0.0, cfg.v_max);
    let (lo, hi) = cfg.lane_band;
    for tau in 1..=assessor.horizon {
        let dt = f64::from(tau) * cfg.dt;
        let y = (state.y_p + state.v_p * dt).min(cfg.lane_width);
        if !(y > lo && y < hi) {
            continue;
        }
        let x = state.x_c + v * dt;
        let clearance = (x.abs() - cfg.crossing_half_width).max(0.0);
        if clearance < assessor.d_safe {
            return 1;
        }
    }
    0
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Shielded {
    pub dist: ActionDistribution,
    pub rule: usize,
    /// Some probability mass was removed.
    pub intervened: bool,
    /// Nothing allowed had mass; the result is the strongest allowed brake.
    pub fallback: bool,
}

/// Mask the actions the matching rule disallows and renormalize.
pub fn apply_constraint(dist: &ActionDistribution, cs: &ConstraintSet, s_hat: &[f64; REDUCED_DIM]) -> Shielded {
    let rule = cs.rule_for(s_hat);
    let allowed = cs.rules[rule].allowed;
    let mut out = [0.0; N_ACTIONS];
    let mut mass = 0.0;
    let mut removed = false;
    for a in Action::all() {
        let p = dist.0[a.index()];
        if allowed.contains(a) {
            out[a.index()] = p;
            mass += p;
        } else if p > 0.0 {
            removed = true;
        }
    }
    if mass < FALLBACK_MASS {
        let brake = Action::all()
            .filter(|a| allowed.contains(*a))
            .min_by(|a, b| a.value().total_cmp(&b.value()))
            .unwrap_or(Action::FULL_BRAKE);
        return Shielded {
            dist: ActionDistribution::one_hot(brake),
            rule,
            intervened: true,
            fallback: true,
        };
    }
    if removed {
        out.iter_mut().for_each(|p| *p /= mass);
    }
    Shielded {
        dist: ActionDistribution(out),
        rule,
        intervened: removed,
        fallback: false,
    }
}

/// What the synthesis objective is evaluated against.
#[derive(Clone, Copy, Debug)]
pub struct SynthesisContext<'a> {
    pub bank: &'a SampleBank,
    pub params: &'a PolicyParams,
    pub belief: &'a Belief,
    /// Lookahead horizon `K` of the unsafe-step count.
    pub k: usize,
    pub assessor: SafetyAssessor,
    /// Start states drawn per evaluation; 0 weighs every bank window exactly.
    pub m_eval: usize,
    /// Expand actions and pedestrian decisions exactly when `K` is at most this.
    pub exact_depth: usize,
}

struct Start<'a> {
    sim: &'a Simulator,
    state: &'a WorldState,
    obs: &'a Observation,
    weight: f64,
}

fn shielded_probs(params: &PolicyParams, phi: &ConstraintSet, obs: &Observation) -> ActionDistribution {
    let dist = ActionDistribution(params.forward(obs).probs());
    apply_constraint(&dist, phi, &obs.reduced()).dist
}

fn exact_unsafe(
    ctx: &SynthesisContext<'_>,
    phi: &ConstraintSet,
    sim: &Simulator,
    state: &WorldState,
    obs: &Observation,
    depth: usize,
) -> Result<f64> {
    if depth == ctx.k || state.is_terminal() {
        return Ok(0.0);
    }
    let dist = shielded_probs(ctx.params, phi, obs);
    let p_start = sim.start_prob(state);
    let mut total = 0.0;
    for a in Action::all() {
        let pa = dist.prob(a);
        if pa == 0.0 {
            continue;
        }
        let mut v = f64::from(safe(sim.config(), state, a, &ctx.assessor));
        for (starts, q) in [(true, p_start), (false, 1.0 - p_start)] {
            if q > 0.0 {
                let next = sim.step_given(state, obs, a, starts)?;
                v += q * exact_unsafe(ctx, phi, sim, &next.next_state, &next.obs, depth + 1)?;
            }
        }
        total += pa * v;
    }
    Ok(total)
}

fn sampled_unsafe(
    ctx: &SynthesisContext<'_>,
    phi: &ConstraintSet,
    sim: &Simulator,
    state: &WorldState,
    obs: &Observation,
    rng: &mut Stream,
) -> Result<f64> {
    let mut state = state.clone();
    let mut obs = *obs;
    let mut count = 0.0;
    for _ in 0..ctx.k {
        if state.is_terminal() {
            break;
        }
        let a = shielded_probs(ctx.params, phi, &obs).sample(rng);
        count += f64::from(safe(sim.config(), &state, a, &ctx.assessor));
        let step = sim.step(&state, &obs, a, rng)?;
        state = step.next_state;
        obs = step.obs;
    }
    Ok(count)
}

fn restricted_weights(belief: &Belief, g: &[Mode]) -> Vec<f64> {
    let w: Vec<f64> = g.iter().map(|m| belief.prob_of(&m.id)).collect();
    let total: f64 = w.iter().sum();
    if total > 0.0 {
        w.iter().map(|x| x / total).collect()
    } else {
        log::debug!("belief has no mass on the partition; weighting its modes uniformly");
        vec![1.0 / g.len() as f64; g.len()]
    }
}

/// Expected number of unsafe steps over `K` steps of the `phi`-shielded policy,
/// started from bank windows of the modes in `g`.
pub fn sscap_objective(phi: &ConstraintSet, g: &[Mode], ctx: &SynthesisContext<'_>, rng: &mut Stream) -> Result<f64> {
    if g.is_empty() {
        return Err(Error::Usage("constraint synthesis needs at least one mode".into()));
    }
    phi.validate()?;
    ctx.assessor.validate()?;
    let weights = restricted_weights(ctx.belief, g);
    let sims = g
        .iter()
        .map(|m| Simulator::new(ctx.bank.sim.clone(), m.clone()))
        .collect::<Result<Vec<_>>>()?;
    let buckets = g
        .iter()
        .map(|m| match ctx.bank.bucket(&m.id) {
            Some(b) if !b.is_empty() => Ok(b),
            _ => Err(Error::BankCoverage(format!("sample bank has no windows for mode `{}`", m.id))),
        })
        .collect::<Result<Vec<_>>>()?;
    let pool: usize = buckets.iter().map(|b| b.len()).sum();

    let mut starts = Vec::new();
    if ctx.m_eval == 0 || ctx.m_eval >= pool {
        for ((sim, bucket), w) in sims.iter().zip(&buckets).zip(&weights) {
            for s in bucket.iter() {
                starts.push(Start {
                    sim,
                    state: &s.start_state,
                    obs: &s.states[0],
                    weight: w / bucket.len() as f64,
                });
            }
        }
    } else {
        let pick = WeightedIndex::new(&weights).map_err(|e| Error::Usage(format!("partition weights: {e}")))?;
        for _ in 0..ctx.m_eval {
            let z = pick.sample(rng);
            let s = &buckets[z][rng.gen_range(0..buckets[z].len())];
            starts.push(Start {
                sim: &sims[z],
                state: &s.start_state,
                obs: &s.states[0],
                weight: 1.0 / ctx.m_eval as f64,
            });
        }
    }

    let mut total = 0.0;
    for s in &starts {
        let v = if ctx.k <= ctx.exact_depth {
            exact_unsafe(ctx, phi, s.sim, s.state, s.obs, 0)?
        } else {
            sampled_unsafe(ctx, phi, s.sim, s.state, s.obs, rng)?
        };
        total += s.weight * v;
    }
    Ok(total.max(0.0))
}

#[derive(Clone, Debug, PartialEq)]
pub struct SscapChoice {
    pub index: usize,
    pub constraints: ConstraintSet,
    pub objectives: Vec<f64>,
}

/// Objectives closer than this count as tied.
const TIE_TOL: f64 = 1e-12;

/// Evaluate every grammar candidate with common random numbers and return the
/// minimizer; ties go to the larger allowed count, then the earlier candidate.
pub fn sscap_optimize(g: &[Mode], grammar: &[ConstraintSet], ctx: &SynthesisContext<'_>, rng: &mut Stream) -> Result<SscapChoice> {
    if grammar.is_empty() {
        return Err(Error::Usage("constraint grammar is empty".into()));
    }
    let base = rng.clone();
    let objectives = grammar
        .iter()
        .map(|phi| sscap_objective(phi, g, ctx, &mut base.clone()))
        .collect::<Result<Vec<_>>>()?;
    let _ = rng.gen::<u64>();
    let mut best = 0;
    for i in 1..grammar.len() {
        let (oi, ob) = (objectives[i], objectives[best]);
        let better = if (oi - ob).abs() <= TIE_TOL {
            grammar[i].allowed_count() > grammar[best].allowed_count()
        } else {
            oi < ob
        };
        if better {
            best = i;
        }
    }
    Ok(SscapChoice {
        index: best,
        constraints: grammar[best].clone(),
        objectives,
    })
}

/// Append a case for the modes `f` does not cover. Returns `f` unchanged when
/// every mode is already covered.
pub fn ssca_update(
    f: &SscFunction,
    new_modes: &[Mode],
    grammar: &[ConstraintSet],
    ctx: &SynthesisContext<'_>,
    rng: &mut Stream,
) -> Result<SscFunction> {
    let sim = &ctx.bank.sim;
    let uncovered: Vec<Mode> = new_modes
        .iter()
        .filter(|m| !covers(f, &mode_features(m, sim)))
        .cloned()
        .collect();
    if uncovered.is_empty() {
        return Ok(f.clone());
    }
    let feats: Vec<Vec<f64>> = uncovered.iter().map(|m| mode_features(m, sim)).collect();
    if let Some(d) = feats.iter().map(Vec::len).find(|&d| d != f.feature_dim) {
        return Err(Error::Usage(format!("mode features have dimension {d}, knowledge base expects {}", f.feature_dim)));
    }
    let predicate = Conjunction::bounding_box(&feats);
    let choice = sscap_optimize(&uncovered, grammar, ctx, rng)?;
    log::info!(
        "synthesized case {} for {:?}: `{}`",
        f.cases.len(),
        uncovered.iter().map(|m| m.id.as_str()).collect::<Vec<_>>(),
        choice.constraints.name
    );
    let mut out = f.clone();
    out.cases.push(Case {
        predicate,
        constraints: choice.constraints,
    });
    out.version += 1;
    Ok(out)
}
