//! Closed-loop evaluation of the three methods (fixed meta-policy, lookahead
//! adaptation, adaptation plus shield) and metric aggregation.

use std::fmt;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::belief::{init_belief, update_belief, Belief, ModeTransitionModel, ObservationWindow};
use crate::cola::{cola_step, ColaConfig, Here, SampleBank};
use crate::env::{Action, DoneReason, Mode, SimConfig, Simulator};
use crate::error::{Error, Result};
use crate::io;
use crate::policy::{action_probs, PolicyParams};
use crate::rng;
use crate::ssc::{apply_constraint, evaluate_ssc, mode_features, ConstraintSet, SscFunction, FALLBACK_MASS};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Rl,
    Cola,
    Numerla,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::Rl, Method::Cola, Method::Numerla];

    pub fn adapts(self) -> bool {
        self != Method::Rl
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::Rl => "RL",
            Method::Cola => "COLA",
            Method::Numerla => "NUMERLA",
        })
    }
}

impl std::str::FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "rl" => Ok(Method::Rl),
            "cola" => Ok(Method::Cola),
            "numerla" => Ok(Method::Numerla),
            _ => Err(Error::Config(format!("unknown method `{s}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Scenario {
    WellBehaved,
    Jaywalk,
}

impl Scenario {
    pub const ALL: [Scenario; 2] = [Scenario::WellBehaved, Scenario::Jaywalk];

    /// Id of the pedestrian mode this scenario runs.
    pub fn mode_id(self) -> &'static str {
        match self {
            Scenario::WellBehaved => "compliant",
            Scenario::Jaywalk => "jaywalk",
        }
    }

    fn index(self) -> u64 {
        match self {
            Scenario::WellBehaved => 0,
            Scenario::Jaywalk => 1,
        }
    }
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Scenario::WellBehaved => "WellBehaved",
            Scenario::Jaywalk => "Jaywalk",
        })
    }
}

/// Which mode the shield dispatches on.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dispatch {
    /// Most likely mode under the current belief.
    #[default]
    Belief,
    /// The true mode (oracle runs).
    Truth,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSpec {
    pub scenario: Scenario,
    pub gap_m: f64,
    pub episodes: usize,
    pub method: Method,
    pub base_seed: u64,
    pub cola: ColaConfig,
    /// Required knowledge-base version, if any.
    pub ssc_version: Option<u32>,
    pub dispatch: Dispatch,
    /// Keep adapted parameters from one episode to the next instead of resetting.
    pub carry_theta: bool,
    pub belief_window: usize,
}

impl ScenarioSpec {
    pub fn new(scenario: Scenario, gap_m: f64, method: Method, episodes: usize, base_seed: u64) -> Self {
        ScenarioSpec {
            scenario,
            gap_m,
            episodes,
            method,
            base_seed,
            cola: ColaConfig::default(),
            ssc_version: None,
            dispatch: Dispatch::default(),
            carry_theta: false,
            belief_window: ObservationWindow::DEFAULT_CAPACITY,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.episodes == 0 {
            return Err(Error::Config("a scenario needs at least one episode".into()));
        }
        if !(self.gap_m.is_finite() && self.gap_m > 0.0) {
            return Err(Error::Config(format!("initial gap must be positive, got {}", self.gap_m)));
        }
        self.cola.validate()
    }

    /// Seed of episode `i`. Independent of the method, so every method faces
    /// the same pedestrians.
    pub fn episode_seed(&self, i: usize) -> u64 {
        rng::derive_seed(self.base_seed, &[self.scenario.index(), self.gap_m.to_bits(), i as u64])
    }

    pub fn key(&self) -> CellKey {
        CellKey {
            method: self.method,
            scenario: self.scenario,
            gap_m: self.gap_m,
        }
    }
}

/// Everything an episode reads; shared read-only across episodes.
#[derive(Clone, Debug)]
pub struct Artifacts {
    pub sim: SimConfig,
    pub modes: Vec<Mode>,
    pub mode_model: ModeTransitionModel,
    pub policy: PolicyParams,
    pub bank: Option<SampleBank>,
    pub ssc: Option<SscFunction>,
}

impl Artifacts {
    fn mode(&self, id: &str) -> Result<&Mode> {
        self.modes
            .iter()
            .find(|m| m.id == id)
            .ok_or_else(|| Error::Config(format!("no mode `{id}` configured")))
    }

    fn check_for(&self, spec: &ScenarioSpec) -> Result<()> {
        self.mode(spec.scenario.mode_id())?;
        if spec.method.adapts() {
            let bank = self
                .bank
                .as_ref()
                .ok_or_else(|| Error::Config(format!("{} needs a sample bank", spec.method)))?;
            if bank.k != spec.cola.k {
                return Err(Error::Config(format!(
                    "{} runs K={} lookaheads but the sample bank holds K={}",
                    spec.method, spec.cola.k, bank.k
                )));
            }
        }
        if spec.method == Method::Numerla {
            let f = self
                .ssc
                .as_ref()
                .ok_or_else(|| Error::Config("NUMERLA needs a knowledge base".into()))?;
            if let Some(v) = spec.ssc_version {
                if v != f.version {
                    return Err(Error::Config(format!("scenario expects knowledge base v{v}, loaded v{}", f.version)));
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub index: usize,
    pub seed: u64,
    /// Undiscounted episode return.
    pub ret: f64,
    pub collided: bool,
    pub steps: u32,
    pub done_reason: DoneReason,
    pub adaptations: u32,
    pub shield_interventions: u32,
    pub shield_fallbacks: u32,
}

/// Running mean/variance and collision count of one cell.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CellStats {
    pub n: u64,
    pub mean: f64,
    /// Sum of squared deviations from the mean.
    pub m2: f64,
    pub collisions: u64,
}

impl CellStats {
    pub fn push(&mut self, ret: f64, collided: bool) {
        self.n += 1;
        let delta = ret - self.mean;
        self.mean += delta / self.n as f64;
        self.m2 += delta * (ret - self.mean);
        self.collisions += u64::from(collided);
    }

    pub fn merge(&self, other: &CellStats) -> CellStats {
        if self.n == 0 {
            return *other;
        }
        if other.n == 0 {
            return *self;
        }
        let n = self.n + other.n;
        let delta = other.mean - self.mean;
        let (na, nb) = (self.n as f64, other.n as f64);
        CellStats {
            n,
            mean: self.mean + delta * nb / n as f64,
            m2: self.m2 + other.m2 + delta * delta * na * nb / n as f64,
            collisions: self.collisions + other.collisions,
        }
    }

    /// Sample standard deviation; 0 for a single episode.
    pub fn std(&self) -> f64 {
        if self.n < 2 {
            0.0
        } else {
            (self.m2.max(0.0) / (self.n - 1) as f64).sqrt()
        }
    }

    pub fn collision_rate(&self) -> f64 {
        if self.n == 0 {
            0.0
        } else {
            self.collisions as f64 / self.n as f64
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellKey {
    pub method: Method,
    pub scenario: Scenario,
    pub gap_m: f64,
}

/// Cells with fewer episodes than this are flagged.
pub const LOW_N: u64 = 30;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellMetrics {
    pub method: Method,
    pub scenario: Scenario,
    pub gap_m: f64,
    pub episodes: u64,
    pub mean_reward: f64,
    pub std: f64,
    pub collision_rate: f64,
    pub failures: u64,
    pub low_n: bool,
    pub stats: CellStats,
}

impl CellMetrics {
    pub fn from_stats(key: CellKey, stats: CellStats, failures: u64) -> Self {
        CellMetrics {
            method: key.method,
            scenario: key.scenario,
            gap_m: key.gap_m,
            episodes: stats.n,
            mean_reward: stats.mean,
            std: stats.std(),
            collision_rate: stats.collision_rate(),
            failures,
            low_n: stats.n < LOW_N,
            stats,
        }
    }

    pub fn key(&self) -> CellKey {
        CellKey {
            method: self.method,
            scenario: self.scenario,
            gap_m: self.gap_m,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsSummary {
    pub cells: Vec<CellMetrics>,
}

const METRICS_FORMAT: &str = "crossbench.metrics";
const METRICS_VERSION: u32 = 1;

impl MetricsSummary {
    pub fn cell(&self, method: Method, scenario: Scenario, gap_m: f64) -> Option<&CellMetrics> {
        self.cells
            .iter()
            .find(|c| c.method == method && c.scenario == scenario && c.gap_m == gap_m)
    }

    /// Combine with a disjoint run: cells with the same key are merged.
    pub fn merge(&self, other: &MetricsSummary) -> MetricsSummary {
        let mut cells = self.cells.clone();
        for c in &other.cells {
            match cells.iter_mut().find(|x| x.key() == c.key()) {
                Some(x) => *x = CellMetrics::from_stats(x.key(), x.stats.merge(&c.stats), x.failures + c.failures),
                None => cells.push(c.clone()),
            }
        }
        MetricsSummary { cells }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        io::save_versioned(path, METRICS_FORMAT, METRICS_VERSION, self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        io::load_versioned(path, METRICS_FORMAT, METRICS_VERSION)
    }

    /// `method,scenario,gap_m,episodes,mean_reward,std,collision_rate`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["method", "scenario", "gap_m", "episodes", "mean_reward", "std", "collision_rate"])
            .map_err(|e| csv_err(path, e))?;
        for c in &self.cells {
            w.write_record([
                c.method.to_string(),
                c.scenario.to_string(),
                c.gap_m.to_string(),
                c.episodes.to_string(),
                c.mean_reward.to_string(),
                c.std.to_string(),
                c.collision_rate.to_string(),
            ])
            .map_err(|e| csv_err(path, e))?;
        }
        finish_csv(path, w)
    }

    /// One `(method, scenario, gap_m, metric, value)` row per number.
    pub fn write_long_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["method", "scenario", "gap_m", "metric", "value"])
            .map_err(|e| csv_err(path, e))?;
        for c in &self.cells {
            for (metric, value) in [
                ("mean_reward", c.mean_reward),
                ("std", c.std),
                ("collision_rate", c.collision_rate),
                ("episodes", c.episodes as f64),
            ] {
                w.write_record([
                    c.method.to_string(),
                    c.scenario.to_string(),
                    c.gap_m.to_string(),
                    metric.to_string(),
                    value.to_string(),
                ])
                .map_err(|e| csv_err(path, e))?;
            }
        }
        finish_csv(path, w)
    }
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::io(path, std::io::Error::other(e))
}

fn finish_csv(path: &Path, w: csv::Writer<Vec<u8>>) -> Result<()> {
    let bytes = w.into_inner().map_err(|e| Error::io(path, std::io::Error::other(e.to_string())))?;
    io::write_atomic(path, &bytes)
}

pub fn write_episodes_csv(path: &Path, episodes: &[(CellKey, EpisodeRecord)]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "method",
        "scenario",
        "gap_m",
        "index",
        "seed",
        "return",
        "collided",
        "steps",
        "done_reason",
        "adaptations",
        "shield_interventions",
        "shield_fallbacks",
    ])
    .map_err(|e| csv_err(path, e))?;
    for (k, r) in episodes {
        w.write_record([
            k.method.to_string(),
            k.scenario.to_string(),
            k.gap_m.to_string(),
            r.index.to_string(),
            r.seed.to_string(),
            r.ret.to_string(),
            r.collided.to_string(),
            r.steps.to_string(),
            format!("{:?}", r.done_reason),
            r.adaptations.to_string(),
            r.shield_interventions.to_string(),
            r.shield_fallbacks.to_string(),
        ])
        .map_err(|e| csv_err(path, e))?;
    }
    finish_csv(path, w)
}

fn dispatch_constraints<'a>(f: &'a SscFunction, mode: &Mode, sim: &SimConfig) -> Result<&'a ConstraintSet> {
    Ok(evaluate_ssc(f, &mode_features(mode, sim))?.map(|(_, cs)| cs).unwrap_or_else(|| {
        log::debug!("mode `{}` not covered; using maximum caution", mode.id);
        max_caution()
    }))
}

fn max_caution() -> &'static ConstraintSet {
    static CS: std::sync::OnceLock<ConstraintSet> = std::sync::OnceLock::new();
    CS.get_or_init(ConstraintSet::max_caution)
}

/// Run one closed-loop episode. `start` is the policy the episode begins with.
pub fn run_episode(spec: &ScenarioSpec, index: usize, arts: &Artifacts, start: &PolicyParams) -> Result<(EpisodeRecord, PolicyParams)> {
    let seed = spec.episode_seed(index);
    let sim_cfg = arts.sim.clone().with_gap(spec.gap_m);
    let true_mode = arts.mode(spec.scenario.mode_id())?;
    let sim = Simulator::new(sim_cfg.clone(), true_mode.clone())?;
    let (mut state, mut obs) = sim.reset(seed);
    let mut env_rng = sim.step_stream(seed);
    let mut act_rng = rng::stream(seed, 2);
    let mut cola_rng = rng::stream(seed, 3);

    let mut theta = start.clone();
    let mut belief: Belief = init_belief(&arts.mode_model)?;
    let mut window = ObservationWindow::new(spec.belief_window, &sim_cfg);
    window.push(0, obs);

    let mut record = EpisodeRecord {
        index,
        seed,
        ret: 0.0,
        collided: false,
        steps: 0,
        done_reason: DoneReason::Timeout,
        adaptations: 0,
        shield_interventions: 0,
        shield_fallbacks: 0,
    };
    while !state.is_terminal() {
        if spec.method.adapts() && state.t % spec.cola.cadence == 0 {
            let bank = arts.bank.as_ref().ok_or_else(|| Error::Config("sample bank missing".into()))?;
            let here = Here { t: state.t, obs: &obs };
            let r = cola_step(&theta, &belief, bank, &spec.cola, here, &mut cola_rng)?;
            if r.accepted {
                record.adaptations += 1;
                theta = r.params;
            }
        }
        let mut dist = action_probs(&theta, &obs)?;
        if spec.method == Method::Numerla {
            let f = arts.ssc.as_ref().ok_or_else(|| Error::Config("knowledge base missing".into()))?;
            let mode = match spec.dispatch {
                Dispatch::Truth => true_mode,
                Dispatch::Belief => arts.mode(&belief.mode_ids[belief.argmax()])?,
            };
            let cs = dispatch_constraints(f, mode, &sim_cfg)?;
            let s_hat = obs.reduced();
            let shielded = apply_constraint(&dist, cs, &s_hat);
            let allowed = cs.rules[shielded.rule].allowed;
            let allowed_mass: f64 = Action::all().filter(|a| allowed.contains(*a)).map(|a| dist.prob(a)).sum();
            for a in Action::all() {
                if !allowed.contains(a) && shielded.dist.prob(a) != 0.0 {
                    return Err(Error::Numeric(format!("shield left mass on masked action {}", a.index())));
                }
            }
            if shielded.fallback != (allowed_mass < FALLBACK_MASS) {
                return Err(Error::Numeric(format!(
                    "shield fallback {} with allowed mass {allowed_mass}",
                    shielded.fallback
                )));
            }
            record.shield_interventions += u32::from(shielded.intervened);
            record.shield_fallbacks += u32::from(shielded.fallback);
            dist = shielded.dist;
        }
        let a = dist.sample(&mut act_rng);
        let step = sim.step(&state, &obs, a, &mut env_rng)?;
        record.ret += step.reward;
        state = step.next_state;
        obs = step.obs;
        window.push(state.t, obs);
        belief = update_belief(&belief, &window, &arts.mode_model, &arts.modes)?.belief;
    }
    record.steps = state.t;
    record.done_reason = state.done.unwrap_or(DoneReason::Timeout);
    record.collided = record.done_reason == DoneReason::Collision;
    Ok((record, theta))
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Experiment {
    pub summary: MetricsSummary,
    /// Successful episodes, ordered by cell then episode index.
    pub episodes: Vec<(CellKey, EpisodeRecord)>,
}

fn run_cell(spec: &ScenarioSpec, arts: &Artifacts) -> Vec<Result<EpisodeRecord>> {
    if spec.carry_theta {
        let mut theta = arts.policy.clone();
        (0..spec.episodes)
            .map(|i| {
                run_episode(spec, i, arts, &theta).map(|(r, next)| {
                    theta = next;
                    r
                })
            })
            .collect()
    } else {
        (0..spec.episodes)
            .into_par_iter()
            .map(|i| run_episode(spec, i, arts, &arts.policy).map(|(r, _)| r))
            .collect()
    }
}

/// Run every spec. Episodes run in parallel on `jobs` threads (0 = all cores);
/// results are aggregated in episode order, so the summary does not depend on scheduling.
pub fn run_experiment(specs: &[ScenarioSpec], arts: &Artifacts, jobs: usize) -> Result<Experiment> {
    for s in specs {
        s.validate()?;
        arts.check_for(s)?;
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    let mut out = Experiment::default();
    for spec in specs {
        let results = pool.install(|| run_cell(spec, arts));
        let mut stats = CellStats::default();
        let mut failures = 0;
        for r in results {
            match r {
                Ok(rec) => {
                    stats.push(rec.ret, rec.collided);
                    out.episodes.push((spec.key(), rec));
                }
                Err(e) => {
                    log::error!("{} {} {} m: episode failed: {e}", spec.method, spec.scenario, spec.gap_m);
                    failures += 1;
                }
            }
        }
        if failures == spec.episodes as u64 {
            return Err(Error::Numeric(format!(
                "every episode of {} {} {} m failed",
                spec.method, spec.scenario, spec.gap_m
            )));
        }
        log::info!(
            "{} {} {} m: collision rate {:.4}, mean return {:.4}",
            spec.method,
            spec.scenario,
            spec.gap_m,
            stats.collision_rate(),
            stats.mean
        );
        out.summary.cells.push(CellMetrics::from_stats(spec.key(), stats, failures));
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CheckStatus {
    Pass,
    Fail,
    Tie,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub status: CheckStatus,
    pub detail: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub cells: Vec<CellMetrics>,
    pub checks: Vec<Check>,
}

impl Report {
    pub fn all_pass(&self) -> bool {
        self.checks.iter().all(|c| c.status == CheckStatus::Pass)
    }

    pub fn write(&self, csv_path: &Path, text_path: &Path) -> Result<()> {
        MetricsSummary { cells: self.cells.clone() }.write_csv(csv_path)?;
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::Numeric(e.to_string()))?;
        io::write_atomic(text_path, text.as_bytes())
    }
}

/// `a < b` as a check: equal values are a tie.
fn strictly_less(name: String, a: f64, b: f64) -> Check {
    let status = if a < b {
        CheckStatus::Pass
    } else if a == b {
        CheckStatus::Tie
    } else {
        CheckStatus::Fail
    };
    Check {
        name,
        status,
        detail: format!("{a} vs {b}"),
    }
}

/// Collision-rate orderings between methods for every scenario and gap present.
pub fn compare_report(summary: &MetricsSummary) -> Result<Report> {
    let methods: Vec<Method> = Method::ALL
        .into_iter()
        .filter(|m| summary.cells.iter().any(|c| c.method == *m))
        .collect();
    if methods.len() < 2 {
        return Err(Error::Usage("a comparison needs at least two methods".into()));
    }
    let mut cells = summary.cells.clone();
    cells.sort_by(|a, b| {
        a.scenario
            .cmp(&b.scenario)
            .then(a.gap_m.total_cmp(&b.gap_m))
            .then(a.method.cmp(&b.method))
    });
    let mut checks = Vec::new();
    let mut seen: Vec<(Scenario, f64)> = Vec::new();
    for c in &cells {
        if seen.iter().any(|(s, g)| *s == c.scenario && *g == c.gap_m) {
            continue;
        }
        seen.push((c.scenario, c.gap_m));
        let rate = |m: Method| summary.cell(m, c.scenario, c.gap_m).map(|x| x.collision_rate);
        for pair in methods.windows(2) {
            let (worse, better) = (pair[0], pair[1]);
            if let (Some(w), Some(b)) = (rate(worse), rate(better)) {
                checks.push(strictly_less(
                    format!("{} {} m: {better} < {worse} collision rate", c.scenario, c.gap_m),
                    b,
                    w,
                ));
            }
        }
    }
    Ok(Report { cells, checks })
}
