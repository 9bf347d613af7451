//! Kinematic vehicle / pedestrian / signal-light crossing simulator.
//!
//! The vehicle moves along `x` towards a crosswalk at `x = 0`; the
//! pedestrian walks across a 4 m lane along `y`. A collision is a box
//! overlap between the vehicle's crossing window and the pedestrian's lane
//! band. The signal light cycles deterministically from step 0.

use std::fmt;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, Stream};

pub const N_ACTIONS: usize = 7;
pub const OBS_DIM: usize = 10;
pub const REDUCED_DIM: usize = 5;
/// Value of every sensor entry the vehicle cannot perceive yet.
pub const MASKED: f64 = -1.0;

/// Throttle (positive) or brake (negative) strength per action index.
pub const ACTION_VALUES: [f64; N_ACTIONS] = [0.0, 1.0, 0.5, 0.25, -1.0, -0.5, -0.25];

/// Vehicle control action: an index into [`ACTION_VALUES`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub struct Action(u8);

impl Action {
    pub const FULL_BRAKE: Action = Action(4);

    pub fn new(index: usize) -> Result<Self> {
        if index < N_ACTIONS {
            Ok(Action(index as u8))
        } else {
            Err(Error::Usage(format!("action index {index} out of range 0..{N_ACTIONS}")))
        }
    }

    pub fn index(self) -> usize {
        self.0 as usize
    }

    pub fn value(self) -> f64 {
        ACTION_VALUES[self.index()]
    }

    pub fn all() -> impl Iterator<Item = Action> {
        (0..N_ACTIONS as u8).map(Action)
    }

    pub fn is_throttle(self) -> bool {
        self.value() > 0.0
    }
}

impl TryFrom<u8> for Action {
    type Error = Error;
    fn try_from(v: u8) -> Result<Self> {
        Action::new(v as usize)
    }
}

impl From<Action> for u8 {
    fn from(a: Action) -> u8 {
        a.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Light {
    Red,
    Yellow,
    Green,
}

impl Light {
    pub fn code(self) -> f64 {
        match self {
            Light::Red => 0.0,
            Light::Yellow => 1.0,
            Light::Green => 2.0,
        }
    }
}

impl fmt::Display for Light {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Light::Red => "red",
            Light::Yellow => "yellow",
            Light::Green => "green",
        };
        f.write_str(s)
    }
}

/// Phase lengths in steps; the cycle is Red → Yellow → Green, repeating from step 0.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LightCycle {
    pub red: u32,
    pub yellow: u32,
    pub green: u32,
}

impl Default for LightCycle {
    fn default() -> Self {
        LightCycle {
            red: 8,
            yellow: 40,
            green: 50,
        }
    }
}

impl LightCycle {
    pub fn period(&self) -> u32 {
        self.red + self.yellow + self.green
    }

    pub fn light_at(&self, t: u32) -> Light {
        let phase = t % self.period();
        if phase < self.red {
            Light::Red
        } else if phase < self.red + self.yellow {
            Light::Yellow
        } else {
            Light::Green
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Behavior {
    /// Waits for the light: never starts on red, may start on yellow, always starts on green.
    Compliant,
    /// Starts at a random step ignoring the light.
    Jaywalk,
}

/// Inclusive range of steps from which a jaywalker's start step is drawn uniformly.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StartWindow {
    pub t_min: u32,
    pub t_max: u32,
}

impl Default for StartWindow {
    fn default() -> Self {
        StartWindow { t_min: 0, t_max: 100 }
    }
}

impl StartWindow {
    pub fn len(&self) -> u32 {
        self.t_max - self.t_min + 1
    }
}

/// Latent environment mode: the pedestrian's behavior model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mode {
    pub id: String,
    pub behavior: Behavior,
    /// Per-step probability of starting on yellow (compliant pedestrians only).
    pub yellow_go_prob: f64,
    pub jaywalk_start: StartWindow,
}

/// Dimension of [`Mode::features`].
pub const MODE_FEATURE_DIM: usize = 4;

impl Mode {
    pub fn compliant() -> Self {
        Mode {
            id: "compliant".into(),
            behavior: Behavior::Compliant,
            yellow_go_prob: 0.1,
            jaywalk_start: StartWindow::default(),
        }
    }

    pub fn jaywalk() -> Self {
        Mode {
            id: "jaywalk".into(),
            behavior: Behavior::Jaywalk,
            yellow_go_prob: 0.0,
            jaywalk_start: StartWindow::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.yellow_go_prob) {
            return Err(Error::Config(format!(
                "mode `{}`: yellow_go_prob {} outside [0, 1]",
                self.id, self.yellow_go_prob
            )));
        }
        if self.jaywalk_start.t_min > self.jaywalk_start.t_max {
            return Err(Error::Config(format!(
                "mode `{}`: empty jaywalk start window",
                self.id
            )));
        }
        Ok(())
    }

    /// Probability that the pedestrian starts exactly at step `t`, given the light schedule.
    pub fn start_pmf(&self, cycle: &LightCycle, t: u32) -> f64 {
        match self.behavior {
            Behavior::Jaywalk => {
                let w = self.jaywalk_start;
                if (w.t_min..=w.t_max).contains(&t) {
                    1.0 / f64::from(w.len())
                } else {
                    0.0
                }
            }
            Behavior::Compliant => {
                let waiting = if t == 0 { 1.0 } else { self.start_survival(cycle, t - 1) };
                waiting * self.start_hazard(cycle.light_at(t))
            }
        }
    }

    /// Probability that the pedestrian has not started by the end of step `t`.
    pub fn start_survival(&self, cycle: &LightCycle, t: u32) -> f64 {
        match self.behavior {
            Behavior::Jaywalk => {
                let w = self.jaywalk_start;
                if t < w.t_min {
                    1.0
                } else if t >= w.t_max {
                    0.0
                } else {
                    f64::from(w.t_max - t) / f64::from(w.len())
                }
            }
            Behavior::Compliant => (0..=t)
                .map(|u| 1.0 - self.start_hazard(cycle.light_at(u)))
                .product(),
        }
    }

    /// Per-step start probability of a waiting compliant pedestrian.
    pub fn start_hazard(&self, light: Light) -> f64 {
        match light {
            Light::Red => 0.0,
            Light::Yellow => self.yellow_go_prob,
            Light::Green => 1.0,
        }
    }

    /// `[is_compliant, is_jaywalk, yellow_go_prob, mean start step / h_max]`.
    pub fn features(&self, cycle: &LightCycle, h_max: u32) -> Vec<f64> {
        let horizon = h_max.max(1);
        let mut mean = 0.0;
        let mut mass = 0.0;
        for t in 0..horizon {
            let p = self.start_pmf(cycle, t);
            mean += f64::from(t) * p;
            mass += p;
        }
        mean += f64::from(horizon) * (1.0 - mass).max(0.0);
        let (c, j) = match self.behavior {
            Behavior::Compliant => (1.0, 0.0),
            Behavior::Jaywalk => (0.0, 1.0),
        };
        vec![c, j, self.yellow_go_prob, mean / f64::from(horizon)]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RewardConfig {
    pub speed_bonus: f64,
    pub goal_bonus: f64,
    pub collision_penalty: f64,
    pub step_cost: f64,
}

impl Default for RewardConfig {
    fn default() -> Self {
        RewardConfig {
            speed_bonus: 0.1,
            goal_bonus: 1.0,
            collision_penalty: 10.0,
            step_cost: 0.01,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    /// Initial vehicle distance to the crosswalk (m).
    pub initial_gap_m: f64,
    /// Initial vehicle speed (m/s).
    pub v0: f64,
    pub dt: f64,
    pub h_max: u32,
    pub light_cycle: LightCycle,
    pub seed: u64,
    pub a_max: f64,
    pub v_max: f64,
    pub walk_speed: f64,
    pub lane_width: f64,
    /// The pedestrian occupies the vehicle lane while `lane_band.0 < y_p < lane_band.1`.
    pub lane_band: (f64, f64),
    /// Half-length of the vehicle's crossing window around the crosswalk.
    pub crossing_half_width: f64,
    pub sensor_range: f64,
    /// The vehicle reaches its goal this far past the crossing window.
    pub goal_past_m: f64,
    pub reward: RewardConfig,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            initial_gap_m: 25.0,
            v0: 8.0,
            dt: 0.1,
            h_max: 200,
            light_cycle: LightCycle::default(),
            seed: 0,
            a_max: 5.0,
            v_max: 15.0,
            walk_speed: 1.5,
            lane_width: 4.0,
            lane_band: (0.5, 3.5),
            crossing_half_width: 2.0,
            sensor_range: 15.0,
            goal_past_m: 1.0,
            reward: RewardConfig::default(),
        }
    }
}

pub const STANDARD_GAPS: [f64; 3] = [15.0, 25.0, 35.0];

impl SimConfig {
    pub fn with_gap(mut self, gap: f64) -> Self {
        self.initial_gap_m = gap;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("initial_gap_m", self.initial_gap_m),
            ("dt", self.dt),
            ("a_max", self.a_max),
            ("v_max", self.v_max),
            ("walk_speed", self.walk_speed),
            ("lane_width", self.lane_width),
            ("crossing_half_width", self.crossing_half_width),
            ("sensor_range", self.sensor_range),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.v0.is_finite() && self.v0 >= 0.0 && self.v0 <= self.v_max) {
            return Err(Error::Config(format!(
                "v0 must lie in [0, v_max={}], got {}",
                self.v_max, self.v0
            )));
        }
        if self.h_max == 0 {
            return Err(Error::Config("h_max must be at least 1".into()));
        }
        if self.light_cycle.period() == 0 {
            return Err(Error::Config("light cycle has zero length".into()));
        }
        let (lo, hi) = self.lane_band;
        if !(0.0 <= lo && lo < hi && hi <= self.lane_width) {
            return Err(Error::Config(format!("lane band ({lo}, {hi}) not inside the lane")));
        }
        Ok(())
    }

    pub fn is_standard_gap(&self) -> bool {
        STANDARD_GAPS.contains(&self.initial_gap_m)
    }

    /// Vehicle position where the crossing window begins (the crosswalk is at x = 0).
    pub fn window_entry_x(&self) -> f64 {
        -self.crossing_half_width
    }

    pub fn goal_x(&self) -> f64 {
        self.crossing_half_width + self.goal_past_m
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum DoneReason {
    Goal,
    Collision,
    Timeout,
}

/// Full simulator state. `x_c` is measured from the crosswalk (negative before it).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorldState {
    pub x_c: f64,
    pub v_c: f64,
    pub y_p: f64,
    pub v_p: f64,
    pub light: Light,
    pub t: u32,
    pub walking_started: bool,
    /// Step at which walking began.
    pub started_at: Option<u32>,
    /// Jaywalker's start step, drawn once at reset.
    pub planned_start: Option<u32>,
    pub done: Option<DoneReason>,
}

impl WorldState {
    pub fn is_terminal(&self) -> bool {
        self.done.is_some()
    }

    pub fn pedestrian_in_lane(&self, cfg: &SimConfig) -> bool {
        let (lo, hi) = cfg.lane_band;
        self.y_p > lo && self.y_p < hi
    }

    /// Longitudinal distance between the vehicle and the crosswalk.
    pub fn distance_to_pedestrian(&self) -> f64 {
        self.x_c.abs()
    }
}

/// Sensor vector `(d_c, d_p, v_c, v_p, l, d_c', d_p', v_c', v_p', l')`; primes are the previous step.
///
/// `d_c` is the vehicle's distance to the entry of the crossing window (negative once inside),
/// `d_p` the pedestrian's remaining lateral distance across the lane.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Observation(pub [f64; OBS_DIM]);

impl Observation {
    pub fn d_c(&self) -> f64 {
        self.0[0]
    }
    pub fn d_p(&self) -> f64 {
        self.0[1]
    }
    pub fn v_c(&self) -> f64 {
        self.0[2]
    }
    pub fn v_p(&self) -> f64 {
        self.0[3]
    }
    pub fn light(&self) -> f64 {
        self.0[4]
    }

    /// Current-step entries only; what the symbolic constraints look at.
    pub fn reduced(&self) -> [f64; REDUCED_DIM] {
        [self.0[0], self.0[1], self.0[2], self.0[3], self.0[4]]
    }

    pub fn pedestrian_masked(&self) -> bool {
        self.0[1] == MASKED && self.0[3] == MASKED && self.0[4] == MASKED
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepResult {
    pub next_state: WorldState,
    pub obs: Observation,
    pub reward: f64,
    pub collision: bool,
    pub done: bool,
    pub done_reason: Option<DoneReason>,
}

/// What the pedestrian does on one step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PedestrianMove {
    pub starts_now: bool,
    /// Lateral acceleration (m/s²) applied over this step.
    pub lateral_accel: f64,
}

/// Probability that a still-waiting pedestrian starts walking on this step.
pub fn pedestrian_start_prob(cfg: &SimConfig, state: &WorldState, mode: &Mode) -> f64 {
    if state.walking_started {
        return 0.0;
    }
    match mode.behavior {
        Behavior::Compliant => mode.start_hazard(cfg.light_cycle.light_at(state.t)),
        Behavior::Jaywalk => {
            if state.planned_start.is_some_and(|s| state.t >= s) {
                1.0
            } else {
                0.0
            }
        }
    }
}

/// Pedestrian behavior model for one step.
pub fn pedestrian_policy(cfg: &SimConfig, state: &WorldState, mode: &Mode, rng: &mut Stream) -> PedestrianMove {
    let p = pedestrian_start_prob(cfg, state, mode);
    let starts_now = p >= 1.0 || (p > 0.0 && rng.gen::<f64>() < p);
    pedestrian_move(cfg, state, starts_now)
}

/// Kinematics of the pedestrian given the start decision.
pub fn pedestrian_move(cfg: &SimConfig, state: &WorldState, starts_now: bool) -> PedestrianMove {
    let walking = state.walking_started || starts_now;
    let target = if walking && state.y_p < cfg.lane_width {
        cfg.walk_speed
    } else {
        0.0
    };
    PedestrianMove {
        starts_now,
        lateral_accel: (target - state.v_p) / cfg.dt,
    }
}

pub fn collision_check(cfg: &SimConfig, state: &WorldState) -> bool {
    state.x_c.abs() <= cfg.crossing_half_width && state.pedestrian_in_lane(cfg)
}

/// Per-step reward, evaluated on the post-transition state.
pub fn reward(cfg: &SimConfig, state: &WorldState, _action: Action, collision: bool, reached_goal: bool) -> f64 {
    let rc = &cfg.reward;
    let mut r = rc.speed_bonus * (state.v_c / cfg.v_max) - rc.step_cost;
    if reached_goal {
        r += rc.goal_bonus;
    }
    if collision {
        r -= rc.collision_penalty;
    }
    r
}

/// Build the sensor vector for `state`; `prev` is the previous observation (`None` at reset).
pub fn observe(cfg: &SimConfig, state: &WorldState, prev: Option<&Observation>) -> Observation {
    let d_c = cfg.window_entry_x() - state.x_c;
    let sensed = state.distance_to_pedestrian() <= cfg.sensor_range;
    let (d_p, v_p, l) = if sensed {
        (cfg.lane_width - state.y_p, state.v_p, state.light.code())
    } else {
        (MASKED, MASKED, MASKED)
    };
    let prev = prev.map(Observation::reduced).unwrap_or([MASKED; REDUCED_DIM]);
    Observation([d_c, d_p, state.v_c, v_p, l, prev[0], prev[1], prev[2], prev[3], prev[4]])
}

/// A configured simulator for one (config, mode) pair. Stateless between calls.
#[derive(Clone, Debug)]
pub struct Simulator {
    cfg: SimConfig,
    mode: Mode,
}

impl Simulator {
    pub fn new(cfg: SimConfig, mode: Mode) -> Result<Self> {
        cfg.validate()?;
        mode.validate()?;
        if !cfg.is_standard_gap() {
            log::debug!("nonstandard initial gap {} m", cfg.initial_gap_m);
        }
        Ok(Simulator { cfg, mode })
    }

    pub fn config(&self) -> &SimConfig {
        &self.cfg
    }

    pub fn mode(&self) -> &Mode {
        &self.mode
    }

    /// Initial state. The seed fixes the jaywalker's start step; step noise
    /// comes from [`Simulator::step_stream`].
    pub fn reset(&self, seed: u64) -> (WorldState, Observation) {
        let planned_start = match self.mode.behavior {
            Behavior::Jaywalk => {
                let w = self.mode.jaywalk_start;
                Some(rng::stream(seed, 0).gen_range(w.t_min..=w.t_max))
            }
            Behavior::Compliant => None,
        };
        let state = WorldState {
            x_c: -self.cfg.initial_gap_m,
            v_c: self.cfg.v0,
            y_p: 0.0,
            v_p: 0.0,
            light: self.cfg.light_cycle.light_at(0),
            t: 0,
            walking_started: false,
            started_at: None,
            planned_start,
            done: None,
        };
        let obs = observe(&self.cfg, &state, None);
        (state, obs)
    }

    pub fn step_stream(&self, seed: u64) -> Stream {
        rng::stream(seed, 1)
    }

    pub fn step(&self, state: &WorldState, prev_obs: &Observation, action: Action, rng: &mut Stream) -> Result<StepResult> {
        if state.is_terminal() {
            return Err(Error::Usage(format!("step called on terminal state at t={}", state.t)));
        }
        let ped = pedestrian_policy(&self.cfg, state, &self.mode, rng);
        Ok(self.transition(state, prev_obs, action, ped))
    }

    /// Probability that the pedestrian starts on the next step from `state`.
    pub fn start_prob(&self, state: &WorldState) -> f64 {
        pedestrian_start_prob(&self.cfg, state, &self.mode)
    }

    /// Deterministic step with the pedestrian's start decision supplied by the caller.
    pub fn step_given(&self, state: &WorldState, prev_obs: &Observation, action: Action, starts_now: bool) -> Result<StepResult> {
        if state.is_terminal() {
            return Err(Error::Usage(format!("step called on terminal state at t={}", state.t)));
        }
        let starts_now = starts_now && !state.walking_started;
        Ok(self.transition(state, prev_obs, action, pedestrian_move(&self.cfg, state, starts_now)))
    }

    fn transition(&self, state: &WorldState, prev_obs: &Observation, action: Action, ped: PedestrianMove) -> StepResult {
        let cfg = &self.cfg;
        let mut next = state.clone();

        if ped.starts_now {
            next.walking_started = true;
            next.started_at = Some(state.t);
        }
        next.v_p = (state.v_p + ped.lateral_accel * cfg.dt).max(0.0);
        next.y_p = (state.y_p + next.v_p * cfg.dt).min(cfg.lane_width);
        if next.y_p >= cfg.lane_width {
            next.v_p = 0.0;
        }

        next.v_c = (state.v_c + action.value() * cfg.a_max * cfg.dt).clamp(0.0, cfg.v_max);
        next.x_c = state.x_c + next.v_c * cfg.dt;

        next.t = state.t + 1;
        next.light = cfg.light_cycle.light_at(next.t);

        let collision = collision_check(cfg, &next);
        let reached_goal = !collision && next.x_c >= cfg.goal_x();
        let done_reason = if collision {
            Some(DoneReason::Collision)
        } else if reached_goal {
            Some(DoneReason::Goal)
        } else if next.t >= cfg.h_max {
            Some(DoneReason::Timeout)
        } else {
            None
        };
        next.done = done_reason;
        let r = reward(cfg, &next, action, collision, reached_goal);
        let obs = observe(cfg, &next, Some(prev_obs));
        StepResult {
            next_state: next,
            obs,
            reward: r,
            collision,
            done: done_reason.is_some(),
            done_reason,
        }
    }
}

/// One row of an episode trace dump.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub t: u32,
    pub x_c: f64,
    pub v_c: f64,
    pub y_p: f64,
    pub v_p: f64,
    pub light: Light,
    pub action: usize,
    pub reward: f64,
    pub collision: bool,
}

impl TraceRow {
    pub fn new(state: &WorldState, action: Action, reward: f64, collision: bool) -> Self {
        TraceRow {
            t: state.t,
            x_c: state.x_c,
            v_c: state.v_c,
            y_p: state.y_p,
            v_p: state.v_p,
            light: state.light,
            action: action.index(),
            reward,
            collision,
        }
    }
}

pub fn write_trace_csv(path: &Path, rows: &[TraceRow]) -> Result<()> {
    let mut buf = Vec::new();
    {
        let mut w = csv::Writer::from_writer(&mut buf);
        for row in rows {
            w.serialize(row).map_err(|e| Error::io(path, e.into()))?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
    }
    crate::io::write_atomic(path, &buf)
}

/// Run one episode with a caller-supplied controller; used by tests and the trainer.
pub fn rollout<F>(sim: &Simulator, seed: u64, mut controller: F) -> Result<Vec<TraceRow>>
where
    F: FnMut(&WorldState, &Observation) -> Action,
{
    let (mut state, mut obs) = sim.reset(seed);
    let mut rng = sim.step_stream(seed);
    let mut rows = Vec::new();
    while !state.is_terminal() {
        let a = controller(&state, &obs);
        let step = sim.step(&state, &obs, a, &mut rng)?;
        rows.push(TraceRow::new(&step.next_state, a, step.reward, step.collision));
        state = step.next_state;
        obs = step.obs;
    }
    Ok(rows)
}
