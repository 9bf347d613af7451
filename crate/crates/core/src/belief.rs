//! Recursive Bayesian filter over the latent pedestrian mode.
//!
//! The only mode-discriminating signal is *when* the pedestrian starts
//! walking relative to the light. Each observation narrows the set of start
//! steps consistent with what has been seen; the per-step likelihood is the
//! conditional probability of the new set given the previous one, so the
//! product over an episode telescopes to the full-sequence likelihood.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::env::{Light, LightCycle, Mode, Observation, SimConfig};
use crate::error::{Error, Result};

const STOCHASTIC_TOL: f64 = 1e-9;

/// Mode dynamics `p_z(z' | z)` and the initial distribution `ρ_z`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModeTransitionModel {
    pub mode_ids: Vec<String>,
    /// Row-stochastic: `p_z[i][j] = P(z' = j | z = i)`.
    pub p_z: Vec<Vec<f64>>,
    pub rho_z: Vec<f64>,
}

impl ModeTransitionModel {
    /// Modes fixed within an episode, prior `rho_z`.
    pub fn stationary(mode_ids: Vec<String>, rho_z: Vec<f64>) -> Result<Self> {
        let n = mode_ids.len();
        let p_z = (0..n)
            .map(|i| (0..n).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
            .collect();
        let m = ModeTransitionModel { mode_ids, p_z, rho_z };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.mode_ids.len();
        if n == 0 {
            return Err(Error::Config("mode transition model has no modes".into()));
        }
        if self.rho_z.len() != n || self.p_z.len() != n {
            return Err(Error::Config(format!(
                "mode model dimensions disagree: {n} modes, prior {}, matrix rows {}",
                self.rho_z.len(),
                self.p_z.len()
            )));
        }
        check_distribution("rho_z", &self.rho_z)?;
        for (i, row) in self.p_z.iter().enumerate() {
            if row.len() != n {
                return Err(Error::Config(format!("p_z row {i} has {} entries, expected {n}", row.len())));
            }
            check_distribution(&format!("p_z row {i}"), row)?;
        }
        Ok(())
    }
}

fn check_distribution(name: &str, p: &[f64]) -> Result<()> {
    if p.iter().any(|x| !(x.is_finite() && *x >= 0.0)) {
        return Err(Error::Config(format!("{name} has negative or non-finite entries")));
    }
    let sum: f64 = p.iter().sum();
    if (sum - 1.0).abs() > STOCHASTIC_TOL {
        return Err(Error::Config(format!("{name} sums to {sum}, not 1")));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Belief {
    pub mode_ids: Vec<String>,
    pub probs: Vec<f64>,
}

impl Belief {
    pub fn prob_of(&self, mode_id: &str) -> f64 {
        self.mode_ids
            .iter()
            .position(|m| m == mode_id)
            .map_or(0.0, |i| self.probs[i])
    }

    /// Most likely mode; ties go to the earlier mode.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &p) in self.probs.iter().enumerate() {
            if p > self.probs[best] {
                best = i;
            }
        }
        best
    }

    pub fn one_hot(mode_ids: Vec<String>, index: usize) -> Self {
        let probs = (0..mode_ids.len()).map(|i| if i == index { 1.0 } else { 0.0 }).collect();
        Belief { mode_ids, probs }
    }
}

pub fn init_belief(model: &ModeTransitionModel) -> Result<Belief> {
    model.validate()?;
    Ok(Belief {
        mode_ids: model.mode_ids.clone(),
        probs: model.rho_z.clone(),
    })
}

/// What an observation reveals about the pedestrian's start step.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StartEvidence {
    /// Pedestrian entries masked.
    Unknown,
    /// Still at the curb: the start step is at least this value.
    NotBefore(u32),
    /// Walking or done: the start step lies in this inclusive range.
    Within(u32, u32),
}

/// The last `capacity` observations with their step indices, plus the
/// episode's light history.
#[derive(Clone, Debug)]
pub struct ObservationWindow {
    capacity: usize,
    entries: VecDeque<(u32, Observation)>,
    lights: Vec<Light>,
    cycle: LightCycle,
    walk_step: f64,
    lane_width: f64,
}

impl ObservationWindow {
    pub const DEFAULT_CAPACITY: usize = 5;

    pub fn new(capacity: usize, sim: &SimConfig) -> Self {
        ObservationWindow {
            capacity: capacity.max(2),
            entries: VecDeque::new(),
            lights: Vec::new(),
            cycle: sim.light_cycle,
            walk_step: sim.walk_speed * sim.dt,
            lane_width: sim.lane_width,
        }
    }

    /// Append the observation taken at step `t`.
    pub fn push(&mut self, t: u32, obs: Observation) {
        while self.lights.len() <= t as usize {
            let u = self.lights.len() as u32;
            self.lights.push(self.cycle.light_at(u));
        }
        if self.entries.len() == self.capacity {
            self.entries.pop_front();
        }
        self.entries.push_back((t, obs));
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn lights(&self) -> &[Light] {
        &self.lights
    }

    pub fn cycle(&self) -> &LightCycle {
        &self.cycle
    }

    pub fn evidence(&self, t: u32, obs: &Observation) -> StartEvidence {
        if obs.pedestrian_masked() {
            return StartEvidence::Unknown;
        }
        let y = (self.lane_width - obs.d_p()).max(0.0);
        if y <= 0.0 && obs.v_p() <= 0.0 {
            return StartEvidence::NotBefore(t);
        }
        let full_steps = (self.lane_width / self.walk_step - 1e-9).ceil() as u32;
        if y >= self.lane_width {
            // Finished crossing: any start at least `full_steps` ago.
            return StartEvidence::Within(0, t.saturating_sub(full_steps));
        }
        let walked = (y / self.walk_step).round() as u32;
        let s = t.saturating_sub(walked.max(1));
        StartEvidence::Within(s, s)
    }

    /// Evidence of the newest and the previous observation.
    fn latest_pair(&self) -> Option<(StartEvidence, StartEvidence)> {
        let (t, obs) = self.entries.back()?;
        let current = self.evidence(*t, obs);
        let previous = self
            .entries
            .iter()
            .rev()
            .nth(1)
            .map_or(StartEvidence::Unknown, |(pt, po)| self.evidence(*pt, po));
        Some((previous, current))
    }
}

fn set_probability(mode: &Mode, cycle: &LightCycle, ev: StartEvidence) -> f64 {
    match ev {
        StartEvidence::Unknown => 1.0,
        StartEvidence::NotBefore(0) => 1.0,
        StartEvidence::NotBefore(t) => mode.start_survival(cycle, t - 1),
        StartEvidence::Within(lo, hi) => (lo..=hi).map(|s| mode.start_pmf(cycle, s)).sum(),
    }
}

/// Likelihood of the newest observation given the one before it, under `mode`.
/// Masked evidence returns 1.
pub fn mode_likelihood(mode: &Mode, window: &ObservationWindow) -> f64 {
    let Some((previous, current)) = window.latest_pair() else {
        return 1.0;
    };
    let cycle = window.cycle();
    match (previous, current) {
        (_, StartEvidence::Unknown) => 1.0,
        (StartEvidence::Within(..), _) => 1.0,
        (prev, StartEvidence::NotBefore(t)) => {
            let denom = set_probability(mode, cycle, prev);
            if denom <= 0.0 {
                0.0
            } else {
                set_probability(mode, cycle, StartEvidence::NotBefore(t)) / denom
            }
        }
        (prev, StartEvidence::Within(lo, hi)) => {
            let lo = match prev {
                StartEvidence::NotBefore(p) => lo.max(p),
                _ => lo,
            };
            let denom = set_probability(mode, cycle, prev);
            if denom <= 0.0 || lo > hi {
                0.0
            } else {
                set_probability(mode, cycle, StartEvidence::Within(lo, hi)) / denom
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BeliefUpdate {
    pub belief: Belief,
    /// Every mode assigned zero likelihood; the belief fell back to the prediction.
    pub degenerate: bool,
}

/// Predict with `p_z`, then correct with the newest evidence in `window`.
pub fn update_belief(b: &Belief, window: &ObservationWindow, model: &ModeTransitionModel, modes: &[Mode]) -> Result<BeliefUpdate> {
    let n = b.probs.len();
    if n != model.mode_ids.len() || b.mode_ids != model.mode_ids {
        return Err(Error::Usage("belief and mode model disagree on the mode list".into()));
    }
    let mut predicted = vec![0.0; n];
    for (i, &bi) in b.probs.iter().enumerate() {
        for (j, pj) in predicted.iter_mut().enumerate() {
            *pj += bi * model.p_z[i][j];
        }
    }
    let mut posterior = Vec::with_capacity(n);
    for (id, &p) in model.mode_ids.iter().zip(&predicted) {
        let mode = modes
            .iter()
            .find(|m| &m.id == id)
            .ok_or_else(|| Error::Config(format!("no behavior model for mode `{id}`")))?;
        posterior.push(p * mode_likelihood(mode, window));
    }
    let total: f64 = posterior.iter().sum();
    let (probs, degenerate) = if total > 0.0 && total.is_finite() {
        (posterior.iter().map(|p| p / total).collect(), false)
    } else {
        log::warn!("degenerate evidence: every mode has zero likelihood; keeping the predicted belief");
        let s: f64 = predicted.iter().sum();
        (predicted.iter().map(|p| p / s).collect(), true)
    };
    Ok(BeliefUpdate {
        belief: Belief {
            mode_ids: b.mode_ids.clone(),
            probs,
        },
        degenerate,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{Behavior, MASKED};

    fn sim() -> SimConfig {
        SimConfig {
            light_cycle: LightCycle {
                red: 30,
                yellow: 20,
                green: 50,
            },
            ..SimConfig::default()
        }
    }

    fn modes() -> Vec<Mode> {
        vec![Mode::compliant(), Mode::jaywalk()]
    }

    fn model() -> ModeTransitionModel {
        ModeTransitionModel::stationary(vec!["compliant".into(), "jaywalk".into()], vec![0.5, 0.5]).unwrap()
    }

    fn masked() -> Observation {
        Observation([10.0, MASKED, 8.0, MASKED, MASKED, 10.8, MASKED, 8.0, MASKED, MASKED])
    }

    /// Pedestrian observed at the curb (`walked = None`) or `walked` steps into the crossing.
    fn ped_obs(walked: Option<u32>, light: f64) -> Observation {
        let (d_p, v_p) = match walked {
            None => (4.0, 0.0),
            Some(n) => (4.0 - 0.15 * n as f64, 1.5),
        };
        Observation([5.0, d_p, 8.0, v_p, light, 5.8, d_p, 8.0, v_p, light])
    }

    #[test]
    fn init_belief_copies_prior() {
        let b = init_belief(&model()).unwrap();
        assert_eq!(b.probs, vec![0.5, 0.5]);
        let m = ModeTransitionModel::stationary(vec!["a".into(), "b".into()], vec![1.0, 0.0]).unwrap();
        assert_eq!(init_belief(&m).unwrap().probs, vec![1.0, 0.0]);
        let bad = ModeTransitionModel {
            mode_ids: vec!["a".into()],
            p_z: vec![vec![0.5]],
            rho_z: vec![1.0],
        };
        assert!(matches!(init_belief(&bad), Err(Error::Config(_))));
    }

    #[test]
    fn masked_window_is_uninformative() {
        let mut w = ObservationWindow::new(5, &sim());
        w.push(0, masked());
        w.push(1, masked());
        for m in modes() {
            assert_eq!(mode_likelihood(&m, &w), 1.0);
        }
    }

    #[test]
    fn start_on_red_rules_out_compliant() {
        let mut w = ObservationWindow::new(5, &sim());
        w.push(3, ped_obs(None, 0.0));
        w.push(4, ped_obs(Some(1), 0.0));
        assert_eq!(mode_likelihood(&Mode::compliant(), &w), 0.0);
        assert!(mode_likelihood(&Mode::jaywalk(), &w) > 0.0);
    }

    #[test]
    fn start_on_yellow_has_compliant_likelihood_point_one() {
        let mut w = ObservationWindow::new(5, &sim());
        w.push(30, ped_obs(None, 1.0));
        w.push(31, ped_obs(Some(1), 1.0));
        let l = mode_likelihood(&Mode::compliant(), &w);
        assert!((l - 0.1).abs() < 1e-15, "{l}");
    }

    #[test]
    fn exact_bayes_by_hand() {
        // Identity p_z, b = (0.5, 0.5), likelihoods (0, 0.1) -> (0, 1).
        let mut w = ObservationWindow::new(5, &sim());
        w.push(3, ped_obs(None, 0.0));
        w.push(4, ped_obs(Some(1), 0.0));
        let up = update_belief(&init_belief(&model()).unwrap(), &w, &model(), &modes()).unwrap();
        assert_eq!(up.belief.probs, vec![0.0, 1.0]);
        assert!(!up.degenerate);
    }

    #[test]
    fn uninformative_update_leaves_belief_unchanged() {
        let mut w = ObservationWindow::new(5, &sim());
        w.push(0, masked());
        let b = Belief {
            mode_ids: model().mode_ids,
            probs: vec![0.3, 0.7],
        };
        let up = update_belief(&b, &w, &model(), &modes()).unwrap();
        assert_eq!(up.belief.probs, b.probs);
    }

    #[test]
    fn degenerate_evidence_falls_back_to_prediction() {
        // Compliant-only belief sees a start on red.
        let mut w = ObservationWindow::new(5, &sim());
        w.push(3, ped_obs(None, 0.0));
        w.push(4, ped_obs(Some(1), 0.0));
        let b = Belief {
            mode_ids: model().mode_ids,
            probs: vec![1.0, 0.0],
        };
        let up = update_belief(&b, &w, &model(), &modes()).unwrap();
        assert!(up.degenerate);
        assert_eq!(up.belief.probs, vec![1.0, 0.0]);
    }

    #[test]
    fn mismatched_mode_lists_are_rejected() {
        let w = ObservationWindow::new(5, &sim());
        let b = Belief {
            mode_ids: vec!["x".into(), "y".into()],
            probs: vec![0.5, 0.5],
        };
        assert!(update_belief(&b, &w, &model(), &modes()).is_err());
    }

    #[test]
    fn evidence_decodes_start_step() {
        let w = ObservationWindow::new(5, &sim());
        assert_eq!(w.evidence(12, &ped_obs(None, 0.0)), StartEvidence::NotBefore(12));
        assert_eq!(w.evidence(12, &ped_obs(Some(3), 0.0)), StartEvidence::Within(9, 9));
        assert_eq!(w.evidence(12, &masked()), StartEvidence::Unknown);
        let mut done = ped_obs(None, 2.0);
        done.0[1] = 0.0;
        done.0[3] = 0.0;
        assert_eq!(w.evidence(40, &done), StartEvidence::Within(0, 13));
    }

    #[test]
    fn non_identity_transitions_mix_before_correcting() {
        let m = ModeTransitionModel {
            mode_ids: vec!["compliant".into(), "jaywalk".into()],
            p_z: vec![vec![0.9, 0.1], vec![0.2, 0.8]],
            rho_z: vec![1.0, 0.0],
        };
        let mut w = ObservationWindow::new(5, &sim());
        w.push(0, masked());
        let b = init_belief(&m).unwrap();
        let up = update_belief(&b, &w, &m, &modes()).unwrap();
        assert!((up.belief.probs[0] - 0.9).abs() < 1e-15);
        assert!((up.belief.probs[1] - 0.1).abs() < 1e-15);
        assert_eq!(modes()[1].behavior, Behavior::Jaywalk);
    }
}
