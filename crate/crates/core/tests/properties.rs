use proptest::prelude::*;

use crossbench::belief::{init_belief, update_belief, ModeTransitionModel, ObservationWindow};
use crossbench::env::{Action, Light, Mode, SimConfig, Simulator, TraceRow, N_ACTIONS, REDUCED_DIM};
use crossbench::harness::{CellStats, Method, Scenario};
use crossbench::policy::{action_probs, ActionDistribution, Arch, PolicyParams};
use crossbench::rng;
use crossbench::ssc::{
    apply_constraint, candidate_grammar, evaluate_ssc, ActionSet, Case, Conjunction, LinearIneq, SscFunction, FALLBACK_MASS,
};

fn mode_strategy() -> impl Strategy<Value = Mode> {
    prop_oneof![Just(Mode::compliant()), Just(Mode::jaywalk())]
}

/// Roll out with actions from a fixed script (cycled).
fn scripted(sim: &Simulator, seed: u64, script: &[usize]) -> Vec<TraceRow> {
    let mut i = 0;
    crossbench::env::rollout(sim, seed, |_, _| {
        let a = Action::new(script[i % script.len()]).unwrap();
        i += 1;
        a
    })
    .unwrap()
}

fn dist_strategy() -> impl Strategy<Value = ActionDistribution> {
    prop::array::uniform7(prop_oneof![Just(0.0), 1e-15..1e-13f64, 0.0..1.0f64]).prop_filter_map("positive mass", |w| {
        let s: f64 = w.iter().sum();
        (s > 0.0).then(|| ActionDistribution(w.map(|x| x / s)))
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn rollouts_are_deterministic(seed in any::<u64>(), mode in mode_strategy(), gap in prop::sample::select(vec![15.0, 25.0, 35.0]),
                                  script in prop::collection::vec(0..N_ACTIONS, 1..8)) {
        let sim = Simulator::new(SimConfig::default().with_gap(gap), mode).unwrap();
        prop_assert_eq!(scripted(&sim, seed, &script), scripted(&sim, seed, &script));
    }

    #[test]
    fn kinematics_stay_in_bounds(seed in any::<u64>(), mode in mode_strategy(), script in prop::collection::vec(0..N_ACTIONS, 1..8)) {
        let cfg = SimConfig::default().with_gap(35.0);
        let sim = Simulator::new(cfg.clone(), mode).unwrap();
        let rows = scripted(&sim, seed, &script);
        let mut x = -cfg.initial_gap_m;
        let mut y = 0.0;
        for r in &rows {
            prop_assert!((0.0..=cfg.v_max).contains(&r.v_c));
            prop_assert!(r.x_c >= x);
            prop_assert!(r.y_p >= y && r.y_p <= cfg.lane_width);
            prop_assert!(r.v_p >= 0.0 && r.v_p <= cfg.walk_speed + 1e-12);
            x = r.x_c;
            y = r.y_p;
        }
        prop_assert!(rows.len() <= cfg.h_max as usize);
        prop_assert!(rows.iter().filter(|r| r.collision).count() <= 1);
    }

    #[test]
    fn masking_tracks_sensor_range(seed in any::<u64>(), mode in mode_strategy(), action in 0..N_ACTIONS) {
        let cfg = SimConfig::default().with_gap(35.0);
        let sim = Simulator::new(cfg.clone(), mode).unwrap();
        let (mut st, mut obs) = sim.reset(seed);
        let mut r = rng::stream(seed, 1);
        loop {
            prop_assert_eq!(obs.pedestrian_masked(), st.x_c.abs() > cfg.sensor_range);
            if st.is_terminal() {
                break;
            }
            let step = sim.step(&st, &obs, Action::new(action).unwrap(), &mut r).unwrap();
            st = step.next_state;
            obs = step.obs;
        }
    }

    #[test]
    fn compliant_pedestrians_never_start_on_red(seed in any::<u64>(), yellow in 0.0..1.0f64) {
        let cfg = SimConfig::default();
        let mode = Mode { yellow_go_prob: yellow, ..Mode::compliant() };
        let sim = Simulator::new(cfg.clone(), mode).unwrap();
        let (mut st, mut obs) = sim.reset(seed);
        let mut r = rng::stream(seed, 1);
        while !st.is_terminal() {
            let step = sim.step(&st, &obs, Action::FULL_BRAKE, &mut r).unwrap();
            st = step.next_state;
            obs = step.obs;
        }
        if let Some(t) = st.started_at {
            prop_assert_ne!(cfg.light_cycle.light_at(t), Light::Red);
        }
    }

    #[test]
    fn shield_is_sound(dist in dist_strategy(), bits in 1u8..128, s_hat in prop::array::uniform5(-1.0..20.0f64)) {
        let indices: Vec<usize> = (0..N_ACTIONS).filter(|i| bits & (1 << i) != 0).collect();
        let allowed = ActionSet::from_indices(&indices).unwrap();
        let grammar = candidate_grammar();
        let cs = crossbench::ssc::ConstraintSet::unguarded("fuzz", allowed);
        for cs in grammar.iter().chain([&cs]) {
            let out = apply_constraint(&dist, cs, &s_hat);
            let rule_allowed = cs.rules[out.rule].allowed;
            let allowed_mass: f64 = Action::all().filter(|a| rule_allowed.contains(*a)).map(|a| dist.prob(a)).sum();
            for a in Action::all() {
                if !rule_allowed.contains(a) {
                    prop_assert_eq!(out.dist.prob(a), 0.0);
                }
            }
            prop_assert_eq!(out.fallback, allowed_mass < FALLBACK_MASS);
            prop_assert!((out.dist.probs().iter().sum::<f64>() - 1.0).abs() < 1e-12);
            let first = cs.rules.iter().position(|r| r.guard.holds(&s_hat)).unwrap();
            prop_assert_eq!(out.rule, first);
        }
    }

    #[test]
    fn dispatch_is_first_match(bounds in prop::collection::vec((0.0..1.0f64, 0.0..1.0f64), 1..6), x in prop::array::uniform4(0.0..1.0f64)) {
        let grammar = candidate_grammar();
        let cases: Vec<Case> = bounds.iter().enumerate().map(|(i, &(a, b))| {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            Case {
                predicate: Conjunction::always().and(LinearIneq::lower(4, i % 4, lo)).and(LinearIneq::upper(4, i % 4, hi)),
                constraints: grammar[i % grammar.len()].clone(),
            }
        }).collect();
        let f = SscFunction { version: 0, feature_dim: 4, cases };
        let expected = bounds.iter().enumerate().position(|(i, &(a, b))| {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            x[i % 4] >= lo && x[i % 4] <= hi
        });
        prop_assert_eq!(evaluate_ssc(&f, &x).unwrap().map(|(i, _)| i), expected);
    }

    #[test]
    fn beliefs_stay_normalized(seed in any::<u64>(), mode in mode_strategy(), stay in 0.5..1.0f64, cap in 1usize..8) {
        let cfg = SimConfig::default().with_gap(15.0);
        let ids = vec!["compliant".to_string(), "jaywalk".to_string()];
        let model = ModeTransitionModel {
            mode_ids: ids.clone(),
            p_z: vec![vec![stay, 1.0 - stay], vec![1.0 - stay, stay]],
            rho_z: vec![0.5, 0.5],
        };
        let modes = [Mode::compliant(), Mode::jaywalk()];
        let sim = Simulator::new(cfg.clone(), mode).unwrap();
        let mut b = init_belief(&model).unwrap();
        let mut w = ObservationWindow::new(cap, &cfg);
        let (mut st, mut obs) = sim.reset(seed);
        w.push(st.t, obs);
        let mut r = rng::stream(seed, 1);
        while !st.is_terminal() {
            let step = sim.step(&st, &obs, Action::new(6).unwrap(), &mut r).unwrap();
            st = step.next_state;
            obs = step.obs;
            w.push(st.t, obs);
            b = update_belief(&b, &w, &model, &modes).unwrap().belief;
            prop_assert!(b.probs.iter().all(|p| (0.0..=1.0).contains(p)));
            prop_assert!((b.probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn policy_outputs_distributions(seed in any::<u64>(), hidden in 1usize..16, obs in prop::array::uniform10(-1.0..40.0f64)) {
        let p = PolicyParams::init(Arch::with_hidden(hidden), seed, &mut rng::stream(seed, 0)).unwrap();
        let d = action_probs(&p, &crossbench::env::Observation(obs)).unwrap();
        prop_assert!(d.is_valid(1e-12));
    }

    #[test]
    fn streaming_stats_match_two_pass(xs in prop::collection::vec((-20.0..5.0f64, any::<bool>()), 2..200), split in 0usize..200) {
        let mut all = CellStats::default();
        let (mut a, mut b) = (CellStats::default(), CellStats::default());
        let cut = split.min(xs.len());
        for (i, &(r, c)) in xs.iter().enumerate() {
            all.push(r, c);
            if i < cut { a.push(r, c) } else { b.push(r, c) }
        }
        let n = xs.len() as f64;
        let mean = xs.iter().map(|x| x.0).sum::<f64>() / n;
        let std = (xs.iter().map(|x| (x.0 - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
        let rel = |u: f64, v: f64| (u - v).abs() <= 1e-9 * v.abs().max(1.0);
        prop_assert!(rel(all.mean, mean) && rel(all.std(), std));
        let merged = a.merge(&b);
        prop_assert!(rel(merged.mean, mean) && rel(merged.std(), std));
        prop_assert_eq!(merged.collisions, xs.iter().filter(|x| x.1).count() as u64);
        let swapped = b.merge(&a);
        prop_assert!(rel(swapped.mean, merged.mean) && rel(swapped.std(), merged.std()));
    }

    #[test]
    fn episode_seeds_ignore_method(base in any::<u64>(), i in 0usize..10_000) {
        let seeds: Vec<u64> = Method::ALL.iter().map(|&m| crossbench::harness::ScenarioSpec::new(Scenario::Jaywalk, 25.0, m, 1, base).episode_seed(i)).collect();
        prop_assert!(seeds.windows(2).all(|w| w[0] == w[1]));
    }
}

#[test]
fn reduced_state_width_matches_guards() {
    for cs in candidate_grammar() {
        for r in &cs.rules {
            for ineq in &r.guard.0 {
                assert_eq!(ineq.coeffs.len(), REDUCED_DIM);
            }
        }
    }
}
