//! `crossbench`: train the meta-policy, collect the sample bank, synthesize
//! the shield knowledge base, run the method comparison grid and report.

mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use thiserror::Error;

use crossbench::belief::{Belief, ModeTransitionModel};
use crossbench::cola::{build_sample_bank, SampleBank};
use crossbench::env::Mode;
use crossbench::harness::{self, compare_report, run_experiment, Artifacts, Method, MetricsSummary, ScenarioSpec};
use crossbench::policy::{train_meta, PolicyParams, TrainEnvs};
use crossbench::rng;
use crossbench::ssc::{candidate_grammar, ssca_update, ConstraintSet, SscFunction, SynthesisContext};

use config::{Config, InitialShield};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Core(#[from] crossbench::Error),
    #[error("{failed} of {total} report checks did not pass")]
    Checks { failed: usize, total: usize },
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Core(e) if e.is_configuration() => 2,
            CliError::Core(crossbench::Error::Io { source, .. }) if source.kind() == std::io::ErrorKind::NotFound => 2,
            CliError::Core(_) => 3,
            CliError::Checks { .. } => 4,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "crossbench", version, about = "Vehicle/pedestrian crossing workbench")]
struct Cli {
    /// TOML config file with one section per subcommand.
    #[arg(short, long, global = true)]
    config: Option<PathBuf>,

    /// Override a config value, e.g. `--set run.episodes=50`. Repeatable; wins over the file.
    #[arg(short = 's', long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,

    /// Directory that relative artifact paths resolve against.
    #[arg(short, long, env = "CROSSBENCH_OUT", default_value = ".", global = true)]
    out_dir: PathBuf,

    /// Worker threads for episode rollouts (0 = one per core).
    #[arg(short, long, default_value_t = 0, global = true)]
    jobs: usize,

    /// More log output (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train the meta-policy and write a checkpoint.
    Train,
    /// Roll out the checkpoint in every mode and write the sample bank.
    BuildBank,
    /// Build or extend the shield knowledge base.
    SynthesizeShield,
    /// Run the method × scenario × gap grid and write metrics.
    Run,
    /// Merge metrics files, check the method orderings and write a report.
    Report,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    env_logger::Builder::new().filter_level(level).parse_default_env().init();

    match dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("crossbench: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

fn dispatch(cli: &Cli) -> Result<(), CliError> {
    let cfg = Config::load(cli.config.as_deref(), &cli.overrides)?;
    let out = &cli.out_dir;
    std::fs::create_dir_all(out).map_err(|e| CliError::Config(format!("{}: {e}", out.display())))?;
    match cli.command {
        Command::Train => train(&cfg, out),
        Command::BuildBank => build_bank(&cfg, out),
        Command::SynthesizeShield => synthesize_shield(&cfg, out),
        Command::Run => run(&cfg, out, cli.jobs),
        Command::Report => report(&cfg, out),
    }
}

fn resolve(dir: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        dir.join(p)
    }
}

fn train(cfg: &Config, out: &Path) -> Result<(), CliError> {
    let envs = TrainEnvs::new(cfg.sim.clone(), cfg.modes.clone(), cfg.prior(), cfg.train.gaps.clone())?;
    let outcome = train_meta(&envs, &cfg.train.params)?;
    if let Some(eval) = outcome.eval {
        log::info!("held-out return {:.4} vs random {:.4}", eval.policy_mean, eval.random_mean);
        if !eval.beats_random() {
            log::warn!("trained policy does not beat the random policy by the required margin");
        }
    }
    let path = resolve(out, &cfg.train.out);
    outcome.params.save(&path, cfg.train.params.seed)?;
    println!("{}", path.display());
    Ok(())
}

fn load_policy(path: &Path) -> Result<PolicyParams, CliError> {
    Ok(PolicyParams::load(path, None)?.0)
}

fn build_bank(cfg: &Config, out: &Path) -> Result<(), CliError> {
    let params = load_policy(&resolve(out, &cfg.bank.checkpoint))?;
    let bank = build_sample_bank(&params, &cfg.sim, &cfg.modes, &cfg.bank.spec)?;
    let path = resolve(out, &cfg.bank.out);
    bank.save(&path)?;
    for (id, n) in bank.counts() {
        log::info!("{id}: {n} windows");
    }
    println!("{}", path.display());
    Ok(())
}

fn grammar_candidate(name: &str) -> Result<ConstraintSet, CliError> {
    candidate_grammar()
        .into_iter()
        .find(|c| c.name == name)
        .ok_or_else(|| CliError::Config(format!("no grammar candidate named `{name}`")))
}

fn configured_modes(cfg: &Config, ids: &[String]) -> Result<Vec<Mode>, CliError> {
    if ids.is_empty() {
        return Ok(cfg.modes.clone());
    }
    ids.iter()
        .map(|id| {
            cfg.modes
                .iter()
                .find(|m| &m.id == id)
                .cloned()
                .ok_or_else(|| CliError::Config(format!("shield mode `{id}` is not configured")))
        })
        .collect()
}

fn synthesize_shield(cfg: &Config, out: &Path) -> Result<(), CliError> {
    let s = &cfg.shield;
    let params = load_policy(&resolve(out, &s.checkpoint))?;
    let bank = SampleBank::load(&resolve(out, &s.bank))?;
    let initial = match &s.existing {
        Some(p) => SscFunction::load(&resolve(out, p))?,
        None => match s.initial {
            InitialShield::Empty => SscFunction::empty(),
            InitialShield::Baseline => {
                let phi = match &s.baseline_constraint {
                    Some(name) => grammar_candidate(name)?,
                    None => ConstraintSet::baseline(),
                };
                SscFunction::single(&cfg.modes, &cfg.sim, phi)
            }
        },
    };
    let modes = configured_modes(cfg, &s.modes)?;
    let belief = Belief {
        mode_ids: cfg.mode_ids(),
        probs: cfg.prior(),
    };
    let ctx = SynthesisContext {
        bank: &bank,
        params: &params,
        belief: &belief,
        k: s.k,
        assessor: s.assessor,
        m_eval: s.m_eval,
        exact_depth: s.exact_depth,
    };
    let f = ssca_update(&initial, &modes, &candidate_grammar(), &ctx, &mut rng::stream(s.seed, 0))?;
    let path = resolve(out, &s.out);
    f.save(&path)?;
    for (i, c) in f.cases.iter().enumerate() {
        log::info!("case {i}: {}", c.constraints.name);
    }
    println!("{}", path.display());
    Ok(())
}

fn run(cfg: &Config, out: &Path, jobs: usize) -> Result<(), CliError> {
    let r = &cfg.run;
    let policy = load_policy(&resolve(out, &r.checkpoint))?;
    let bank = if r.methods.iter().any(|m| m.adapts()) {
        Some(SampleBank::load(&resolve(out, &r.bank))?)
    } else {
        None
    };
    let ssc = if r.methods.contains(&Method::Numerla) {
        Some(SscFunction::load(&resolve(out, &r.shield))?)
    } else {
        None
    };
    let arts = Artifacts {
        sim: cfg.sim.clone(),
        modes: cfg.modes.clone(),
        mode_model: ModeTransitionModel::stationary(cfg.mode_ids(), cfg.prior())?,
        policy,
        bank,
        ssc,
    };
    let mut specs = Vec::new();
    for &scenario in &r.scenarios {
        for &gap in &r.gaps {
            for &method in &r.methods {
                let mut spec = ScenarioSpec::new(scenario, gap, method, r.episodes, r.seed);
                spec.cola = r.cola.clone();
                spec.dispatch = r.dispatch;
                spec.carry_theta = r.carry_theta;
                spec.belief_window = r.belief_window;
                specs.push(spec);
            }
        }
    }
    let ex = run_experiment(&specs, &arts, jobs)?;
    ex.summary.save(&resolve(out, &r.metrics))?;
    ex.summary.write_csv(&resolve(out, &r.metrics_csv))?;
    ex.summary.write_long_csv(&resolve(out, &r.long_csv))?;
    harness::write_episodes_csv(&resolve(out, &r.episodes_csv), &ex.episodes)?;
    for c in &ex.summary.cells {
        println!(
            "{:<8} {:<12} {:>5} m  collision {:.4}  return {:.4} ± {:.4}",
            c.method.to_string(),
            c.scenario.to_string(),
            c.gap_m,
            c.collision_rate,
            c.mean_reward,
            c.std
        );
    }
    Ok(())
}

fn report(cfg: &Config, out: &Path) -> Result<(), CliError> {
    let r = &cfg.report;
    if r.inputs.is_empty() {
        return Err(CliError::Config("report needs at least one metrics file".into()));
    }
    let mut summary = MetricsSummary::default();
    for p in &r.inputs {
        summary = summary.merge(&MetricsSummary::load(&resolve(out, p))?);
    }
    let rep = compare_report(&summary)?;
    rep.write(&resolve(out, &r.csv), &resolve(out, &r.text))?;
    for c in &rep.checks {
        println!("{:<4} {}  ({})", format!("{:?}", c.status).to_lowercase(), c.name, c.detail);
    }
    let failed = rep.checks.iter().filter(|c| c.status != harness::CheckStatus::Pass).count();
    if failed > 0 {
        return Err(CliError::Checks {
            failed,
            total: rep.checks.len(),
        });
    }
    Ok(())
}
