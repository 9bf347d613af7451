//! Configuration file: one TOML document with a section per subcommand.
//!
//! Precedence, lowest first: built-in defaults, the config file, `--set`
//! overrides. Unknown keys are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crossbench::cola::{BankSpec, ColaConfig};
use crossbench::env::{Mode, SimConfig, STANDARD_GAPS};
use crossbench::harness::{Dispatch, Method, Scenario};
use crossbench::policy::TrainConfig;
use crossbench::ssc::SafetyAssessor;

use crate::CliError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Config {
    pub sim: SimConfig,
    pub modes: Vec<Mode>,
    /// Prior weight per mode, in `modes` order. Empty means uniform.
    pub prior: Vec<f64>,
    pub train: TrainSection,
    pub bank: BankSection,
    pub shield: ShieldSection,
    pub run: RunSection,
    pub report: ReportSection,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            sim: SimConfig::default(),
            modes: vec![Mode::compliant(), Mode::jaywalk()],
            prior: Vec::new(),
            train: TrainSection::default(),
            bank: BankSection::default(),
            shield: ShieldSection::default(),
            run: RunSection::default(),
            report: ReportSection::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainSection {
    pub out: PathBuf,
    pub gaps: Vec<f64>,
    #[serde(flatten)]
    pub params: TrainConfig,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            out: "checkpoint.json".into(),
            gaps: STANDARD_GAPS.to_vec(),
            params: TrainConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BankSection {
    pub checkpoint: PathBuf,
    pub out: PathBuf,
    #[serde(flatten)]
    pub spec: BankSpec,
}

impl Default for BankSection {
    fn default() -> Self {
        BankSection {
            checkpoint: "checkpoint.json".into(),
            out: "bank.json".into(),
            spec: BankSpec::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InitialShield {
    /// One case over the configured modes.
    Baseline,
    /// No cases; every mode is synthesized.
    Empty,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ShieldSection {
    pub checkpoint: PathBuf,
    pub bank: PathBuf,
    /// Knowledge base to extend instead of starting from `initial`.
    pub existing: Option<PathBuf>,
    pub initial: InitialShield,
    /// Grammar candidate used by the baseline case; unset keeps the stock baseline rules.
    pub baseline_constraint: Option<String>,
    /// Mode ids to cover; empty means every configured mode.
    pub modes: Vec<String>,
    pub k: usize,
    pub assessor: SafetyAssessor,
    pub m_eval: usize,
    pub exact_depth: usize,
    pub seed: u64,
    pub out: PathBuf,
}

impl Default for ShieldSection {
    fn default() -> Self {
        ShieldSection {
            checkpoint: "checkpoint.json".into(),
            bank: "bank.json".into(),
            existing: None,
            initial: InitialShield::Baseline,
            baseline_constraint: Some("brake-only@15".into()),
            modes: Vec::new(),
            k: 10,
            assessor: SafetyAssessor::default(),
            m_eval: 512,
            exact_depth: 3,
            seed: 3,
            out: "shield.json".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunSection {
    pub checkpoint: PathBuf,
    pub bank: PathBuf,
    pub shield: PathBuf,
    pub methods: Vec<Method>,
    pub scenarios: Vec<Scenario>,
    pub gaps: Vec<f64>,
    pub episodes: usize,
    pub seed: u64,
    pub dispatch: Dispatch,
    pub carry_theta: bool,
    pub belief_window: usize,
    pub cola: ColaConfig,
    pub metrics: PathBuf,
    pub metrics_csv: PathBuf,
    pub long_csv: PathBuf,
    pub episodes_csv: PathBuf,
}

impl Default for RunSection {
    fn default() -> Self {
        RunSection {
            checkpoint: "checkpoint.json".into(),
            bank: "bank.json".into(),
            shield: "shield.json".into(),
            methods: Method::ALL.to_vec(),
            scenarios: Scenario::ALL.to_vec(),
            gaps: STANDARD_GAPS.to_vec(),
            episodes: 1000,
            seed: 7,
            dispatch: Dispatch::Belief,
            carry_theta: false,
            belief_window: crossbench::belief::ObservationWindow::DEFAULT_CAPACITY,
            cola: ColaConfig::default(),
            metrics: "metrics.json".into(),
            metrics_csv: "metrics.csv".into(),
            long_csv: "metrics_long.csv".into(),
            episodes_csv: "episodes.csv".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ReportSection {
    /// Metrics files to merge before comparing.
    pub inputs: Vec<PathBuf>,
    pub csv: PathBuf,
    pub text: PathBuf,
}

impl Default for ReportSection {
    fn default() -> Self {
        ReportSection {
            inputs: vec!["metrics.json".into()],
            csv: "report.csv".into(),
            text: "report.txt".into(),
        }
    }
}

impl Config {
    /// Parse `file` (if any), apply `overrides`, and deserialize.
    pub fn load(file: Option<&Path>, overrides: &[String]) -> Result<Config, CliError> {
        let mut table = match file {
            Some(path) => {
                let text = std::fs::read_to_string(path)
                    .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
                text.parse::<Table>()
                    .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?
            }
            None => Table::new(),
        };
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let input = Value::Table(table);
        let cfg: Config = input
            .clone()
            .try_into()
            .map_err(|e: toml::de::Error| CliError::Config(e.to_string()))?;
        let parsed = Value::try_from(&cfg).map_err(|e| CliError::Config(e.to_string()))?;
        if let Some(key) = unknown_key(&input, &parsed, "") {
            return Err(CliError::Config(format!("unknown configuration key `{key}`")));
        }
        Ok(cfg)
    }

    pub fn prior(&self) -> Vec<f64> {
        if self.prior.is_empty() {
            vec![1.0 / self.modes.len().max(1) as f64; self.modes.len()]
        } else {
            self.prior.clone()
        }
    }

    pub fn mode_ids(&self) -> Vec<String> {
        self.modes.iter().map(|m| m.id.clone()).collect()
    }
}

/// `a.b.c=value`; the value is read as a TOML literal, falling back to a bare string.
fn apply_override(table: &mut Table, spec: &str) -> Result<(), CliError> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| CliError::Config(format!("override `{spec}` is not key=value")))?;
    let path: Vec<&str> = key.trim().split('.').collect();
    if path.iter().any(|p| p.is_empty()) {
        return Err(CliError::Config(format!("override `{spec}` has an empty key segment")));
    }
    let value = format!("v = {raw}")
        .parse::<Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()));
    let (last, parents) = path.split_last().expect("split yields at least one segment");
    let mut cur = table;
    for p in parents {
        let entry = cur.entry(p.to_string()).or_insert_with(|| Value::Table(Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| CliError::Config(format!("override `{spec}`: `{p}` is not a section")))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

fn unknown_key(input: &Value, parsed: &Value, prefix: &str) -> Option<String> {
    match (input, parsed) {
        (Value::Table(a), Value::Table(b)) => a.iter().find_map(|(k, v)| {
            let path = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
            match b.get(k) {
                Some(w) => unknown_key(v, w, &path),
                None => Some(path),
            }
        }),
        (Value::Array(a), Value::Array(b)) => a
            .iter()
            .zip(b)
            .enumerate()
            .find_map(|(i, (v, w))| unknown_key(v, w, &format!("{prefix}[{i}]"))),
        _ => None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_survive_an_empty_file() {
        assert_eq!(Config::load(None, &[]).unwrap(), Config::default());
    }

    #[test]
    fn overrides_win_over_the_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.toml");
        std::fs::write(&path, "[train]\nlearning_rate = 0.5\nepisodes = 10\n").unwrap();
        let cfg = Config::load(Some(&path), &["train.learning_rate=0".into()]).unwrap();
        assert_eq!(cfg.train.params.learning_rate, 0.0);
        assert_eq!(cfg.train.params.episodes, 10);
    }

    #[test]
    fn override_values_parse_as_toml() {
        let cfg = Config::load(
            None,
            &[
                "run.methods=[\"rl\"]".into(),
                "run.cola.conditioning={kind=\"time\", slack=3}".into(),
                "run.metrics=out/m.json".into(),
            ],
        )
        .unwrap();
        assert_eq!(cfg.run.methods, vec![Method::Rl]);
        assert_eq!(cfg.run.cola.conditioning, crossbench::cola::Conditioning::Time { slack: 3 });
        assert_eq!(cfg.run.metrics, PathBuf::from("out/m.json"));
    }

    #[test]
    fn typos_are_rejected() {
        for bad in ["train.learnig_rate=1", "sim.light_cycle.blue=3", "nope=1"] {
            assert!(matches!(Config::load(None, &[bad.into()]), Err(CliError::Config(_))), "{bad}");
        }
        assert!(Config::load(None, &["novalue".into()]).is_err());
        assert!(Config::load(None, &["run.episodes=many".into()]).is_err());
    }
}
