//! Experiment manifests and the commands behind the `fedrc` binary.
//!
//! A manifest is a TOML file:
//!
//! ```toml
//! algorithm = "fedrc"        # fedrc | fedavg | fedem | ifca | fesem
//! seed = 0                   # root seed for every random stream
//! output_dir = "runs/fedrc"  # optional, `--out` takes precedence
//!
//! [scenario]
//! preset = "standard"        # base config, remaining keys override it
//! num_clients = 60
//! # path = "data/standard"   # alternatively a directory from `generate`
//! # [scenario.tabular]       # or a delimited base task
//! # path = "base.csv"
//!
//! [model]
//! architecture = "mlp"       # linear | mlp
//! hidden = [16]
//! shared_trunk = false
//!
//! [fed]                      # round protocol, see `FedConfig`
//! rounds = 100
//!
//! [rc]                       # E-step hyperparameters, see `RcHyper`
//! adam_alpha = 1.0
//! ```
//!
//! The root seed is copied into the scenario and protocol configs; setting
//! `scenario.seed` or `fed.seed` directly is rejected. Relative paths are
//! resolved against the working directory.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::baselines::BaselineKind;
use crate::ensemble::ClusterEnsemble;
use crate::error::{Error, Result};
use crate::fed::{FedConfig, Federation};
use crate::metrics::{
    best_train_round, client_accuracy, composition, composition_csv, rounds_csv, write_text, Attribute,
    Compositions, MassMode, PredictionMode, RoundReport,
};
use crate::model::{Architecture, ModelSpec};
use crate::rc::{AssignmentState, LabelStats, RcHyper};
use crate::scenario::{
    generate, load_tabular, read_scenario, write_scenario, FederatedScenario, ScenarioConfig, TabularSchema,
};

pub const ROUNDS_FILE: &str = "rounds.csv";
pub const SUMMARY_FILE: &str = "summary.json";
pub const MODEL_FILE: &str = "model.json";
pub const STATE_FILE: &str = "state.json";
pub const RESOLVED_CONFIG_FILE: &str = "config.resolved.toml";
pub const EVAL_FILE: &str = "eval.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ArchitectureKind {
    Linear,
    Mlp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub architecture: ArchitectureKind,
    /// Hidden layer widths of the MLP; ignored for `linear`.
    pub hidden: Vec<usize>,
    pub shared_trunk: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            architecture: ArchitectureKind::Mlp,
            hidden: vec![16],
            shared_trunk: false,
        }
    }
}

impl ModelConfig {
    pub fn to_spec(&self, input_dim: usize, num_classes: usize) -> Result<ModelSpec> {
        let spec = match self.architecture {
            ArchitectureKind::Linear => ModelSpec::linear(input_dim, num_classes),
            ArchitectureKind::Mlp => ModelSpec {
                architecture: Architecture::Mlp {
                    hidden: self.hidden.clone(),
                },
                input_dim,
                num_classes,
                shared_trunk: false,
            },
        }
        .with_shared_trunk(self.shared_trunk);
        spec.validate()?;
        Ok(spec)
    }
}

/// Where the federated data comes from.
#[derive(Debug, Clone, PartialEq)]
pub enum ScenarioSource {
    Synthetic(ScenarioConfig),
    /// A directory written by [`cmd_generate`].
    Saved(PathBuf),
    Tabular {
        schema: TabularSchema,
        config: ScenarioConfig,
    },
}

impl ScenarioSource {
    pub fn build(&self) -> Result<FederatedScenario> {
        match self {
            ScenarioSource::Synthetic(c) => generate(c),
            ScenarioSource::Saved(dir) => read_scenario(dir),
            ScenarioSource::Tabular { schema, config } => load_tabular(schema, config),
        }
    }

    pub fn config(&self) -> Option<&ScenarioConfig> {
        match self {
            ScenarioSource::Synthetic(c) | ScenarioSource::Tabular { config: c, .. } => Some(c),
            ScenarioSource::Saved(_) => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub algorithm: BaselineKind,
    pub seed: u64,
    pub output_dir: Option<PathBuf>,
    pub scenario: ScenarioSource,
    pub model: ModelConfig,
    pub fed: FedConfig,
    pub rc: RcHyper,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    algorithm: BaselineKind,
    #[serde(default)]
    seed: u64,
    #[serde(default)]
    output_dir: Option<PathBuf>,
    scenario: Table,
    #[serde(default)]
    model: ModelConfig,
    #[serde(default)]
    fed: Table,
    #[serde(default)]
    rc: RcHyper,
}

fn schema_error(e: impl std::fmt::Display) -> Error {
    Error::Config(e.to_string().trim().to_string())
}

/// Parses the right-hand side of `--set key=value`: any TOML value, or a bare
/// string when it does not parse as one.
fn parse_override_value(raw: &str) -> Value {
    match toml::from_str::<Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => Value::String(raw.to_string()),
    }
}

/// Applies `key.path=value` to a TOML table, creating intermediate tables.
pub fn apply_override(table: &mut Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::config(format!("override `{assignment}` is not of the form key=value")))?;
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::config(format!("override key `{key}` is malformed")));
    }
    let mut node = table;
    for part in &parts[..parts.len() - 1] {
        let entry = node
            .entry(part.to_string())
            .or_insert_with(|| Value::Table(Table::new()));
        node = entry
            .as_table_mut()
            .ok_or_else(|| Error::config(format!("override `{key}`: `{part}` is not a table")))?;
    }
    node.insert(parts[parts.len() - 1].to_string(), parse_override_value(raw.trim()));
    Ok(())
}

fn scenario_from_table(mut table: Table, seed: u64) -> Result<ScenarioSource> {
    if table.contains_key("seed") {
        return Err(Error::config("scenario.seed is derived from the root `seed`; set that instead"));
    }
    if let Some(path) = table.remove("path") {
        if !table.is_empty() {
            let extra: Vec<&String> = table.keys().collect();
            return Err(Error::config(format!(
                "scenario.path loads a saved scenario and cannot be combined with {extra:?}"
            )));
        }
        let path = path
            .as_str()
            .ok_or_else(|| Error::config("scenario.path must be a string"))?;
        return Ok(ScenarioSource::Saved(PathBuf::from(path)));
    }
    let tabular = table
        .remove("tabular")
        .map(|v| v.try_into::<TabularSchema>().map_err(|e| schema_error(format!("scenario.tabular: {e}"))))
        .transpose()?;
    let preset = match table.remove("preset") {
        Some(Value::String(s)) => s,
        Some(_) => return Err(Error::config("scenario.preset must be a string")),
        None => "standard".to_string(),
    };
    let mut merged = Table::try_from(ScenarioConfig::preset(&preset)?).map_err(schema_error)?;
    merged.extend(table);
    let mut config: ScenarioConfig = merged
        .try_into()
        .map_err(|e| schema_error(format!("scenario: {e}")))?;
    config.seed = seed;
    config.validate()?;
    Ok(match tabular {
        Some(schema) => ScenarioSource::Tabular { schema, config },
        None => ScenarioSource::Synthetic(config),
    })
}

impl ExperimentConfig {
    /// Reads a manifest (or starts from `base` when no file is given) and
    /// applies `--set` overrides in order.
    pub fn load(path: Option<&Path>, base: Table, overrides: &[String]) -> Result<Self> {
        let mut table = match path {
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                toml::from_str::<Table>(&text).map_err(|e| schema_error(format!("{}: {e}", p.display())))?
            }
            None => base,
        };
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        Self::from_table(table)
    }

    pub fn from_table(table: Table) -> Result<Self> {
        let raw: RawConfig = table.try_into().map_err(schema_error)?;
        if raw.fed.contains_key("seed") {
            return Err(Error::config("fed.seed is derived from the root `seed`; set that instead"));
        }
        let mut fed: FedConfig = raw
            .fed
            .try_into()
            .map_err(|e| schema_error(format!("fed: {e}")))?;
        fed.seed = raw.seed;
        fed.validate()?;
        raw.rc.validate()?;
        Ok(ExperimentConfig {
            algorithm: raw.algorithm,
            seed: raw.seed,
            output_dir: raw.output_dir,
            scenario: scenario_from_table(raw.scenario, raw.seed)?,
            model: raw.model,
            fed,
            rc: raw.rc,
        })
    }

    /// Manifest that loads back to this exact configuration.
    pub fn to_toml(&self) -> Result<String> {
        let mut root = Table::new();
        root.insert("algorithm".into(), Value::String(self.algorithm.name().into()));
        root.insert("seed".into(), Value::Integer(self.seed as i64));
        if let Some(dir) = &self.output_dir {
            root.insert("output_dir".into(), Value::String(dir.display().to_string()));
        }
        let mut scenario = match &self.scenario {
            ScenarioSource::Saved(dir) => {
                let mut t = Table::new();
                t.insert("path".into(), Value::String(dir.display().to_string()));
                t
            }
            ScenarioSource::Synthetic(c) => Table::try_from(c).map_err(schema_error)?,
            ScenarioSource::Tabular { schema, config } => {
                let mut t = Table::try_from(config).map_err(schema_error)?;
                t.insert("tabular".into(), Value::Table(Table::try_from(schema).map_err(schema_error)?));
                t
            }
        };
        scenario.remove("seed");
        root.insert("scenario".into(), Value::Table(scenario));
        root.insert("model".into(), Value::Table(Table::try_from(&self.model).map_err(schema_error)?));
        let mut fed = Table::try_from(&self.fed).map_err(schema_error)?;
        fed.remove("seed");
        root.insert("fed".into(), Value::Table(fed));
        root.insert("rc".into(), Value::Table(Table::try_from(&self.rc).map_err(schema_error)?));
        toml::to_string(&root).map_err(schema_error)
    }

    fn resolve_out(&self, out: Option<&Path>) -> Result<PathBuf> {
        out.map(Path::to_path_buf)
            .or_else(|| self.output_dir.clone())
            .ok_or_else(|| Error::config("no output directory: pass --out or set output_dir"))
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::numeric(e.to_string()))?;
    text.push('\n');
    write_text(path, &text)
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Schema(format!("{}: {e}", path.display())))
}

/// Runs `f` on a dedicated pool of `workers` threads (the global pool when
/// `None`). Results do not depend on the thread count.
pub fn with_workers<T: Send>(workers: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T> {
    match workers {
        None => Ok(f()),
        Some(0) => Err(Error::config("--workers must be positive")),
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| Error::config(format!("thread pool: {e}")))?;
            Ok(pool.install(f))
        }
    }
}

/// Writes the scenario header and data files; returns the directory.
pub fn cmd_generate(cfg: &ExperimentConfig, out: Option<&Path>) -> Result<PathBuf> {
    let dir = cfg.resolve_out(out)?;
    if let ScenarioSource::Saved(src) = &cfg.scenario {
        return Err(Error::config(format!(
            "scenario.path points at an existing scenario ({}); nothing to generate",
            src.display()
        )));
    }
    let scenario = cfg.scenario.build()?;
    create_dir(&dir)?;
    write_scenario(&dir, &scenario, cfg.scenario.config())?;
    log::info!(
        "wrote {} participating and {} holdout clients to {}",
        scenario.participating.len(),
        scenario.nonparticipating.len(),
        dir.display()
    );
    Ok(dir)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Removal {
    pub round: usize,
    pub cluster: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub algorithm: BaselineKind,
    pub seed: u64,
    pub rounds: usize,
    pub num_clusters: usize,
    pub active_clusters: usize,
    /// Concept purity of the final round.
    pub purity: f64,
    pub removals: Vec<Removal>,
    /// First round whose largest weight change fell below the removal tolerance.
    pub first_converged_round: Option<usize>,
    /// Metrics of the round with the best train accuracy.
    pub selected_round: RoundReport,
    pub final_round: RoundReport,
    /// Final composition with each sample counted in its largest-weight cluster.
    pub final_hard_composition: Compositions,
}

/// Everything a finished run leaves behind besides the report files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SavedState {
    pub round: usize,
    pub assignment: AssignmentState,
    pub stats: LabelStats,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub dir: PathBuf,
    pub reports: Vec<RoundReport>,
    pub summary: RunSummary,
}

/// Trains the configured algorithm and writes `rounds.csv`, `summary.json`,
/// `model.json`, `state.json` and `config.resolved.toml`.
pub fn cmd_train(cfg: &ExperimentConfig, out: Option<&Path>) -> Result<TrainOutcome> {
    let dir = cfg.resolve_out(out)?;
    let scenario = cfg.scenario.build()?;
    let spec = cfg.model.to_spec(scenario.input_dim, scenario.num_classes)?;
    let mut fed = Federation::new(&scenario, cfg.algorithm, cfg.fed.clone(), cfg.rc.clone(), spec)?;
    let mut reports = vec![fed.report()?];
    for _ in 0..cfg.fed.rounds {
        fed.run_round()?;
        let r = fed.report()?;
        log::info!(
            "round {:>4}  objective {:.5}  train {:.4}  local {:.4}  global {:.4}  clusters {}  purity {:.3}",
            r.round,
            r.objective,
            r.train_acc,
            r.local_acc,
            r.global_acc,
            r.active_clusters,
            r.purity
        );
        reports.push(r);
    }
    let last = reports.last().expect("initial report").clone();
    let summary = RunSummary {
        algorithm: cfg.algorithm,
        seed: cfg.seed,
        rounds: fed.round,
        num_clusters: fed.ensemble.num_clusters(),
        active_clusters: fed.ensemble.num_active(),
        purity: last.purity,
        removals: fed
            .removals
            .iter()
            .map(|&(round, cluster)| Removal { round, cluster })
            .collect(),
        first_converged_round: fed.first_converged_round,
        selected_round: best_train_round(&reports).expect("initial report").clone(),
        final_hard_composition: Compositions::compute(&fed.assignment, &scenario, &fed.ensemble.active, MassMode::Hard),
        final_round: last,
    };

    create_dir(&dir)?;
    write_text(&dir.join(ROUNDS_FILE), &rounds_csv(&reports))?;
    write_json(&dir.join(SUMMARY_FILE), &summary)?;
    write_json(&dir.join(MODEL_FILE), &fed.ensemble)?;
    write_json(
        &dir.join(STATE_FILE),
        &SavedState {
            round: fed.round,
            assignment: fed.assignment.clone(),
            stats: fed.stats.clone(),
        },
    )?;
    write_text(&dir.join(RESOLVED_CONFIG_FILE), &cfg.to_toml()?)?;
    Ok(TrainOutcome { dir, reports, summary })
}

/// A finished run reloaded from its directory.
pub struct LoadedRun {
    pub config: ExperimentConfig,
    pub scenario: FederatedScenario,
    pub ensemble: ClusterEnsemble,
    pub state: SavedState,
}

pub fn load_run(run_dir: &Path) -> Result<LoadedRun> {
    let config = ExperimentConfig::load(Some(&run_dir.join(RESOLVED_CONFIG_FILE)), Table::new(), &[])?;
    let scenario = config.scenario.build()?;
    let ensemble: ClusterEnsemble = read_json(&run_dir.join(MODEL_FILE))?;
    let state: SavedState = read_json(&run_dir.join(STATE_FILE))?;
    if state.assignment.clients.len() != scenario.participating.len() {
        return Err(Error::Schema("saved weights do not match the scenario".into()));
    }
    Ok(LoadedRun {
        config,
        scenario,
        ensemble,
        state,
    })
}

/// Writes `composition_<attribute>[_hard].csv` into the run directory.
pub fn cmd_compose(run_dir: &Path, attribute: Attribute, mode: MassMode) -> Result<PathBuf> {
    let run = load_run(run_dir)?;
    let table = composition(&run.state.assignment, &run.scenario, &run.ensemble.active, attribute, mode);
    let suffix = if mode == MassMode::Hard { "_hard" } else { "" };
    let path = run_dir.join(format!("composition_{}{suffix}.csv", attribute.name()));
    write_text(&path, &composition_csv(&table))?;
    Ok(path)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HoldoutEval {
    pub client: usize,
    pub concept: usize,
    pub omega: Vec<f64>,
    pub accuracy_soft: f64,
    pub accuracy_hard: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub round: usize,
    pub local_acc_soft: f64,
    pub local_acc_hard: f64,
    pub global_acc_soft: f64,
    pub global_acc_hard: f64,
    pub holdout: Vec<HoldoutEval>,
}

/// Re-evaluates a saved run in both prediction modes; writes `eval.json`.
pub fn cmd_eval(run_dir: &Path) -> Result<EvalReport> {
    let run = load_run(run_dir)?;
    let fed = Federation::restore(
        &run.scenario,
        run.config.algorithm,
        run.config.fed.clone(),
        run.config.rc.clone(),
        run.ensemble,
        run.state.assignment,
        run.state.stats,
        run.state.round,
    )?;
    let mean = |v: &[f64]| if v.is_empty() { 0.0 } else { v.iter().sum::<f64>() / v.len() as f64 };
    let mut local = [Vec::new(), Vec::new()];
    for (c, a) in run.scenario.participating.iter().zip(&fed.assignment.clients) {
        if c.test.is_empty() {
            continue;
        }
        for (slot, mode) in [PredictionMode::Soft, PredictionMode::Hard].into_iter().enumerate() {
            local[slot].push(client_accuracy(&c.test, &fed.ensemble, &a.omega, mode)?);
        }
    }
    let mut holdout = Vec::new();
    for c in &run.scenario.nonparticipating {
        let omega = fed.adapt_client(&c.train)?;
        holdout.push(HoldoutEval {
            client: c.id,
            concept: c.concept,
            accuracy_soft: client_accuracy(&c.test, &fed.ensemble, &omega, PredictionMode::Soft)?,
            accuracy_hard: client_accuracy(&c.test, &fed.ensemble, &omega, PredictionMode::Hard)?,
            omega,
        });
    }
    let soft: Vec<f64> = holdout.iter().map(|h| h.accuracy_soft).collect();
    let hard: Vec<f64> = holdout.iter().map(|h| h.accuracy_hard).collect();
    let report = EvalReport {
        round: fed.round,
        local_acc_soft: mean(&local[0]),
        local_acc_hard: mean(&local[1]),
        global_acc_soft: mean(&soft),
        global_acc_hard: mean(&hard),
        holdout,
    };
    write_json(&run_dir.join(EVAL_FILE), &report)?;
    Ok(report)
}
