//! `fedrc`: generate scenarios, train clustered FL algorithms, export
//! cluster compositions and re-evaluate saved runs.
//!
//! Exit codes: 0 success, 2 usage, configuration, schema or parse error,
//! 3 numeric failure, 4 I/O failure.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use fedrc_core::experiment::{cmd_compose, cmd_eval, cmd_generate, cmd_train, with_workers, ExperimentConfig};
use fedrc_core::metrics::{Attribute, MassMode};
use fedrc_core::Result;

#[derive(Parser)]
#[command(name = "fedrc", version, about = "Clustered federated learning under label, feature and concept shift")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Experiment manifest (TOML).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a manifest key, e.g. `--set fed.rounds=50`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Scenario preset (standard, paper-mix); shorthand for `--set scenario.preset=NAME`.
    #[arg(long)]
    preset: Option<String>,
    /// Output directory; overrides `output_dir`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads for per-client work. Outputs do not depend on it.
    #[arg(long)]
    workers: Option<usize>,
}

impl ConfigArgs {
    fn load(&self, extra: &[String]) -> Result<ExperimentConfig> {
        let base: toml::Table = toml::from_str("algorithm = \"fedrc\"\n[scenario]\n").expect("static manifest");
        let mut overrides = Vec::new();
        if let Some(p) = &self.preset {
            overrides.push(format!("scenario.preset=\"{p}\""));
        }
        overrides.extend(self.set.iter().cloned());
        overrides.extend(extra.iter().cloned());
        ExperimentConfig::load(self.config.as_deref(), base, &overrides)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Write a scenario (scenario.json + scenario.csv).
    Generate(ConfigArgs),
    /// Train and write rounds.csv, summary.json, model.json, state.json.
    Train {
        #[command(flatten)]
        args: ConfigArgs,
        /// Number of rounds; shorthand for `--set fed.rounds=N`.
        #[arg(long)]
        rounds: Option<usize>,
    },
    /// Export a cluster composition table of a finished run.
    Compose {
        /// Run directory written by `train`.
        run_dir: PathBuf,
        /// class, style or concept.
        #[arg(long, default_value = "concept")]
        attribute: String,
        /// Count each sample only in its largest-weight cluster.
        #[arg(long)]
        hard: bool,
    },
    /// Re-evaluate a finished run with soft and hard prediction.
    Eval {
        run_dir: PathBuf,
        #[arg(long)]
        workers: Option<usize>,
    },
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate(args) => {
            let cfg = args.load(&[])?;
            let dir = with_workers(args.workers, || cmd_generate(&cfg, args.out.as_deref()))??;
            println!("{}", dir.display());
        }
        Command::Train { args, rounds } => {
            let extra: Vec<String> = rounds.map(|r| format!("fed.rounds={r}")).into_iter().collect();
            let cfg = args.load(&extra)?;
            let outcome = with_workers(args.workers, || cmd_train(&cfg, args.out.as_deref()))??;
            let s = &outcome.summary;
            println!(
                "{}: {} rounds, {} active clusters, purity {:.4}, global accuracy {:.4} -> {}",
                s.algorithm.name(),
                s.rounds,
                s.active_clusters,
                s.purity,
                s.final_round.global_acc,
                outcome.dir.display()
            );
        }
        Command::Compose { run_dir, attribute, hard } => {
            let attribute: Attribute = attribute.parse()?;
            let mode = if hard { MassMode::Hard } else { MassMode::Soft };
            println!("{}", cmd_compose(&run_dir, attribute, mode)?.display());
        }
        Command::Eval { run_dir, workers } => {
            let r = with_workers(workers, || cmd_eval(&run_dir))??;
            println!(
                "round {}: local {:.4} (hard {:.4}), global {:.4} (hard {:.4})",
                r.round, r.local_acc_soft, r.local_acc_hard, r.global_acc_soft, r.global_acc_hard
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
