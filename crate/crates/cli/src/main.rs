//! `macfn`: train, evaluate and inspect multi-agent flow networks.
//!
//! Every subcommand prints one JSON document on stdout. Logging goes to
//! stderr and is controlled by `MACFN_LOG` (`error`..`trace`, default `info`).
//!
//! Exit codes: 0 success, 1 other failure, 2 invalid configuration or
//! arguments, 3 training diverged, 4 an oracle bound check failed.

mod oracle;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;

use macfn_core::metrics::{avg_test_return, collect, count_distinct, DiversityReport, ReturnStats};
use macfn_core::rng::Domain;
use macfn_core::trainer::{models_from_checkpoint, train_loop};
use macfn_core::{Checkpoint, Error as CoreError, Policy, RunConfig, SelectMode};

const EXIT_FAILURE: u8 = 1;
const EXIT_CONFIG: u8 = 2;
const EXIT_DIVERGED: u8 = 3;
const EXIT_ORACLE: u8 = 4;

#[derive(Parser, Debug)]
#[command(
    name = "macfn",
    version,
    about = "Multi-agent continuous flow networks"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a model; writes config.toml, metrics.csv, checkpoint.json and summary.json.
    Train {
        /// TOML config file; defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Override a config key, e.g. `--set train.k_hat=10`. Repeatable.
        #[arg(long = "set", value_name = "SECTION.KEY=VALUE")]
        overrides: Vec<String>,
        /// Shorthand for `--set run.output_dir=DIR`.
        #[arg(long)]
        output_dir: Option<PathBuf>,
        /// Allow writing into a directory that already holds a run.
        #[arg(long)]
        overwrite: bool,
    },
    /// Average test return of a checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value_t = Mode::Greedy)]
        mode: Mode,
        #[arg(long, default_value_t = 100)]
        episodes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Distinct-trajectory count over freshly collected rollouts.
    Diversity {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 10_000)]
        n_trajectories: usize,
        /// Defaults to the checkpoint config's diversity threshold.
        #[arg(long)]
        threshold: Option<f64>,
        /// Defaults to the checkpoint config's validity floor.
        #[arg(long)]
        validity_floor: Option<f64>,
        #[arg(long, value_enum, default_value_t = Mode::Sample)]
        mode: Mode,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Check Monte-Carlo flow estimators against quadrature on analytic flows.
    Oracle(oracle::OracleArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
enum Mode {
    Greedy,
    Sample,
    Random,
}

#[derive(Serialize)]
struct EvalOutput {
    mode: Mode,
    episodes: usize,
    seed: u64,
    env_steps: u64,
    mean: f64,
    std: f64,
    returns: Vec<f64>,
}

#[derive(Serialize)]
struct DiversityOutput {
    mode: Mode,
    seed: u64,
    #[serde(flatten)]
    report: DiversityReport,
}

/// An error with the exit code it maps to.
struct Failure {
    code: u8,
    error: anyhow::Error,
}

impl From<anyhow::Error> for Failure {
    fn from(error: anyhow::Error) -> Self {
        let code = match error.downcast_ref::<CoreError>() {
            Some(CoreError::Config(_) | CoreError::Usage(_)) => EXIT_CONFIG,
            Some(e) if e.is_divergence() => EXIT_DIVERGED,
            _ => EXIT_FAILURE,
        };
        Failure { code, error }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("MACFN_LOG", "info")).init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}

fn print_json<T: Serialize>(value: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn run(command: Command) -> Result<(), Failure> {
    match command {
        Command::Train {
            config,
            mut overrides,
            output_dir,
            overwrite,
        } => {
            if let Some(dir) = output_dir {
                overrides.push(format!("run.output_dir={}", toml_string(&dir)));
            }
            let cfg = match &config {
                Some(path) => RunConfig::load(path, &overrides),
                None => RunConfig::parse_with_overrides("", &overrides),
            }
            .map_err(anyhow::Error::from)?;
            let marker = cfg.run.output_dir.join("checkpoint.json");
            if marker.exists() && !overwrite {
                return Err(Failure {
                    code: EXIT_CONFIG,
                    error: anyhow::anyhow!(
                        "{} already holds a run; choose a fresh output directory or pass --overwrite",
                        cfg.run.output_dir.display()
                    ),
                });
            }
            let summary = train_loop(&cfg).map_err(anyhow::Error::from)?;
            print_json(&summary)?;
            Ok(())
        }
        Command::Eval {
            checkpoint,
            mode,
            episodes,
            seed,
        } => {
            let ckpt = load_checkpoint(&checkpoint)?;
            let (spec, flow, _) = models_from_checkpoint(&ckpt).map_err(anyhow::Error::from)?;
            let policy = policy(&ckpt.config, &flow, mode);
            let ReturnStats { mean, std, returns } =
                avg_test_return(&spec, policy, episodes, seed).map_err(anyhow::Error::from)?;
            print_json(&EvalOutput {
                mode,
                episodes,
                seed,
                env_steps: ckpt.env_steps,
                mean,
                std,
                returns,
            })?;
            Ok(())
        }
        Command::Diversity {
            checkpoint,
            n_trajectories,
            threshold,
            validity_floor,
            mode,
            seed,
        } => {
            let ckpt = load_checkpoint(&checkpoint)?;
            let (spec, flow, _) = models_from_checkpoint(&ckpt).map_err(anyhow::Error::from)?;
            let settings = ckpt.config.settings().map_err(anyhow::Error::from)?;
            let trajs = collect(
                &spec,
                policy(&ckpt.config, &flow, mode),
                n_trajectories,
                seed,
                Domain::Collect,
                0,
            )
            .map_err(anyhow::Error::from)?;
            let report = count_distinct(
                &trajs,
                threshold.unwrap_or(settings.diversity_threshold),
                validity_floor.unwrap_or(settings.validity_floor),
            )
            .map_err(anyhow::Error::from)?;
            print_json(&DiversityOutput { mode, seed, report })?;
            Ok(())
        }
        Command::Oracle(args) => {
            let report = oracle::run(&args)?;
            print_json(&report)?;
            if report.passed {
                Ok(())
            } else {
                Err(Failure {
                    code: EXIT_ORACLE,
                    error: anyhow::anyhow!("{} oracle check(s) failed", report.n_failed),
                })
            }
        }
    }
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::load(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

fn policy<'a>(config: &RunConfig, flow: &'a macfn_core::FlowModel, mode: Mode) -> Policy<'a> {
    let select = match mode {
        Mode::Greedy => SelectMode::Greedy,
        Mode::Sample => SelectMode::Sample,
        Mode::Random => return Policy::Random,
    };
    Policy::Flow {
        model: flow,
        mode: select,
        k_hat: config.train.k_hat,
        temperature: config.train.temperature,
    }
}

/// A path as a TOML string literal, for `--set` overrides.
fn toml_string(p: &Path) -> String {
    serde_json::to_string(&p.to_string_lossy()).expect("strings serialize")
}
