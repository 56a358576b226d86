use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use lfr_core::pipeline::{self, ExperimentConfig, RunDir};
use lfr_core::Execution;

/// NL-LFR system identification: data generation, BLA, initialization,
/// Levenberg-Marquardt fitting and evaluation.
#[derive(Parser)]
#[command(name = "lfr", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate (or import) the estimation and test records into <out>/data.
    Generate(StageArgs),
    /// Estimate the best linear approximation from <out>/data.
    Bla(StageArgs),
    /// Build the initial NL-LFR models for every structure and seed.
    Init(StageArgs),
    /// Fit every initial model; restarts run concurrently.
    Fit(StageArgs),
    /// Score the BLA and all fits; write metrics.csv and plot data.
    Eval(StageArgs),
    /// Run all stages in order.
    Pipeline(StageArgs),
    /// Print the default configuration as JSON.
    Defaults,
}

#[derive(Args)]
struct StageArgs {
    /// Experiment configuration (JSON). Defaults to <out>/config.json when
    /// present, otherwise built-in defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Run directory. Falls back to `output_dir` from the configuration.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Force single-threaded execution.
    #[arg(long)]
    sequential: bool,
}

fn resolve(args: &StageArgs) -> Result<(ExperimentConfig, PathBuf)> {
    let from_run = args.out.as_ref().map(|o| o.join("config.json")).filter(|p| p.exists());
    let mut cfg = match args.config.as_ref().or(from_run.as_ref()) {
        Some(path) => ExperimentConfig::load(path).with_context(|| format!("loading {}", path.display()))?,
        None => ExperimentConfig::default(),
    };
    if args.sequential {
        cfg.execution = Execution::Sequential;
    }
    let out = match (&args.out, &cfg.output_dir) {
        (Some(o), _) => o.clone(),
        (None, Some(o)) => o.clone(),
        (None, None) => bail!("no run directory: pass --out or set output_dir in the configuration"),
    };
    cfg.validate().context("invalid configuration")?;
    Ok((cfg, out))
}

fn open(out: &Path) -> Result<RunDir> {
    RunDir::open(out).with_context(|| format!("opening run directory {}", out.display()))
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match cli.command {
        Command::Defaults => {
            println!("{}", serde_json::to_string_pretty(&ExperimentConfig::default())?);
        }
        Command::Pipeline(args) => {
            let (cfg, out) = resolve(&args)?;
            let table = pipeline::run_pipeline(&cfg, &out).context("pipeline failed")?;
            print!("{}", table.to_csv());
        }
        Command::Generate(args) => {
            let (cfg, out) = resolve(&args)?;
            let index = pipeline::stage_generate(&cfg, &mut open(&out)?)?;
            log::info!("wrote estimation data and {} test set(s)", index.tests.len());
        }
        Command::Bla(args) => {
            let (cfg, out) = resolve(&args)?;
            let bla = pipeline::stage_bla(&cfg, &mut open(&out)?)?;
            if let Some(r) = &bla.report {
                log::info!("BLA cost {:.4e} -> {:.4e}", r.initial_cost, r.final_cost);
            }
        }
        Command::Init(args) => {
            let (cfg, out) = resolve(&args)?;
            let inits = pipeline::stage_init(&cfg, &mut open(&out)?)?;
            log::info!("wrote {} initial model(s)", inits.len());
        }
        Command::Fit(args) => {
            let (cfg, out) = resolve(&args)?;
            let fits = pipeline::stage_fit(&cfg, &mut open(&out)?)?;
            log::info!("completed {} fit(s)", fits.len());
        }
        Command::Eval(args) => {
            let (cfg, out) = resolve(&args)?;
            let table = pipeline::stage_eval(&cfg, &mut open(&out)?)?;
            print!("{}", table.to_csv());
        }
    }
    Ok(())
}
