use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use lbe_cli::config::parse_price_mode;
use lbe_cli::{CliError, Outcome, Overrides, RunConfig, Runner, Stage};
use lbe_core::panel::PriceIndexMode;

#[derive(Parser, Debug)]
#[command(name = "lbe", version, about = "Learning-by-exporting estimation pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Option<Command>,

    /// TOML run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Master seed for stochastic stages.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Stage to run when no subcommand is given.
    #[arg(long, value_enum)]
    stage: Option<Stage>,

    /// Materials price index: wti, io or fitted.
    #[arg(long, global = true, value_parser = parse_price_mode)]
    price_index_mode: Option<PriceIndexMode>,

    /// Nearest neighbours per treated plant.
    #[arg(long, global = true)]
    k: Option<usize>,

    /// Bootstrap replicates for both GMM and DiD.
    #[arg(long = "bootstrap-B", global = true)]
    bootstrap_b: Option<usize>,

    /// Skip stages whose manifest matches the current inputs and config.
    #[arg(long, global = true)]
    skip_if_fresh: bool,
}

#[derive(Subcommand, Debug, Clone, Copy)]
enum Command {
    /// Simulate a synthetic plant panel.
    Simulate,
    /// First stage, two-step GMM, productivity and its law of motion.
    Estimate,
    /// Export-entry choice probabilities.
    Ccp,
    /// Propensity-score matching and balance tables.
    Match,
    /// Matched difference-in-differences by horizon.
    Did,
    /// Two-way fixed-effects event studies.
    EventStudy,
    /// All stages in order.
    Pipeline,
}

fn run(cli: &Cli) -> Result<(), CliError> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    cfg.apply(&Overrides {
        seed: cli.seed,
        out: cli.out.clone(),
        price_index_mode: cli.price_index_mode,
        k: cli.k,
        bootstrap_replicates: cli.bootstrap_b,
    });
    let runner = Runner::new(cfg, cli.skip_if_fresh)?;
    let stage = match (cli.command, cli.stage) {
        (Some(_), Some(_)) => {
            return Err(CliError::Config("give either a subcommand or --stage, not both".into()))
        }
        (Some(Command::Simulate), None) => Some(Stage::Simulate),
        (Some(Command::Estimate), None) => Some(Stage::Estimate),
        (Some(Command::Ccp), None) => Some(Stage::Ccp),
        (Some(Command::Match), None) => Some(Stage::Match),
        (Some(Command::Did), None) => Some(Stage::Did),
        (Some(Command::EventStudy), None) => Some(Stage::EventStudy),
        (Some(Command::Pipeline), None) | (None, None) => None,
        (None, Some(s)) => Some(s),
    };
    let report = |s: Stage, o: Outcome| match o {
        Outcome::Ran => eprintln!("{}: done", s.name()),
        Outcome::Skipped => eprintln!("{}: up to date", s.name()),
    };
    match stage {
        Some(s) => report(s, runner.run(s)?),
        None => {
            for (s, o) in runner.pipeline()? {
                report(s, o);
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
