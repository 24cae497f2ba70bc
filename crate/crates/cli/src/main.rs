use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use stoplab::theorems::Sizes;
use stoplab_cli::config::{Experiment, ExperimentConfig};
use stoplab_cli::error::{CliError, CliResult};
use stoplab_cli::run::{run_config, suite, Format, Outcome, RunOptions};

#[derive(Parser)]
#[command(name = "stoplab", version, about = "Stopping-derivative Monte Carlo lab")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Directory for artifacts; overrides the config's output.dir.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads (affects speed only).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[arg(long, global = true, value_enum, default_value_t = Format::Csv)]
    format: Format,
    /// Record wall-clock runtimes in reports.
    #[arg(long, global = true)]
    timing: bool,
}

#[derive(Args)]
struct ConfigArgs {
    #[arg(long)]
    config: PathBuf,
    /// Overrides the seed in the config.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate paths of the configured process.
    Simulate(ConfigArgs),
    /// Estimate a drift, variance rate, covariance rate or characteristic operator.
    Estimate(ConfigArgs),
    /// Run one `check:` experiment.
    Verify(ConfigArgs),
    /// Run every rule and theorem check.
    Suite {
        /// Run all checks (the only mode; accepted for clarity).
        #[arg(long)]
        all: bool,
        /// Small sizes for a smoke run.
        #[arg(long)]
        quick: bool,
        #[arg(long)]
        seed: u64,
    },
}

fn write_artifacts(dir: &Path, out: &Outcome) -> CliResult<()> {
    let io = |path: &Path, e: std::io::Error| CliError::Io { path: path.display().to_string(), message: e.to_string() };
    std::fs::create_dir_all(dir).map_err(|e| io(dir, e))?;
    for a in &out.artifacts {
        let path = dir.join(&a.name);
        std::fs::write(&path, &a.contents).map_err(|e| io(&path, e))?;
    }
    Ok(())
}

fn expect_kind(cmd: &str, exp: Experiment) -> CliResult<()> {
    let ok = match cmd {
        "simulate" => exp == Experiment::Simulate,
        "estimate" => matches!(
            exp,
            Experiment::Drift | Experiment::VarianceRate | Experiment::Covariance | Experiment::Characteristic
        ),
        _ => matches!(exp, Experiment::Check(_)),
    };
    if ok {
        Ok(())
    } else {
        Err(CliError::config("experiment", format!("experiment kind does not fit the `{cmd}` command")))
    }
}

fn execute(cli: &Cli) -> CliResult<Outcome> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(CliError::config("--threads", "must be at least 1"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::config("--threads", e))?;
    }
    let (outcome, cfg_dir) = match &cli.command {
        Command::Simulate(a) | Command::Estimate(a) | Command::Verify(a) => {
            let cmd = match &cli.command {
                Command::Simulate(_) => "simulate",
                Command::Estimate(_) => "estimate",
                _ => "verify",
            };
            let cfg = ExperimentConfig::load(&a.config)?;
            expect_kind(cmd, cfg.experiment()?)?;
            let opts = RunOptions { format: cli.format, seed: a.seed, timing: cli.timing };
            (run_config(&cfg, &opts)?, cfg.output.dir.clone().map(PathBuf::from))
        }
        Command::Suite { quick, seed, .. } => {
            let sizes = if *quick { Sizes::quick() } else { Sizes::standard() };
            let opts = RunOptions { format: cli.format, seed: Some(*seed), timing: cli.timing };
            (suite(&sizes, *seed, &opts)?, None)
        }
    };
    if let Some(dir) = cli.out.clone().or(cfg_dir) {
        write_artifacts(&dir, &outcome)?;
    }
    Ok(outcome)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(&cli) {
        Ok(out) => {
            print!("{}", out.stdout);
            if out.passed {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(1)
            }
        }
        Err(e) => {
            eprintln!("{}", e.record());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
