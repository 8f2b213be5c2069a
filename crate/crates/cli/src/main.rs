use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use tweeze_cli::commands::{run_bench, run_edit, run_plot, run_sweep, run_verify, RunOptions};
use tweeze_cli::{CliResult, Experiment, ExperimentConfig};

#[derive(Parser)]
#[command(
    name = "tweeze",
    version,
    about = "Direct-path editing experiments on analytic denoisers"
)]
struct Cli {
    /// Experiment config (TOML).
    #[arg(long, global = true, default_value = "configs/default.toml")]
    config: PathBuf,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides the config output_dir, which is relative to the config file.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Skip writing JSONL traces.
    #[arg(long, global = true)]
    no_trace: bool,
    #[arg(long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Edit benchmark instance 0 and write its trace and metrics.
    Edit,
    /// Grid over reg.active_steps and reg.strength.
    Sweep,
    /// Compare tweeze, DDIM and the unregularized direct path.
    Bench,
    /// Run the gradient and Monte-Carlo oracle suites.
    Verify,
    /// Render a trajectory (SVG) or grid latents (PGM).
    Plot,
}

fn run(cli: Cli) -> CliResult<()> {
    let (mut cfg, base) = ExperimentConfig::load(&cli.config)?;
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    let exp = Experiment::resolve(cfg, &base)?;
    let opts = RunOptions {
        out: cli.out.unwrap_or_else(|| base.join(&exp.config.output_dir)),
        trace: !cli.no_trace,
        quiet: cli.quiet,
    };
    match cli.command {
        Command::Edit => run_edit(&exp, &opts).map(drop),
        Command::Sweep => run_sweep(&exp, &opts).map(drop),
        Command::Bench => run_bench(&exp, &opts).map(drop),
        Command::Verify => run_verify(&exp, &opts).map(drop),
        Command::Plot => run_plot(&exp, &base, &opts).map(drop),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
