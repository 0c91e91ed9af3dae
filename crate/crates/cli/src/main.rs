mod commands;
mod error;
mod overrides;
mod svg;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

/// Instance-embedding anchors with diversity regularization on a 2-D mixture.
#[derive(Debug, Parser)]
#[command(name = "icone", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Overrides {
    /// TOML configuration; missing keys take their defaults.
    #[arg(long, short)]
    config: Option<PathBuf>,

    /// Config overrides, `--section.key value` or `--section.key=value`.
    /// Aliases: --batch-size --epochs --views --lr --variant --regularizer
    /// --out-dim --seed --seeds --ablation --out.
    #[arg(trailing_var_arg = true, allow_hyphen_values = true, value_name = "OVERRIDES")]
    rest: Vec<String>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Sample the mixture dataset and write dataset.csv.
    Generate(#[command(flatten)] Overrides),
    /// Train one model, writing curves, snapshots, parameters and metrics.
    Train {
        /// Dataset CSV to train on instead of sampling a new one.
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Train every loss ablation over several seeds and tabulate metrics.
    Ablate(#[command(flatten)] Overrides),
    /// Re-score a stored snapshot of a training run.
    Eval {
        #[arg(long)]
        run: PathBuf,
        /// Snapshot epoch; the final parameters when omitted.
        #[arg(long)]
        epoch: Option<usize>,
    },
    /// Render SVG figures for a training run.
    Plot {
        #[arg(long)]
        run: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Generate(o) => commands::generate(&o.config, &o.rest),
        Command::Train { dataset, overrides: o } => commands::train(&o.config, &o.rest, dataset.as_deref()),
        Command::Ablate(o) => commands::ablate(&o.config, &o.rest),
        Command::Eval { run, epoch } => commands::eval(&run, epoch),
        Command::Plot { run } => commands::plot(&run),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
