mod commands;
mod config;
mod svg;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::CliResult;

#[derive(Parser)]
#[command(name = "fracnet", version, about = "Train and analyse Frac-Connection language models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one model and write its report and checkpoint.
    Train(Common),
    /// Train every variant in `compare.schemes` with identical settings.
    Compare(Common),
    /// Adjacent-layer cosine similarity of a checkpoint or a fresh model.
    Probe(Common),
    /// Parameter and cost accounting of the configured model.
    Count(Common),
    /// Compare backpropagated gradients with central differences.
    Gradcheck(Common),
}

#[derive(Args)]
struct Common {
    /// Experiment TOML file.
    #[arg(long)]
    config: PathBuf,
    /// Override a config value, e.g. `--set model.rate=4`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn run(cli: Cli) -> CliResult<()> {
    let (common, f): (Common, fn(&config::Experiment, &std::path::Path) -> CliResult<()>) = match cli.command {
        Command::Train(c) => (c, commands::train),
        Command::Compare(c) => (c, commands::compare),
        Command::Probe(c) => (c, commands::probe),
        Command::Count(c) => (c, commands::count),
        Command::Gradcheck(c) => (c, commands::gradcheck_cmd),
    };
    let exp = config::load(&common.config, &common.set)?;
    let out = commands::output_dir(common.out, &exp)?;
    f(&exp, &out)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code() as u8)
        }
    }
}
