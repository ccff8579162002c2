use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use lrfr::cli;

#[derive(Parser)]
#[command(name = "lrfr", version, about = "Continual learning with low-rank feature representations")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every configured method and write result artifacts.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Output directory (overrides `output_dir` in the config).
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        quiet: bool,
    },
    /// Print the rank / null-dimension / audit table of a result artifact.
    Inspect { artifact: PathBuf },
    /// Compare ACC, BWT and null dimensions across artifacts.
    Compare {
        #[arg(required = true, num_args = 2..)]
        artifacts: Vec<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let mut stdout = std::io::stdout().lock();
    let mut stderr = std::io::stderr().lock();
    let code = match cli.command {
        Command::Run { config, out, quiet } => cli::cmd_run(&config, out.as_deref(), quiet, &mut stderr),
        Command::Inspect { artifact } => cli::cmd_inspect(&artifact, &mut stdout, &mut stderr),
        Command::Compare { artifacts } => cli::cmd_compare(&artifacts, &mut stdout, &mut stderr),
    };
    ExitCode::from(code as u8)
}
