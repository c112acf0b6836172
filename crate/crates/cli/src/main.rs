use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use icenet_cli::{run, Command, Overrides};

#[derive(Parser)]
#[command(name = "icenet", version, about = "Constrained neural networks for claim-count data")]
struct Cli {
    #[command(subcommand)]
    command: Sub,
}

#[derive(Subcommand)]
enum Sub {
    /// Ingest the data, fit the schema, split and write a summary.
    Prepare(Common),
    /// Train `training.runs` networks and their nagging ensemble.
    Train(Common),
    /// Score ICE curves of trained models against the constraints.
    Audit(Common),
    /// Export ICE curves.
    Ice(Common),
    /// Export partial dependence curves.
    Pdp(Common),
    /// Distil an ensemble and fine-tune it over a grid of penalty scales.
    Sweep(Common),
    /// Generate a synthetic portfolio.
    Synth(Common),
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Validate and print the effective config without writing anything.
    #[arg(long)]
    dry_run: bool,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let (cmd, args) = match cli.command {
        Sub::Prepare(a) => (Command::Prepare, a),
        Sub::Train(a) => (Command::Train, a),
        Sub::Audit(a) => (Command::Audit, a),
        Sub::Ice(a) => (Command::Ice, a),
        Sub::Pdp(a) => (Command::Pdp, a),
        Sub::Sweep(a) => (Command::Sweep, a),
        Sub::Synth(a) => (Command::Synth, a),
    };
    let overrides = Overrides {
        seed: args.seed,
        out: args.out,
    };
    match run(cmd, &args.config, &overrides, args.dry_run) {
        Ok(text) => {
            print!("{text}");
            if args.dry_run {
                println!();
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
