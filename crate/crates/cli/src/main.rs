use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use feedrep::harness::{self, Experiment, HarnessConfig};

#[derive(Parser)]
#[command(name = "feedrep", version, about = "Feedback residual learning experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Correlation scan and moment comparison
    Stats(Common),
    /// Identity gap of the open and closed loop presets
    Control(Common),
    /// Two-phase training with the inverse-error detector
    Train(Common),
    /// Inverse-error vs naive detector on one frozen phi1
    CompareDetectors(Common),
    /// Write the configured synthetic dataset to dataset.bin
    Generate(Common),
}

#[derive(Args)]
struct Common {
    /// JSON experiment config
    #[arg(long)]
    config: PathBuf,
    /// Overrides output_dir
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides the master seed
    #[arg(long)]
    seed: Option<u64>,
    /// Dataset file written by `generate`
    #[arg(long)]
    dataset: Option<PathBuf>,
}

fn run(experiment: Experiment, args: &Common) -> feedrep::Result<()> {
    let mut cfg = HarnessConfig::load(&args.config)?;
    cfg.experiment = Some(experiment);
    if let Some(out) = &args.out {
        cfg.output_dir = out.clone();
    }
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(path) = &args.dataset {
        cfg.dataset_path = Some(path.clone());
    }
    for path in harness::run(&cfg, experiment)? {
        println!("{}", path.display());
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            // Usage errors are config errors; help and version are not errors.
            return ExitCode::from(u8::from(e.use_stderr()));
        }
    };
    let (experiment, args) = match &cli.command {
        Command::Stats(a) => (Experiment::Stats, a),
        Command::Control(a) => (Experiment::Control, a),
        Command::Train(a) => (Experiment::Train, a),
        Command::CompareDetectors(a) => (Experiment::CompareDetectors, a),
        Command::Generate(a) => (Experiment::Generate, a),
    };
    match run(experiment, args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("feedrep: {e}");
            ExitCode::from(harness::exit_code(&e) as u8)
        }
    }
}
