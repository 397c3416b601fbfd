use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use koopdeepc_harness::config::{ExperimentConfig, ExperimentKind};
use koopdeepc_harness::experiments::{run_experiment, RunOptions};

#[derive(Parser)]
#[command(name = "koopdeepc", version, about = "Koopman data-driven MPC experiments for a synchronous generator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Residual certification and embedding structure checks.
    Certify(Common),
    /// Effective-noise bound ladder.
    Bounds(Common),
    /// Exact-case trajectory representation on the nominal model.
    Represent(Common),
    /// Closed-loop receding-horizon run with envelope fit.
    RunMpc(Common),
    /// Sweep over dt or the prediction horizon.
    Sweep(Common),
}

#[derive(Args)]
struct Common {
    /// JSON configuration; defaults are used when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the seed in the configuration.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (default: the config's `out_dir`, else `out/<experiment>`).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Run the closed loop even when excitation or certification checks fail.
    #[arg(long)]
    force: bool,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let (kind, args) = match cli.command {
        Command::Certify(a) => (ExperimentKind::Certify, a),
        Command::Bounds(a) => (ExperimentKind::Bounds, a),
        Command::Represent(a) => (ExperimentKind::Represent, a),
        Command::RunMpc(a) => (ExperimentKind::ClosedLoop, a),
        Command::Sweep(a) => (ExperimentKind::Sweep, a),
    };
    let cfg = match &args.config {
        Some(path) => ExperimentConfig::from_file(path),
        None => Ok(ExperimentConfig::default()),
    };
    let mut cfg = match cfg {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    };
    if args.seed.is_some() {
        cfg.seed = args.seed;
    }
    let out_dir = args
        .out
        .or_else(|| cfg.out_dir.clone())
        .unwrap_or_else(|| PathBuf::from("out").join(kind.name()));
    let opts = RunOptions {
        out_dir,
        force: args.force,
    };
    match run_experiment(kind, &cfg, &opts) {
        Ok(outcome) => {
            for c in &outcome.checks {
                println!("{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
            }
            for f in &outcome.files {
                log::info!("wrote {}", f.display());
            }
            if outcome.passed() {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(1)
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
