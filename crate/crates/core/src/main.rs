use std::path::PathBuf;
use std::process::ExitCode;

use cetc_core::experiment::{run_eval_only, run_single, run_sweep, CoefficientMode, ExperimentConfig};
use cetc_core::{EnsembleCoefficients, Error};
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "cetc", version, about = "Train and evaluate the ensemble CNN-transformer classifier")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one coefficient setting, sweep all seven groups, or re-evaluate a checkpoint.
    Run(RunArgs),
}

#[derive(Args)]
struct RunArgs {
    /// Experiment config (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Ensemble coefficients "A,B,G"; decimals or the token 1/3.
    #[arg(long, conflicts_with = "sweep")]
    coeffs: Option<EnsembleCoefficients>,
    /// Run all seven coefficient groups.
    #[arg(long)]
    sweep: bool,
    /// Evaluate a saved checkpoint instead of training.
    #[arg(long, value_name = "CKPT", conflicts_with = "sweep")]
    eval_only: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Single-threaded, bitwise reproducible execution.
    #[arg(long)]
    deterministic: bool,
    /// Output directory (overrides the config).
    #[arg(long)]
    out: Option<PathBuf>,
}

fn run(args: RunArgs) -> Result<(), Error> {
    let mut cfg = ExperimentConfig::load(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if args.deterministic {
        cfg.deterministic = true;
    }
    if let Some(out) = args.out {
        cfg.output_dir = out;
    }
    if args.sweep {
        cfg.coefficients = CoefficientMode::Sweep;
    } else if let Some(c) = args.coeffs {
        cfg.coefficients = CoefficientMode::Single(c);
    }

    let summary = if let Some(ckpt) = args.eval_only {
        let (summary, check) = run_eval_only(&cfg, &ckpt, args.coeffs)?;
        if let (Some(stored), Some(d)) = (check.stored_val_loss, check.val_loss_diff()) {
            eprintln!("validation loss {:.12} (stored {stored:.12}, diff {d:e})", check.val_loss);
        }
        summary
    } else {
        match cfg.coefficients {
            CoefficientMode::Sweep => run_sweep(&cfg)?,
            CoefficientMode::Single(c) => run_single(&cfg, c)?,
        }
    };
    print!("{}", summary.table);
    eprintln!("outputs written to {}", summary.output_dir.display());
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run(args) => run(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let body = serde_json::json!({ "error": { "kind": e.kind(), "message": e.to_string() } });
            eprintln!("{body}");
            ExitCode::FAILURE
        }
    }
}
