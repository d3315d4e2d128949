use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use taic_cli::commands::{cmd_evaluate, cmd_select, cmd_simulate, Overrides};
use taic_cli::config::RunConfig;
use taic_cli::CliError;

/// Transductive prediction-error criteria for Gaussian linear models:
/// simulation studies, candidate-model scoring, and model selection.
#[derive(Parser)]
#[command(name = "taic", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the configured simulation grid and write one directory per setup
    Simulate {
        /// TOML run configuration
        config: PathBuf,
        /// Master seed, overriding the config
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory (default: $TAIC_OUT, then the config, then ./taic-out)
        #[arg(long)]
        out: Option<PathBuf>,
        /// Replications per setup, overriding the config
        #[arg(long)]
        replications: Option<usize>,
    },
    /// Score every configured model on the dataset and write the criterion table
    Evaluate {
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Pick the best model per criterion and write selection.json
    Select {
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn run() -> Result<(), CliError> {
    let cli = Cli::parse();
    match cli.command {
        Command::Simulate { config, seed, out, replications } => {
            let config = RunConfig::load(&config)?;
            let outcome = cmd_simulate(&config, &Overrides { seed, out, replications })?;
            for summary in &outcome.summaries {
                println!(
                    "{}: {} replications, risk of selected tAIC {:.6} / cAIC {:.6} / mAIC {:.6} (oracle {:.6})",
                    summary.directory,
                    summary.replications - summary.failed_replications.len(),
                    summary.risk_of_selected["tAIC"],
                    summary.risk_of_selected["cAIC"],
                    summary.risk_of_selected["mAIC"],
                    summary.risk_of_selected["oracle_conditional"],
                );
            }
            println!("wrote {}", outcome.out_dir.display());
            Ok(())
        }
        Command::Evaluate { config, seed, out } => {
            let config = RunConfig::load(&config)?;
            let outcome = cmd_evaluate(&config, &Overrides { seed, out, replications: None })?;
            println!(
                "{} training rows, {} prediction rows, response {}",
                outcome.n, outcome.n_star, outcome.response_label
            );
            println!(
                "{:<12} {:>12} {:>12} {:>12} {:>12} {:>12}",
                "model", "tai", "cai", "mai", "loss_opt_t", "holdout_nll"
            );
            for row in &outcome.rows {
                println!(
                    "{:<12} {:>12.6} {:>12.6} {:>12.6} {:>12.6} {:>12}",
                    row.model,
                    row.tai,
                    row.cai,
                    row.mai,
                    row.loss_opt_t,
                    row.holdout_neg_loglik
                        .map(|v| format!("{v:.6}"))
                        .unwrap_or_else(|| "-".into()),
                );
            }
            println!("wrote {}", outcome.out_dir.display());
            Ok(())
        }
        Command::Select { config, seed, out } => {
            let config = RunConfig::load(&config)?;
            let outcome = cmd_select(&config, &Overrides { seed, out, replications: None })?;
            for name in &outcome.document.criteria {
                let chosen = &outcome.document.chosen[name];
                match outcome.document.ties.get(name) {
                    Some(tied) => {
                        let others: Vec<&str> = tied
                            .iter()
                            .filter(|id| *id != chosen)
                            .map(String::as_str)
                            .collect();
                        println!("{name}: {chosen} (tied with {})", others.join(", "));
                    }
                    None => println!("{name}: {chosen}"),
                }
            }
            println!("wrote {}", outcome.out_dir.display());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::FAILURE
        }
    }
}
