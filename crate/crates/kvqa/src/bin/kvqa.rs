use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use kvqa::cli::{
    cmd_analyze, cmd_eval, cmd_knowledge, cmd_select, cmd_synth, cmd_train, EvalOptions,
    RunConfig,
};

/// Knowledge-augmented visual question answering pipeline.
#[derive(Parser)]
#[command(name = "kvqa", version, about)]
struct Cli {
    /// Path to a JSON configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Random seed; overrides the configured one.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output directory; overrides the configured one.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic corpus (datasets, tags, stub knowledge).
    Synth,
    /// Populate the knowledge cache for every question in the corpus.
    Knowledge,
    /// Rank inferences per question and train the sentence embedder.
    Select,
    /// Train the answerer and save the best checkpoint.
    Train,
    /// Evaluate a checkpoint (or saved predictions) on the test split.
    Eval {
        /// Also report accuracy on the commonsense-needing subset.
        #[arg(long)]
        subset: bool,
        /// Proceed even if input artifacts carry mixed config digests.
        #[arg(long)]
        force: bool,
    },
    /// Dump fusion attention per test question, with a narrative.
    Analyze,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn run(cli: Cli) -> kvqa::Result<()> {
    let mut config = RunConfig::load(cli.config.as_deref())?;
    config.apply_overrides(cli.seed, cli.out);

    match cli.command {
        Command::Synth => {
            let manifest = cmd_synth(&config)?;
            println!(
                "synth: {} train / {} val / {} test records in {}",
                manifest.n_train,
                manifest.n_val,
                manifest.n_test,
                config.out_dir.display()
            );
        }
        Command::Knowledge => {
            let summary = cmd_knowledge(&config)?;
            println!(
                "knowledge: {} phrases, {} newly cached, {} warnings",
                summary.phrases, summary.newly_cached, summary.warnings
            );
        }
        Command::Select => {
            let summary = cmd_select(&config)?;
            println!(
                "select: ranked inferences for {} questions ({} weak pairs, embedder {})",
                summary.questions,
                summary.pairs,
                if summary.augmented {
                    "augmented"
                } else {
                    "untrained"
                }
            );
        }
        Command::Train => {
            let outcome = cmd_train(&config)?;
            println!(
                "train: best epoch {} with validation accuracy {:.4}; checkpoint in {}",
                outcome.checkpoint.epoch,
                outcome.checkpoint.val_accuracy,
                config.out_dir.display()
            );
        }
        Command::Eval { subset, force } => {
            let report = cmd_eval(&config, EvalOptions { subset, force })?;
            println!(
                "eval: accuracy {:.4} over {} questions",
                report.accuracy, report.count
            );
            if let Some(sub) = &report.subset {
                if let Some(retained) = &sub.retained {
                    println!(
                        "  subset retained: accuracy {:.4} over {} questions",
                        retained.accuracy, retained.count
                    );
                }
                for (reason, stat) in &sub.excluded {
                    println!(
                        "  subset excluded ({reason}): accuracy {:.4} over {} questions",
                        stat.accuracy, stat.count
                    );
                }
            }
        }
        Command::Analyze => {
            let rows = cmd_analyze(&config)?;
            println!(
                "analyze: attention for {} questions in {}",
                rows.len(),
                config.out_dir.display()
            );
        }
    }
    Ok(())
}
