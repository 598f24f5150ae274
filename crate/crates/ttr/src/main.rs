use clap::{Parser, Subcommand};
use std::path::PathBuf;
use std::process::ExitCode;
use ttr::cli::{self, Overrides};
use ttr::config::RunConfig;

/// Test-time robustification: augment one test input, minimize the entropy
/// of the marginal prediction over the augmentations with a gradient step,
/// and predict on the original point.
#[derive(Parser)]
#[command(name = "ttr", version, about)]
struct Args {
    /// Run configuration (TOML)
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override the config seed
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Worker threads for evaluation fan-out (0 = all cores, 1 = sequential)
    #[arg(long, global = true)]
    parallelism: Option<usize>,

    /// Override the output directory
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write a checkpoint plus training history
    Train,
    /// Run the configured strategies over clean and corrupted test splits
    Eval,
    /// Sweep the augmentation budget B and emit an efficiency/error series
    Sweep,
    /// Export corrupted test sets as IDX files
    Corrupt,
}

fn run(args: Args) -> ttr::Result<()> {
    let config_path = args
        .config
        .ok_or_else(|| ttr::Error::Config("--config PATH is required".into()))?;
    let over = Overrides { seed: args.seed, parallelism: args.parallelism, out: args.out };
    let cfg = cli::resolve(RunConfig::load(&config_path)?, &over);
    match args.command {
        Command::Train => {
            let out = cli::cmd_train(&cfg)?;
            println!(
                "trained: checkpoint {} (final train accuracy {:.2}%)",
                out.checkpoint.display(),
                100.0 * out.final_train_accuracy
            );
            println!("history: {}", out.history.display());
        }
        Command::Eval => {
            let csv = cli::cmd_eval(&cfg)?;
            println!("results: {}", csv.display());
        }
        Command::Sweep => {
            let (csv, series) = cli::cmd_sweep(&cfg)?;
            println!("sweep: {}", csv.display());
            println!("series: {}", series.display());
        }
        Command::Corrupt => {
            let files = cli::cmd_corrupt(&cfg)?;
            println!("wrote {} corrupted IDX files", files.len());
            for f in files {
                println!("  {}", f.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let args = Args::parse();
    match run(args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
