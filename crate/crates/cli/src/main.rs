use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use fisherlda::commands::{self, Context, Overrides};
use fisherlda::Result;

/// Fisher-vector networks trained with an LDA eigenvalue objective.
#[derive(Parser, Debug)]
#[command(name = "fisherlda", version)]
struct Cli {
    /// Run configuration (JSON).
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Checkpoint to read: the starting point for `train`, the model for
    /// `encode` and `eval`. Defaults to the one in the output directory.
    #[arg(long, global = true, value_name = "PATH")]
    checkpoint: Option<PathBuf>,
    /// Output directory, overriding the config.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Upper bound on worker threads.
    #[arg(long, global = true, value_name = "N")]
    threads: Option<usize>,
    /// Seed, overriding the config.
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Fit PCA, GMM and network on the train split.
    Train,
    /// Write embeddings of the given image ids.
    Encode {
        #[arg(value_name = "IMAGE_ID")]
        ids: Vec<String>,
    },
    /// Single-shot CMC and mAP on the test split.
    Eval {
        /// Match the test images against themselves.
        #[arg(long)]
        self_gallery: bool,
    },
    /// Generate a synthetic descriptor dataset and its manifest.
    Synth,
}

fn run(cli: Cli) -> Result<()> {
    let Some(config) = cli.config.as_deref() else {
        return Err(fisherlda::CliError::Config("--config PATH is required".into()));
    };
    let ctx: Context = commands::load_context(
        config,
        &Overrides {
            out: cli.out,
            seed: cli.seed,
            threads: cli.threads,
        },
    )?;
    let checkpoint = cli.checkpoint.as_deref();
    match cli.command {
        Command::Train => {
            let s = commands::train(&ctx, checkpoint)?;
            log::info!(
                "{} epochs, objective {:.6} -> {:.6}, checkpoint {}",
                s.epochs,
                s.first_loss,
                s.last_loss,
                s.checkpoint.display()
            );
        }
        Command::Encode { ids } => {
            for path in commands::encode(&ctx, checkpoint, &ids)? {
                log::info!("wrote {}", path.display());
            }
        }
        Command::Eval { self_gallery } => {
            let (summary, _) = commands::eval(&ctx, checkpoint, self_gallery)?;
            println!("{}", serde_json::to_string(&summary).expect("summary serializes"));
        }
        Command::Synth => {
            let path = commands::synth(&ctx)?;
            log::info!("wrote {}", path.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
