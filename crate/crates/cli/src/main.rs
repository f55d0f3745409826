use std::path::PathBuf;
use std::process;

use clap::{Parser, Subcommand};

use summlab_cli::commands::{cmd_eval, cmd_gen, cmd_sweep, cmd_train};
use summlab_cli::error::CliError;

#[derive(Parser)]
#[command(name = "summlab", version, about = "Seq2seq summarization robustness lab")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic benchmark directory from a JSON spec.
    Gen {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Override the spec's sampling seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train a model from a key=value config over a data directory.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Override the config's training seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Evaluate a checkpoint against a benchmark's test split.
    Eval {
        /// Path to the checkpoint; vocab.txt is read from the same directory.
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Optional config for generation settings (beam size, length, alpha).
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Train and evaluate one model per epsilon, collecting a summary CSV.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated perturbation radii, e.g. 0,0.001,0.01.
        #[arg(long)]
        epsilons: String,
        /// Override the config's training seed.
        #[arg(long)]
        seed: Option<u64>,
    },
}

fn parse_epsilons(text: &str) -> Result<Vec<f64>, CliError> {
    text.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.parse::<f64>()
                .map_err(|_| CliError::Usage(format!("bad epsilon value {s:?}")))
        })
        .collect()
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Gen { config, out, seed } => cmd_gen(&config, &out, seed),
        Command::Train { config, data, out, seed } => cmd_train(&config, &data, &out, seed),
        Command::Eval { checkpoint, data, out, config } => {
            cmd_eval(&checkpoint, &data, &out, config.as_deref())
        }
        Command::Sweep { config, data, out, epsilons, seed } => {
            let epsilons = parse_epsilons(&epsilons)?;
            cmd_sweep(&config, &data, &out, &epsilons, seed)
        }
    }
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::new().filter("SUMMLAB_LOG")).init();
    let cli = Cli::parse();
    if let Err(err) = run(cli) {
        eprintln!("{err}");
        process::exit(err.code());
    }
}
