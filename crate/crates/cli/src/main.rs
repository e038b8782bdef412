//! `tokenmark`: seeded watermark embedding, detection, training, attacks
//! and evaluation over a synthetic language model.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};

use commands::{AttackKind, ColorChoice, CorpusKind};
use config::Config;

#[derive(Debug, Parser)]
#[command(name = "tokenmark", version, about = "Token-specific text watermarking toolkit")]
struct Cli {
    /// Worker threads for per-sequence parallelism; results do not depend
    /// on this.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// JSON config file; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override the subcommand's primary seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Model management.
    #[command(subcommand)]
    Model(ModelCommand),
    /// Corpus synthesis.
    #[command(subcommand)]
    Corpus(CorpusCommand),
    /// Train the generator pair and save checkpoints.
    Train {
        #[command(flatten)]
        common: Common,
        /// Output directory for checkpoints, log and summary.
        #[arg(long, default_value = "train_out")]
        out_dir: PathBuf,
    },
    /// Generate watermarked sequences.
    Generate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value_t = 10)]
        count: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Detect watermarks in a corpus file.
    Detect {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Corpus JSON-lines file to score.
        #[arg(long = "in", value_name = "FILE")]
        input: PathBuf,
        /// Verdict threshold override.
        #[arg(long)]
        threshold: Option<f64>,
        /// Sliding-window size override.
        #[arg(long)]
        window: Option<usize>,
        /// Machine-readable report destination.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Per-token green/red annotation of one record.
    Annotate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long = "in", value_name = "FILE")]
        input: PathBuf,
        /// Record index within the file.
        #[arg(long, default_value_t = 0)]
        index: usize,
        #[arg(long, value_enum, default_value_t = ColorChoice::Auto)]
        color: ColorChoice,
    },
    /// Apply a watermark-removal attack to a corpus.
    Attack {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        kind: AttackKind,
        #[arg(long = "in", value_name = "FILE")]
        input: PathBuf,
        /// Host human corpus (copy-paste only).
        #[arg(long)]
        human: Option<PathBuf>,
        /// Segment count for copy-paste: 1 or 3.
        #[arg(long, default_value_t = 1)]
        k: usize,
        /// Corruption rate in [0,1] (corrupt only).
        #[arg(long, default_value_t = 0.3)]
        rate: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Calibrate a detection threshold from a null corpus.
    Calibrate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Null (human/unwatermarked) corpus.
        #[arg(long = "in", value_name = "FILE")]
        input: PathBuf,
        /// Target false-positive rate.
        #[arg(long, default_value_t = 0.01)]
        fpr: f64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Full evaluation protocol: thresholds, TPR, similarity, buckets.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Fit a trade-off curve to points.
    Curves {
        /// JSON points: [[x,y],...] or [{"x":..,"y":..},...].
        #[arg(long = "in", value_name = "FILE")]
        input: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also export curve samples as CSV.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Print a complete default config.
    InitConfig {
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, Subcommand)]
enum ModelCommand {
    /// Build the model and write its header.
    Build {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, Subcommand)]
enum CorpusCommand {
    /// Sample prompts or baseline continuations.
    Generate {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value_t = CorpusKind::Unwatermarked)]
        kind: CorpusKind,
        #[arg(long, default_value_t = 10)]
        count: usize,
        /// Continuation length override.
        #[arg(long)]
        length: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> anyhow::Result<()> {
    if let Some(jobs) = cli.jobs {
        rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build_global()
            .ok(); // a pool may already exist; results do not depend on it
    }
    match cli.command {
        Command::Model(ModelCommand::Build { common, out }) => {
            let cfg = Config::load(common.config.as_deref())?;
            commands::model_build(&cfg, out.as_deref())
        }
        Command::Corpus(CorpusCommand::Generate { common, kind, count, length, out }) => {
            let cfg = Config::load(common.config.as_deref())?;
            commands::corpus_generate(&cfg, kind, count, length, common.seed, out.as_deref())
        }
        Command::Train { common, out_dir } => {
            let cfg = Config::load(common.config.as_deref())?;
            commands::train_cmd(&cfg, common.seed, &out_dir)
        }
        Command::Generate { common, checkpoint, count, out } => {
            let cfg = Config::load(common.config.as_deref())?;
            commands::generate_cmd(&cfg, checkpoint.as_deref(), count, common.seed, &out)
        }
        Command::Detect { common, checkpoint, input, threshold, window, out } => {
            let cfg = Config::load(common.config.as_deref())?;
            commands::detect_cmd(&cfg, checkpoint.as_deref(), &input, threshold, window, out.as_deref())
        }
        Command::Annotate { common, checkpoint, input, index, color } => {
            let cfg = Config::load(common.config.as_deref())?;
            commands::annotate_cmd(&cfg, checkpoint.as_deref(), &input, index, color)
        }
        Command::Attack { common, kind, input, human, k, rate, out } => {
            let cfg = Config::load(common.config.as_deref())?;
            commands::attack_cmd(&cfg, kind, &input, human.as_deref(), k, rate, common.seed, &out)
        }
        Command::Calibrate { common, checkpoint, input, fpr, out } => {
            let cfg = Config::load(common.config.as_deref())?;
            commands::calibrate_cmd(&cfg, checkpoint.as_deref(), &input, fpr, out.as_deref())
        }
        Command::Evaluate { common, checkpoint, out } => {
            let cfg = Config::load(common.config.as_deref())?;
            commands::evaluate_cmd(&cfg, checkpoint.as_deref(), common.seed, out.as_deref())
        }
        Command::Curves { input, out, csv } => {
            commands::curves_cmd(&input, out.as_deref(), csv.as_deref())
        }
        Command::InitConfig { out } => commands::init_config(out.as_deref()),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
