//! `ovafuse`: scan and clean corpora, synthesize test data, train backbones, dump
//! logits, search fusion weights and evaluate hybrids.
//!
//! Settings resolve as flag > config file (`--config`) > built-in default. Failures
//! print one `error[CODE]: message` line on stderr and exit nonzero.

mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{CommandFactory, Parser, Subcommand};

use ovafuse_core::fusion::{FusionMode, Objective};
use ovafuse_core::ingest::CleanMode;
use ovafuse_core::BackboneKind;
use ovafuse_models::Scale;

use crate::commands::DumpSplit;
use crate::config::RunConfig;
use crate::error::CliError;

#[derive(Debug, Parser)]
#[command(name = "ovafuse", version, about = "Ultrasound hybrid-ensemble pipeline")]
struct Cli {
    /// TOML file with run settings; flags override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Log progress to stderr (repeat for more detail).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Index a corpus, flag unreadable images and write the manifest.
    Scan {
        #[arg(long)]
        root: Option<PathBuf>,
        /// Manifest path [default: ROOT/manifest.json].
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        workers: Option<usize>,
    },
    /// Remove flagged images from a corpus.
    Clean {
        #[arg(long)]
        root: Option<PathBuf>,
        /// dry_run, quarantine or delete.
        #[arg(long)]
        mode: CleanMode,
        /// Directory for the report and updated manifest [default: ROOT].
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate a labelled synthetic corpus.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        per_class_train: Option<usize>,
        #[arg(long)]
        per_class_test: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        image_size: Option<u32>,
    },
    /// Train one backbone and write checkpoints plus a training report.
    Train {
        #[arg(long)]
        root: Option<PathBuf>,
        /// Backbone family, e.g. residual_cnn or swin.
        #[arg(long)]
        backbone: Option<BackboneKind>,
        /// tiny or paper.
        #[arg(long)]
        scale: Option<Scale>,
        /// Start from the cached weights in $MODEL_CACHE_DIR (paper scale only).
        #[arg(long)]
        pretrained: bool,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        learning_rate: Option<f64>,
        #[arg(long)]
        batch_size: Option<usize>,
        /// Checkpoint directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write a model's logits on one split as CSV.
    DumpLogits {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        root: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "test")]
        split: DumpSplit,
        #[arg(long)]
        out: PathBuf,
    },
    /// Search simplex fusion weights on logit dumps.
    OptimizeWeights {
        /// Logit CSVs as FILE or MEMBER=FILE; a bare FILE is named by its stem.
        #[arg(long, num_args = 1.., required = true)]
        logits: Vec<String>,
        /// Manifest supplying the ground-truth labels.
        #[arg(long)]
        labels_from: PathBuf,
        /// f1 or accuracy.
        #[arg(long)]
        objective: Option<Objective>,
        #[arg(long)]
        step: Option<f64>,
        /// Fusion mode recorded in the written spec.
        #[arg(long)]
        mode: Option<FusionMode>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Metrics, CSV and confusion-matrix plot for models and an optional hybrid.
    Evaluate {
        #[arg(long)]
        root: Option<PathBuf>,
        #[arg(long, num_args = 1.., required = true)]
        checkpoint: Vec<PathBuf>,
        /// Ensemble spec JSON from optimize-weights.
        #[arg(long, conflicts_with = "preset")]
        ensemble: Option<PathBuf>,
        /// denconst or denconrest, uniform weights.
        #[arg(long)]
        preset: Option<String>,
        #[arg(long, value_enum, default_value = "test")]
        split: DumpSplit,
        #[arg(long)]
        out: PathBuf,
    },
}

fn set<T>(slot: &mut T, flag: Option<T>) {
    if let Some(v) = flag {
        *slot = v;
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    let mut cfg = RunConfig::load(cli.config.as_deref())?;
    match cli.command {
        Command::Scan { root, out, workers } => {
            set(&mut cfg.root, root.map(Some));
            set(&mut cfg.train.workers, workers);
            commands::scan(&cfg, out)
        }
        Command::Clean { root, mode, out } => {
            set(&mut cfg.root, root.map(Some));
            commands::clean(&cfg, mode, out)
        }
        Command::Synth {
            out,
            per_class_train,
            per_class_test,
            seed,
            image_size,
        } => {
            set(&mut cfg.synth.per_class_train, per_class_train);
            set(&mut cfg.synth.per_class_test, per_class_test);
            set(&mut cfg.synth.seed, seed);
            set(&mut cfg.synth.image_size, image_size);
            commands::synth(&cfg, &out)
        }
        Command::Train {
            root,
            backbone,
            scale,
            pretrained,
            epochs,
            seed,
            learning_rate,
            batch_size,
            out,
        } => {
            set(&mut cfg.root, root.map(Some));
            set(&mut cfg.backbone.kind, backbone.map(Some));
            set(&mut cfg.backbone.scale, scale);
            cfg.backbone.pretrained |= pretrained;
            set(&mut cfg.train.epochs, epochs);
            set(&mut cfg.train.seed, seed);
            set(&mut cfg.train.learning_rate, learning_rate);
            set(&mut cfg.train.batch_size, batch_size.map(Some));
            set(&mut cfg.train.checkpoint_dir, out);
            commands::train_backbone(&cfg)
        }
        Command::DumpLogits {
            checkpoint,
            root,
            split,
            out,
        } => {
            set(&mut cfg.root, root.map(Some));
            commands::dump_logits(&cfg, &checkpoint, split, &out)
        }
        Command::OptimizeWeights {
            logits,
            labels_from,
            objective,
            step,
            mode,
            out,
        } => {
            set(&mut cfg.fusion.objective, objective);
            set(&mut cfg.fusion.step, step);
            set(&mut cfg.fusion.mode, mode);
            commands::optimize(&cfg, &logits, &labels_from, &out)
        }
        Command::Evaluate {
            root,
            checkpoint,
            ensemble,
            preset,
            split,
            out,
        } => {
            set(&mut cfg.root, root.map(Some));
            set(&mut cfg.fusion.preset, preset.map(Some));
            commands::evaluate(&cfg, &checkpoint, ensemble.as_deref(), split, &out)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => e.exit(),
        Err(e) => {
            let rendered = e.render().to_string();
            let first = rendered.lines().next().unwrap_or("invalid arguments");
            eprintln!("error[E_USAGE]: {}", first.trim_start_matches("error: "));
            eprintln!("{}", Cli::command().render_usage());
            return ExitCode::from(2);
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error[{}]: {}", e.code(), e.one_line());
            ExitCode::FAILURE
        }
    }
}
