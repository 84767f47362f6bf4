//! Command-line surface for the meta-reinforced augmentation pipeline.
//!
//! Exit codes: 0 success, 1 config error, 2 data error, 3 numerical
//! failure.

mod commands;

use clap::{Parser, Subcommand};
use std::path::PathBuf;

#[derive(Parser)]
#[command(
    name = "metairnet",
    about = "One-shot fine-grained classification with meta-reinforced generated images",
    version
)]
struct Cli {
    /// Experiment config file (TOML).
    #[arg(long, global = true, default_value = "metairnet.toml")]
    config: PathBuf,

    /// Override every stage seed (split, training, evaluation).
    #[arg(long, global = true)]
    seed: Option<u64>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a procedural fine-grained dataset as a PNG tree.
    MakeSynthetic {
        /// Output directory for the class-per-subdirectory tree.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 20)]
        classes: u32,
        #[arg(long, default_value_t = 12)]
        images_per_class: usize,
        #[arg(long, default_value_t = 64)]
        image_size: usize,
        #[arg(long, default_value_t = 0)]
        dataset_seed: u64,
    },
    /// Scratch-train the toy generator on the base classes and save its
    /// checkpoint.
    TrainGenerator,
    /// Adapt the generator to every dataset image ahead of time and
    /// populate the generated-image cache (idempotent).
    FinetuneGan,
    /// Meta-train the fusion network and classifier; saves the
    /// best-validation checkpoint and appends a ledger row.
    MetaTrain,
    /// Evaluate a checkpoint on the novel split and append a ledger row.
    Evaluate {
        /// Model checkpoint (defaults to <output_dir>/model.ckpt).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Augmentation mode override (e.g. none, flip, mixup, metairnet).
        #[arg(long)]
        mode: Option<String>,
        #[arg(long)]
        episodes: Option<usize>,
        #[arg(long)]
        shot: Option<usize>,
        #[arg(long)]
        n_aug: Option<usize>,
        /// Also flip-augment the support set.
        #[arg(long)]
        flip: bool,
        /// Write per-episode fusion weight grids to this CSV.
        #[arg(long)]
        dump_weights: Option<PathBuf>,
    },
    /// Pilot-study probes: nearest-neighbor / logistic / softmax
    /// classifiers over frozen features.
    EvaluateProbes {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        episodes: Option<usize>,
    },
    /// Evaluate one checkpoint across several n_aug values.
    SweepNaug {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Comma-separated n_aug values, e.g. 1,2,3,4,5.
        #[arg(long, default_value = "1,2,3,4,5")]
        values: String,
        #[arg(long)]
        episodes: Option<usize>,
    },
    /// Export original / generated / fused image sets (plus a weight-grid
    /// table) for diversity analysis.
    ExportSets {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Which class pool to export: base, val, or novel.
        #[arg(long, default_value = "novel")]
        split: String,
        /// Cap on exported images.
        #[arg(long)]
        limit: Option<usize>,
    },
    /// Pairwise-distance and eigenspectrum diversity analysis over three
    /// image sets.
    AnalyzeDiversity {
        #[arg(long)]
        original: PathBuf,
        #[arg(long)]
        generated: PathBuf,
        #[arg(long)]
        fused: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Output directory for plots and the summary table.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let code = match commands::run(&cli.config, cli.seed, &cli.command) {
        Ok(()) => 0,
        Err(err) => {
            eprintln!("error: {err}");
            err.exit_code()
        }
    };
    std::process::exit(code);
}
