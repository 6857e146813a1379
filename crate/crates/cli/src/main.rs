use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

mod commands;

/// Part localization and pose-normalized classification.
#[derive(Debug, Parser)]
#[command(name = "partloc", version)]
struct Cli {
    /// JSON configuration file; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for every randomized stage.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for per-image stages (0 = all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct DataArgs {
    /// Dataset directory holding manifest.jsonl (and parts.json, proposals.csv).
    #[arg(long)]
    data: PathBuf,
    /// Proposals CSV; defaults to <data>/proposals.csv.
    #[arg(long)]
    proposals: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Variant {
    Null,
    Box,
    Mg,
    Np,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Metric {
    Pcp,
    Accuracy,
    Recall,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Test,
    All,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Param {
    Alpha,
    K,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Convert a CUB-200-2011 directory into a manifest.
    IngestCub {
        #[arg(long)]
        cub: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate a synthetic dataset with rasters and proposals.
    GenSynth {
        #[arg(long)]
        out: PathBuf,
    },
    /// Extract toy features for every proposal and ground-truth window.
    ExtractFeatures {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Validate a proposals CSV against the manifest and rewrite it canonically.
    LoadProposals {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate dense multi-scale sliding-window proposals.
    DensePropose {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one detector per part on the training split.
    TrainDetectors {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        features: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit a configuration prior.
    FitPrior {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        features: PathBuf,
        #[arg(long, value_enum)]
        variant: Option<Variant>,
        #[arg(long)]
        alpha: Option<f64>,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Infer object and part configurations.
    Infer {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        features: PathBuf,
        #[arg(long)]
        detectors: PathBuf,
        #[arg(long)]
        prior: PathBuf,
        /// Fix the object window to the annotated box.
        #[arg(long)]
        bbox_given: bool,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the one-vs-all classifier on ground-truth windows.
    TrainClassifier {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        features: PathBuf,
        /// Object block only.
        #[arg(long)]
        no_parts: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Classify test images from inferred configurations or ground truth.
    Predict {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        features: PathBuf,
        #[arg(long)]
        classifier: PathBuf,
        /// Configurations JSONL; without it ground-truth windows are used.
        #[arg(long)]
        configs: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compute a metric table.
    Evaluate {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, value_enum)]
        metric: Metric,
        /// Configurations JSONL (pcp).
        #[arg(long)]
        configs: Option<PathBuf>,
        /// Predictions CSV (accuracy).
        #[arg(long)]
        predictions: Option<PathBuf>,
        /// Comma-separated IoU thresholds (recall).
        #[arg(long, value_delimiter = ',')]
        thresholds: Option<Vec<f64>>,
        /// PCP overlap threshold.
        #[arg(long)]
        overlap: Option<f64>,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Cross-validate a prior parameter on the training split.
    CvSweep {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        features: PathBuf,
        #[arg(long, value_enum)]
        param: Param,
        /// Comma-separated grid; defaults to the configured one.
        #[arg(long, value_delimiter = ',')]
        grid: Option<Vec<f64>>,
        #[arg(long)]
        folds: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
