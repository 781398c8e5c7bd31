use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

#[derive(Debug, Parser, Serialize)]
#[command(
    name = "otmil",
    version,
    about = "MIL self-training with optimal-transport pseudo labels"
)]
pub struct Cli {
    #[command(flatten)]
    pub global: Global,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args, Serialize)]
pub struct Global {
    /// Seed for every random choice the command makes.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Output directory; created if missing.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
}

#[derive(Debug, Subcommand, Serialize)]
#[serde(tag = "command", rename_all = "lowercase")]
pub enum Command {
    /// Generate a synthetic bag dataset.
    Gen(GenArgs),
    /// Self-train an instance classifier.
    Train(TrainArgs),
    /// Score a checkpoint against a dataset.
    Eval(EvalArgs),
    /// Grid search over mu and the warm-up length.
    Sweep(SweepArgs),
    /// Run the four ablation arms.
    Ablation(AblationArgs),
    /// Train and score a pooling baseline.
    Baseline(BaselineArgs),
    /// Tabulate instance vs bag label entropy.
    Entropy(EntropyArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum SchemeArg {
    Normal,
    Hard,
}

#[derive(Debug, Args, Serialize)]
pub struct GenArgs {
    #[arg(long, value_enum, default_value = "normal")]
    pub scheme: SchemeArg,
    /// Positive fraction inside each positive bag.
    #[arg(long, default_value_t = 0.10)]
    pub ratio: f64,
    /// Training bags, half of them positive.
    #[arg(long, default_value_t = 200)]
    pub bags: usize,
    /// Bags in each test split.
    #[arg(long, default_value_t = 100)]
    pub test_bags: usize,
    #[arg(long, default_value_t = 100)]
    pub bag_size: usize,
    /// Feature dimension of the Gaussian blobs.
    #[arg(long, default_value_t = 8)]
    pub dim: usize,
    /// Distance of the first concept from the negatives.
    #[arg(long)]
    pub separation: Option<f64>,
    /// Distance of the second concept (hard scheme).
    #[arg(long)]
    pub second_separation: Option<f64>,
    /// Probability that a training positive comes from the first concept
    /// (hard scheme).
    #[arg(long)]
    pub first_concept_prob: Option<f64>,
    #[arg(long, default_value_t = 1.0)]
    pub noise_std: f64,
    /// Build bags from MNIST IDX files instead of blobs. Needs all four paths.
    #[arg(long, requires_all = ["mnist_train_labels", "mnist_test_images", "mnist_test_labels"])]
    pub mnist_train_images: Option<PathBuf>,
    #[arg(long)]
    pub mnist_train_labels: Option<PathBuf>,
    #[arg(long)]
    pub mnist_test_images: Option<PathBuf>,
    #[arg(long)]
    pub mnist_test_labels: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum ArchArg {
    Linear,
    Mlp,
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum InferenceArg {
    Max,
    Mean,
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum LocalArg {
    /// Promote the instance with the largest assigned positive mass.
    Assignment,
    /// Promote the instance with the largest predicted probability.
    Prediction,
}

/// Training hyperparameters shared by train, sweep and ablation.
#[derive(Debug, Clone, Args, Serialize)]
pub struct TrainFlags {
    /// Target positive fraction among positive-bag instances.
    #[arg(long, default_value_t = 0.1)]
    pub mu: f64,
    /// Epochs over which the target fraction moves from 0.5 to mu.
    #[arg(long = "warmup-T", default_value_t = 10)]
    pub warmup_t: usize,
    /// Entropic sharpness of the assignment.
    #[arg(long, default_value_t = 5.0)]
    pub lambda: f64,
    #[arg(long, default_value_t = 1000)]
    pub sinkhorn_iters: usize,
    #[arg(long, default_value_t = 1e-6)]
    pub tol: f64,
    #[arg(long, default_value_t = 0.001)]
    pub lr: f64,
    #[arg(long, default_value_t = 64)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 30)]
    pub epochs: usize,
    #[arg(long, default_value_t = 1)]
    pub reassign_every: usize,
    #[arg(long, value_enum, default_value = "mlp")]
    pub arch: ArchArg,
    #[arg(long, default_value_t = 128)]
    pub hidden: usize,
    /// Use raw predictions as pseudo labels (no transport, no local step).
    #[arg(long)]
    pub no_constrain: bool,
    /// Binarize pseudo labels by row argmax.
    #[arg(long)]
    pub hard_labels: bool,
    /// Hold the target fraction at mu from the first epoch.
    #[arg(long)]
    pub no_adaptive_mu: bool,
    #[arg(long, value_enum, default_value = "max")]
    pub bag_inference: InferenceArg,
    #[arg(long, value_enum, default_value = "assignment")]
    pub local_on: LocalArg,
}

#[derive(Debug, Args, Serialize)]
pub struct TrainArgs {
    /// Training bags (.ndjson or .csv).
    #[arg(long)]
    pub data: PathBuf,
    /// Held-out bags for the per-epoch AUCs; defaults to the training bags.
    #[arg(long)]
    pub eval: Option<PathBuf>,
    #[command(flatten)]
    pub train: TrainFlags,
}

#[derive(Debug, Args, Serialize)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum, default_value = "max")]
    pub bag_inference: InferenceArg,
}

#[derive(Debug, Args, Serialize)]
pub struct SweepArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub eval: Option<PathBuf>,
    /// Comma-separated mu values.
    #[arg(long, value_delimiter = ',', default_value = "0.1,0.15,0.2,0.25")]
    pub mu_grid: Vec<f64>,
    /// Comma-separated warm-up lengths.
    #[arg(long = "T-grid", value_delimiter = ',', default_value = "10")]
    pub t_grid: Vec<usize>,
    /// Worker threads.
    #[arg(long, default_value_t = 4)]
    pub jobs: usize,
    #[command(flatten)]
    pub train: TrainFlags,
}

#[derive(Debug, Args, Serialize)]
pub struct AblationArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub eval: Option<PathBuf>,
    #[command(flatten)]
    pub train: TrainFlags,
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum PoolArg {
    Max,
    Mean,
    Attention,
}

#[derive(Debug, Args, Serialize)]
pub struct BaselineArgs {
    #[arg(long, value_enum, default_value = "attention")]
    pub kind: PoolArg,
    #[arg(long)]
    pub data: PathBuf,
    /// Test split to score; repeatable.
    #[arg(long)]
    pub test: Vec<PathBuf>,
    #[arg(long, default_value_t = 0.01)]
    pub lr: f64,
    #[arg(long, default_value_t = 30)]
    pub epochs: usize,
    #[arg(long, default_value_t = 1)]
    pub batch_size: usize,
    #[arg(long, value_enum, default_value = "linear")]
    pub head: ArchArg,
    #[arg(long, default_value_t = 128)]
    pub hidden: usize,
    #[arg(long, default_value_t = 64)]
    pub attention_hidden: usize,
}

#[derive(Debug, Args, Serialize)]
pub struct EntropyArgs {
    /// Bag sizes as `lo..hi` (inclusive) or a comma list.
    #[arg(long = "K", default_value = "1..64")]
    pub k: String,
    /// Number of interior p values, evenly spaced in (0, 1).
    #[arg(long, default_value_t = 99)]
    pub p_steps: usize,
}
