use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

#[derive(Parser, Debug)]
#[command(name = "focusicl", version, about = "Attention laboratory for many-shot in-context learning")]
pub struct Cli {
    /// Root seed; every random stream is derived from it.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Worker threads for independent runs.
    #[arg(long, global = true, default_value_t = 1)]
    pub jobs: usize,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train the toy model on generated CountA prompts.
    Train(TrainArgs),
    /// Evaluate CountA accuracy under one attention method.
    Eval(EvalArgs),
    /// Search the filtering threshold and batch size from response perplexities.
    Search(SearchArgs),
    /// Attention probes and the cost model.
    #[command(subcommand)]
    Probe(Probe),
}

#[derive(Subcommand, Debug)]
pub enum Probe {
    /// Attention on demonstrations and on the query as demonstrations are added.
    Dispersion(DispersionArgs),
    /// Query attention as blank spaces are appended to demonstrations.
    Pad(PadArgs),
    /// Principal components of penultimate-layer states across demonstration counts.
    Pca(PcaArgs),
    /// Analytic and measured demonstration-encoding cost.
    Cost(CostArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Json,
    Csv,
}

#[derive(Args, Debug, Serialize)]
pub struct OutputArgs {
    /// Report path; printed to stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Format::Json)]
    pub format: Format,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Icl,
    Linear,
    Filtering,
    Focusicl,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Combine {
    /// Batch weights from all unmasked scores of each batch.
    All,
    /// Batch weights from unmasked demonstration scores only.
    Demo,
}

#[derive(Args, Debug, Serialize)]
pub struct AttentionArgs {
    #[arg(long, value_enum, default_value_t = Variant::Icl)]
    pub variant: Variant,
    /// Filtering threshold (filtering and focusicl).
    #[arg(long)]
    pub p: Option<f64>,
    /// Demonstrations per batch (focusicl).
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long, value_enum, default_value_t = Combine::All)]
    pub combine: Combine,
    /// Scale scores by 1/sqrt(d_head).
    #[arg(long)]
    pub scale_scores: bool,
}

#[derive(Args, Debug, Serialize)]
pub struct WeightsArgs {
    /// Weight file written by `train`.
    #[arg(long)]
    pub weights: PathBuf,
    /// Expected model configuration; the weight file must match it.
    #[arg(long)]
    pub model_config: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerArg {
    Sgd,
    Adam,
}

#[derive(Args, Debug, Serialize)]
pub struct TrainArgs {
    /// Where to write the weights.
    #[arg(long)]
    pub out: PathBuf,
    /// Model configuration file; defaults are used when omitted.
    #[arg(long)]
    pub model_config: Option<PathBuf>,
    #[arg(long, default_value_t = 200)]
    pub steps: usize,
    #[arg(long, default_value_t = 1.0)]
    pub lr: f64,
    #[arg(long, default_value_t = 4)]
    pub batch: usize,
    #[arg(long, default_value_t = 1.0)]
    pub clip: f64,
    #[arg(long, value_enum, default_value_t = OptimizerArg::Sgd)]
    pub optimizer: OptimizerArg,
    /// Training prompts to generate.
    #[arg(long, default_value_t = 1000)]
    pub prompts: usize,
    /// Most demonstrations in one training prompt.
    #[arg(long, default_value_t = 3)]
    pub max_demos: usize,
    /// Largest random starting position of a training prompt.
    #[arg(long, default_value_t = 2000)]
    pub max_offset: usize,
    #[arg(long, default_value_t = 3)]
    pub min_len: usize,
    #[arg(long, default_value_t = 8)]
    pub max_len: usize,
    /// Optional CSV of per-step losses.
    #[arg(long)]
    pub loss_out: Option<PathBuf>,
}

#[derive(Args, Debug, Serialize)]
pub struct EvalArgs {
    #[command(flatten)]
    pub model: WeightsArgs,
    #[command(flatten)]
    pub attention: AttentionArgs,
    /// Sweep demonstration counts on a validation split and test at the best one.
    #[arg(long, value_delimiter = ',')]
    pub early_stop: Option<Vec<usize>>,
    /// Demonstrations per prompt.
    #[arg(long, default_value_t = 8)]
    pub n: usize,
    #[arg(long, default_value_t = 5)]
    pub runs: usize,
    #[arg(long, default_value_t = 20)]
    pub tasks: usize,
    #[arg(long, default_value_t = 20)]
    pub validation: usize,
    #[arg(long, default_value_t = 200)]
    pub pool: usize,
    /// Sampling temperature; 0 decodes greedily.
    #[arg(long, default_value_t = 0.0)]
    pub temperature: f64,
    #[command(flatten)]
    pub output: OutputArgs,
}

#[derive(Args, Debug, Serialize)]
pub struct SearchArgs {
    /// Weight file; required unless --mock-table is given.
    #[arg(long)]
    pub weights: Option<PathBuf>,
    #[arg(long)]
    pub model_config: Option<PathBuf>,
    /// Perplexity table JSON (`candidates`, `values`, `runs`) used instead of a model.
    #[arg(long, conflicts_with = "weights")]
    pub mock_table: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', default_values_t = [0.0, 0.1, 0.2, 0.3, 0.4])]
    pub candidates: Vec<f64>,
    #[arg(long, default_value_t = 5)]
    pub runs: usize,
    /// Demonstrations per search prompt.
    #[arg(long, default_value_t = 16)]
    pub n: usize,
    #[arg(long, default_value_t = 200)]
    pub pool: usize,
    #[command(flatten)]
    pub output: OutputArgs,
}

#[derive(Args, Debug, Serialize)]
pub struct DispersionArgs {
    #[command(flatten)]
    pub model: WeightsArgs,
    #[command(flatten)]
    pub attention: AttentionArgs,
    #[arg(long, value_delimiter = ',', default_values_t = [0, 10, 20, 30, 40, 50, 60, 70, 80, 90, 100])]
    pub n: Vec<usize>,
    #[command(flatten)]
    pub output: OutputArgs,
}

#[derive(Args, Debug, Serialize)]
pub struct PadArgs {
    #[command(flatten)]
    pub model: WeightsArgs,
    #[command(flatten)]
    pub attention: AttentionArgs,
    #[arg(long, value_delimiter = ',', default_values_t = [0, 4, 16, 64])]
    pub spaces: Vec<usize>,
    #[arg(long, default_value_t = 20)]
    pub n: usize,
    #[arg(long, default_value_t = 1)]
    pub runs: usize,
    #[arg(long, default_value_t = 10)]
    pub tasks: usize,
    #[arg(long, default_value_t = 200)]
    pub pool: usize,
    #[command(flatten)]
    pub output: OutputArgs,
}

#[derive(Args, Debug, Serialize)]
pub struct PcaArgs {
    #[command(flatten)]
    pub model: WeightsArgs,
    #[command(flatten)]
    pub attention: AttentionArgs,
    #[arg(long, value_delimiter = ',', default_values_t = [0, 10, 20, 30, 40])]
    pub n: Vec<usize>,
    #[command(flatten)]
    pub output: OutputArgs,
}

#[derive(Args, Debug, Serialize)]
pub struct CostArgs {
    #[arg(long)]
    pub n: usize,
    #[arg(long)]
    pub b: usize,
    /// Tokens per demonstration for the analytic model.
    #[arg(long)]
    pub l: f64,
    /// Also count multiply-accumulates on this model over N equal-length demonstrations.
    #[arg(long)]
    pub weights: Option<PathBuf>,
    #[command(flatten)]
    pub output: OutputArgs,
}
