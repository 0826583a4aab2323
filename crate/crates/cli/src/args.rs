use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "poigraph", version, about = "Multilingual POI retrieval pipeline")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// Run configuration (TOML). Defaults apply when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Override any config key, e.g. `--set train.epochs=5`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub sets: Vec<String>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true)]
    pub work_dir: Option<PathBuf>,
    #[arg(long, global = true)]
    pub catalog: Option<PathBuf>,
    #[arg(long, global = true)]
    pub logs: Option<PathBuf>,
    /// Parameter precision: f32 or f64.
    #[arg(long, global = true)]
    pub precision: Option<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic multilingual catalog and search log.
    Synth(SynthArgs),
    /// Validate the catalog and logs and report split sizes.
    Ingest,
    /// Build the POI/query graph from the training split.
    BuildGraph,
    /// Train the ranker on the training split.
    Train,
    /// Evaluate the checkpoint and baselines on held-out searches.
    Eval(EvalArgs),
    /// Rank candidate POIs for one query.
    Rank(RankArgs),
    /// Rank interactively; each input line is `LAT LON QUERY`.
    Repl(ReplArgs),
    /// Write per-pair probabilities and fused feature vectors as JSON lines.
    ExportFeatures(ExportArgs),
    /// Compare analytic and finite-difference gradients of the training loss.
    Gradcheck(GradcheckArgs),
    /// Train and evaluate every graph variant under several seeds.
    Ablate(AblateArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Output directory for catalog.jsonl and logs.jsonl.
    #[arg(long)]
    pub out: PathBuf,
    /// Generator settings as inline JSON; flags below take precedence.
    #[arg(long)]
    pub json: Option<String>,
    #[arg(long)]
    pub pois: Option<usize>,
    #[arg(long)]
    pub queries: Option<usize>,
    #[arg(long)]
    pub languages: Option<usize>,
    #[arg(long)]
    pub synth_seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Split to evaluate: valid or test.
    #[arg(long, default_value = "test")]
    pub split: String,
    /// Also train and score the text-only dual-encoder baseline.
    #[arg(long)]
    pub dual_encoder: bool,
}

#[derive(Debug, Args)]
pub struct CandidateArgs {
    /// Comma-separated candidate POI ids (an empty value means no candidates).
    #[arg(long, conflicts_with = "prefilter")]
    pub candidates: Option<String>,
    /// Use the top N catalog POIs by literal overlap as candidates.
    #[arg(long)]
    pub prefilter: Option<usize>,
}

#[derive(Debug, Args)]
pub struct RankArgs {
    #[arg(long)]
    pub query: String,
    #[arg(long, allow_hyphen_values = true)]
    pub lat: f64,
    #[arg(long, allow_hyphen_values = true)]
    pub lon: f64,
    #[command(flatten)]
    pub candidates: CandidateArgs,
    /// Print JSON instead of a table.
    #[arg(long)]
    pub json: bool,
    /// Include fused feature vectors (JSON output only).
    #[arg(long)]
    pub features: bool,
    /// Show only the first N results.
    #[arg(long)]
    pub top: Option<usize>,
}

#[derive(Debug, Args)]
pub struct ReplArgs {
    #[arg(long)]
    pub prefilter: Option<usize>,
    #[arg(long, default_value_t = 10)]
    pub top: usize,
}

#[derive(Debug, Args)]
pub struct ExportArgs {
    /// Output file; defaults to `<work_dir>/features.jsonl`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, default_value = "test")]
    pub split: String,
    /// Omit feature vectors and keep only probabilities.
    #[arg(long)]
    pub no_vectors: bool,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// Embedding width used for the check.
    #[arg(long, default_value_t = 8)]
    pub dim: usize,
    #[arg(long, default_value_t = 2)]
    pub batch: usize,
    #[arg(long, default_value_t = 1e-4)]
    pub epsilon: f64,
    /// Entries checked per parameter tensor (0 checks all).
    #[arg(long, default_value_t = 0)]
    pub per_param: usize,
    /// Use the built-in synthetic fixture instead of the configured data.
    #[arg(long)]
    pub synthetic: bool,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    /// Comma-separated seeds.
    #[arg(long, default_value = "1,2,3")]
    pub seeds: String,
    /// Comma-separated variants; defaults to all four graph variants.
    #[arg(long)]
    pub variants: Option<String>,
}
