//! Command-line surface.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "confkv", version, about = "Confidence-gated KV-cache simulation runs")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run one policy and write its per-step trace and summary.
    Decode(DecodeArgs),
    /// Run several policies on identical inputs and tabulate them.
    Compare(CompareArgs),
    /// Measure next-token KL shift when recent context is removed.
    Ablate(AblateArgs),
    /// Repeat a decode run over values of one parameter.
    Sweep(SweepArgs),
    /// Write a synthetic needle trace as JSONL.
    GenTrace(GenTraceArgs),
}

#[derive(Debug, Clone, Args)]
pub struct CommonArgs {
    /// JSON policy config; absent keys take the profile defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,

    /// Default set: wikitext, niah or vwa.
    #[arg(long, default_value = "wikitext")]
    pub profile: String,

    /// Override one config key, `key=value` with a JSON value (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,

    /// Seed override (takes precedence over CONFKV_SEED and the config).
    #[arg(long)]
    pub seed: Option<u64>,

    /// `model`, `synthetic`, or `trace:<path>`.
    #[arg(long, default_value = "model")]
    pub driver: String,

    /// Prefill length for the model and synthetic drivers.
    #[arg(long, default_value_t = 256)]
    pub prefill: usize,

    #[arg(long, default_value_t = 4)]
    pub layers: usize,

    #[arg(long, default_value_t = 4)]
    pub heads: usize,

    #[arg(long, default_value_t = 16)]
    pub head_dim: usize,

    #[arg(long, default_value_t = 64)]
    pub vocab: usize,

    /// Synthetic confidence profile: `query-dip[:p]`, `alternating:<k>`,
    /// `always-high`, `always-low`.
    #[arg(long, default_value = "query-dip:0.75")]
    pub synthetic_profile: String,

    /// Synthetic needle age (in tokens) at the final step; 0 disables the needle.
    #[arg(long, default_value_t = 100)]
    pub needle_age: usize,
}

#[derive(Debug, Args)]
pub struct DecodeArgs {
    #[command(flatten)]
    pub common: CommonArgs,

    /// confkv, confkv-int8, confkv-l, full, sliding, heavy-hitter.
    #[arg(long, default_value = "confkv")]
    pub policy: String,

    #[arg(long, default_value_t = 500)]
    pub steps: usize,

    /// Window for `sliding` (default 512) or cap for `heavy-hitter` (default n_low).
    #[arg(long)]
    pub window: Option<usize>,

    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct CompareArgs {
    #[command(flatten)]
    pub common: CommonArgs,

    /// Comma-separated policies; also accepts matched-random,
    /// matched-recency and matched-attention.
    #[arg(long, value_delimiter = ',', default_value = "confkv,full,sliding,heavy-hitter,matched-random")]
    pub policies: Vec<String>,

    #[arg(long, default_value_t = 500)]
    pub steps: usize,

    /// Sliding window / heavy-hitter cap. Defaults to the confkv run's mean
    /// cache length, so the comparison is at equal mean token budget.
    #[arg(long)]
    pub window: Option<usize>,

    /// Independent runs (each with its own derived seed); metrics are averaged.
    #[arg(long, default_value_t = 1)]
    pub runs: usize,

    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[command(flatten)]
    pub common: CommonArgs,

    /// Policy driving the live run.
    #[arg(long, default_value = "full")]
    pub policy: String,

    #[arg(long, default_value_t = 1500)]
    pub steps: usize,

    #[arg(long, default_value_t = 256)]
    pub ablate_r: usize,

    #[arg(long, default_value_t = 1200)]
    pub samples: usize,

    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub common: CommonArgs,

    /// tau, n_high, w or alpha.
    #[arg(long)]
    pub param: String,

    /// Comma-separated values; `w` also accepts `inf`.
    #[arg(long, value_delimiter = ',', required = true)]
    pub values: Vec<String>,

    #[arg(long, default_value = "confkv-int8")]
    pub policy: String,

    #[arg(long, default_value_t = 500)]
    pub steps: usize,

    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct GenTraceArgs {
    #[command(flatten)]
    pub common: CommonArgs,

    #[arg(long, default_value_t = 500)]
    pub steps: usize,

    /// Output JSONL file.
    #[arg(long)]
    pub out: PathBuf,
}
