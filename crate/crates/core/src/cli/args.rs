//! Command-line and config-file arguments.
//!
//! Every subcommand's arguments are all optional at parse time. A TOML
//! config document supplies values for any key the command line leaves
//! out; defaults are applied after merging.

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use kvw::coeffs::CoefficientMode;
use kvw::{KvwError, Result};

#[derive(Debug, Parser)]
#[command(name = "kvw", version, about = "Forward-only unlearning by knowledge vector weakening")]
pub struct Cli {
    /// Seed for every random choice; recorded in each output artifact.
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// TOML document with defaults for the chosen subcommand's flags.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build a planted-fact suite (model, datasets, manifest).
    BuildSynth(BuildSynthArgs),
    /// Extract retain coefficients once and cache them.
    PrecomputeRetain(PrecomputeArgs),
    /// Apply knowledge vector weakening to a model.
    Unlearn(UnlearnArgs),
    /// Forget and retain recall of a model on a suite.
    Eval(EvalArgs),
    /// γ, layer-range, ablation or two-fold protocol sweep.
    Sweep(SweepArgs),
    /// Aggregate a finished sweep directory.
    Report(ReportArgs),
    /// Analytic FLOP and memory accounting.
    Cost(CostArgs),
}

fn is_false(b: &bool) -> bool {
    !*b
}

/// Comma-separated numbers on the command line, a string or an array in
/// config files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum FloatList {
    Text(String),
    Values(Vec<f64>),
}

impl FloatList {
    pub fn values(&self) -> Result<Vec<f64>> {
        match self {
            FloatList::Values(v) => Ok(v.clone()),
            FloatList::Text(s) => s
                .split(',')
                .map(|t| {
                    t.trim()
                        .parse::<f64>()
                        .map_err(|e| KvwError::Input(format!("bad number {t:?} in list: {e}")))
                })
                .collect(),
        }
    }
}

impl FromStr for FloatList {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Ok(FloatList::Text(s.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "snake_case")]
#[value(rename_all = "snake_case")]
pub enum ModeArg {
    Magnitude,
    ClampedMean,
}

impl From<ModeArg> for CoefficientMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Magnitude => CoefficientMode::Magnitude,
            ModeArg::ClampedMean => CoefficientMode::ClampedMean,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "snake_case")]
#[value(rename_all = "snake_case")]
pub enum SweepKind {
    Gamma,
    Layers,
    Ablation,
    Protocol,
}

impl fmt::Display for SweepKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SweepKind::Gamma => "gamma",
            SweepKind::Layers => "layers",
            SweepKind::Ablation => "ablation",
            SweepKind::Protocol => "protocol",
        })
    }
}

/// Model shape flags shared by `build-synth` and `cost`.
#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
pub struct ShapeArgs {
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub layers: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub d_model: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ffn_dim: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub heads: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub vocab_size: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_seq_len: Option<usize>,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
pub struct BuildSynthArgs {
    /// Output directory for the suite.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n_forget: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n_retain: Option<usize>,
    /// Facts placed in both datasets.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n_shared: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub planted_layer: Option<usize>,
    #[command(flatten)]
    #[serde(flatten)]
    pub shape: ShapeArgs,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
pub struct PrecomputeArgs {
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub model: Option<PathBuf>,
    /// Retain dataset (JSONL).
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub retain: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    /// Pool over every position instead of answer positions only.
    #[arg(long)]
    #[serde(default, skip_serializing_if = "is_false")]
    pub all_positions: bool,
    #[arg(long, value_enum)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mode: Option<ModeArg>,
}

/// Editing flags shared by `unlearn` and `sweep`.
#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
pub struct EditArgs {
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gamma: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub start_layer: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub end_layer: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eps: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub batch_size: Option<usize>,
    /// Pool over every position instead of answer positions only.
    #[arg(long)]
    #[serde(default, skip_serializing_if = "is_false")]
    pub all_positions: bool,
    /// Compare against the forget layer mean instead of retain coefficients.
    #[arg(long)]
    #[serde(default, skip_serializing_if = "is_false")]
    pub no_retain: bool,
    #[arg(long, value_enum)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mode: Option<ModeArg>,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
pub struct UnlearnArgs {
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub model: Option<PathBuf>,
    /// Forget dataset (JSONL).
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub forget: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub retain_cache: Option<PathBuf>,
    /// Output model; the run report is written next to it.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    #[serde(flatten)]
    pub edit: EditArgs,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
pub struct EvalArgs {
    /// Suite directory or manifest.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub suite: Option<PathBuf>,
    /// Model to score instead of the suite's own.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub model: Option<PathBuf>,
    #[arg(long, env = "KVW_REPORT_DIR")]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub report_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
pub struct SweepArgs {
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub suite: Option<PathBuf>,
    #[arg(long, value_enum)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub kind: Option<SweepKind>,
    /// Comma-separated γ values, ascending.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gamma_list: Option<FloatList>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub floor: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub buckets: Option<usize>,
    #[arg(long, env = "KVW_REPORT_DIR")]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub report_dir: Option<PathBuf>,
    #[command(flatten)]
    #[serde(flatten)]
    pub edit: EditArgs,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
pub struct ReportArgs {
    /// Directory holding sweep reports.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dir: Option<PathBuf>,
    /// Where to write the summary; defaults to the sweep directory.
    #[arg(long, env = "KVW_REPORT_DIR")]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub report_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
pub struct CostArgs {
    /// Take the shape from a model file instead of the shape flags.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub model: Option<PathBuf>,
    /// Comma-separated method tags, e.g. `kvw,gd_lora:8,gd,mmu`.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub methods: Option<String>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seq_len: Option<u64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub forget_size: Option<u64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub retain_size: Option<u64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub batch_size: Option<u64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub epochs: Option<u64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gated: Option<bool>,
    #[arg(long, env = "KVW_REPORT_DIR")]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub report_dir: Option<PathBuf>,
    #[command(flatten)]
    #[serde(flatten)]
    pub shape: ShapeArgs,
}

/// Config-file keys that are not subcommand flags.
pub const RESERVED_KEYS: [&str; 2] = ["seed", "protocol"];

/// Overlays the command-line values on the config document's keys.
pub fn merge<T: Args + Serialize + DeserializeOwned>(cli: &T, file: Option<&toml::Table>) -> Result<T> {
    let known: Vec<String> = T::augment_args(clap::Command::new("keys"))
        .get_arguments()
        .map(|a| a.get_id().to_string())
        .collect();
    let mut table = toml::Table::new();
    if let Some(file) = file {
        for (k, v) in file {
            if RESERVED_KEYS.contains(&k.as_str()) {
                continue;
            }
            if !known.contains(k) {
                return Err(KvwError::Config(format!("config file: unknown key {k:?}")));
            }
            table.insert(k.clone(), v.clone());
        }
    }
    let overlay = toml::Table::try_from(cli).map_err(|e| KvwError::Config(format!("arguments: {e}")))?;
    table.extend(overlay);
    toml::Value::Table(table)
        .try_into()
        .map_err(|e| KvwError::Config(format!("config file: {e}")))
}
