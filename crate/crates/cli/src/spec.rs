//! Command-line arguments, doubling as the serializable experiment spec.
//!
//! Every subcommand's arguments round-trip through JSON, so `tangent run
//! spec.json` replays exactly what a flag invocation did, and reports embed
//! the resolved spec.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use tangent_core::compose::Renormalization;
use tangent_core::model::TunableSubset;
use tangent_core::oracle::Fault;

pub const OUT_DIR_ENV: &str = "TANGENT_OUT_DIR";
pub const DEFAULT_OUT_DIR: &str = "out";

#[derive(Debug, Parser)]
#[command(name = "tangent", version, about = "Linearized transformer fine-tuning, composition, unlearning and DP")]
pub struct Cli {
    #[command(subcommand)]
    pub command: CliCommand,
}

#[derive(Debug, Subcommand)]
pub enum CliCommand {
    /// Execute an experiment spec stored as JSON.
    Run {
        spec: PathBuf,
    },
    #[command(flatten)]
    Experiment(ExperimentSpec),
}

#[derive(Debug, Clone, PartialEq, Subcommand, Serialize, Deserialize)]
#[serde(tag = "command", rename_all = "kebab-case")]
pub enum ExperimentSpec {
    /// Sample a synthetic mixture-of-Gaussians token dataset.
    GenData(GenDataArgs),
    /// Train a nonlinear network from random weights (the shared base).
    Pretrain(PretrainArgs),
    /// Fix the linearization point from pretrained weights.
    Init(InitArgs),
    /// Partition a dataset into disjoint shards.
    Shard(ShardArgs),
    /// Train tangent deltas (or the nonlinear baseline) on a dataset or shard.
    Train(TrainArgs),
    /// Compose shard models into one delta.
    Compose(ComposeArgs),
    /// Remove a shard or forget samples from a composed model.
    Unlearn(UnlearnArgs),
    /// Train with DP-SGD.
    TrainDp(TrainDpArgs),
    /// Report accuracy and loss of a model on a dataset.
    Eval(EvalArgs),
    /// Run the finite-difference and ensemble oracles.
    OracleCheck(OracleArgs),
    /// Solve for the noise multiplier that meets a privacy target.
    DpSigma(DpSigmaArgs),
}

/// The output directory after applying the fallbacks.
pub fn resolve_out(out_dir: &mut Option<PathBuf>) -> PathBuf {
    let dir = out_dir.clone().unwrap_or_else(|| PathBuf::from(DEFAULT_OUT_DIR));
    *out_dir = Some(dir.clone());
    dir
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskArgs {
    #[arg(long, default_value_t = 4)]
    pub n_classes: usize,
    #[arg(long, default_value_t = 8)]
    pub n_features: usize,
    #[arg(long, default_value_t = 8)]
    pub n_tokens: usize,
    #[arg(long, default_value_t = 0.5)]
    pub separation: f64,
    #[arg(long, default_value_t = 1.0)]
    pub noise: f64,
    #[arg(long, default_value_t = 0)]
    pub task_seed: u64,
    /// Derive the class means partly from this source task.
    #[arg(long)]
    #[serde(default)]
    pub source_seed: Option<u64>,
    /// Correlation with the source task's class means.
    #[arg(long, default_value_t = 0.0)]
    #[serde(default)]
    pub similarity: f64,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenDataArgs {
    #[command(flatten)]
    pub task: TaskArgs,
    /// Number of samples.
    #[arg(long)]
    pub n: usize,
    /// Sampling seed (distinct from the task seed).
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Id of the first sample; ids are consecutive.
    #[arg(long, default_value_t = 0)]
    pub first_id: u64,
    /// File stem of the written dataset.
    #[arg(long, default_value = "data")]
    pub name: String,
    /// Output directory; falls back to $TANGENT_OUT_DIR, then `out`.
    #[arg(long, env = OUT_DIR_ENV)]
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// JSON model config; shape defaults follow the dataset.
    #[arg(long)]
    #[serde(default)]
    pub model_config: Option<PathBuf>,
    /// JSON training config.
    #[arg(long)]
    #[serde(default)]
    pub train_config: Option<PathBuf>,
    /// Seed of the random initial weights.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    #[serde(default)]
    pub workers: Option<usize>,
    /// Output directory; falls back to $TANGENT_OUT_DIR, then `out`.
    #[arg(long, env = OUT_DIR_ENV)]
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SubsetArg {
    Full,
    BiasOnly,
    LayernormOnly,
    HeadOnly,
}

impl From<SubsetArg> for TunableSubset {
    fn from(s: SubsetArg) -> Self {
        match s {
            SubsetArg::Full => TunableSubset::Full,
            SubsetArg::BiasOnly => TunableSubset::BiasOnly,
            SubsetArg::LayernormOnly => TunableSubset::LayerNormOnly,
            SubsetArg::HeadOnly => TunableSubset::HeadOnly,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitArgs {
    #[arg(long)]
    pub pretrained: PathBuf,
    /// Number of trailing blocks that are linearized and tuned.
    #[arg(long, default_value_t = 1)]
    pub tunable_blocks: usize,
    /// Re-draw the last block, final norm and head before linearizing.
    #[arg(long)]
    #[serde(default)]
    pub reset_last_block: bool,
    /// Give the tunable tail its own CLS token with a delta.
    #[arg(long)]
    #[serde(default)]
    pub linearize_cls: bool,
    /// Predict with the JVP term alone (required for DP training).
    #[arg(long)]
    #[serde(default)]
    pub jvp_only: bool,
    #[arg(long, value_enum, default_value = "full")]
    pub subset: SubsetArg,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = "base")]
    pub name: String,
    /// Output directory; falls back to $TANGENT_OUT_DIR, then `out`.
    #[arg(long, env = OUT_DIR_ENV)]
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShardArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub n_shards: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output directory; falls back to $TANGENT_OUT_DIR, then `out`.
    #[arg(long, env = OUT_DIR_ENV)]
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainArgs {
    /// Linearization point written by `init`.
    #[arg(long)]
    pub base: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    #[serde(default)]
    pub train_config: Option<PathBuf>,
    /// Shard manifest; with --shard, trains on that shard only.
    #[arg(long, requires = "shard")]
    #[serde(default)]
    pub manifest: Option<PathBuf>,
    #[arg(long, requires = "manifest")]
    #[serde(default)]
    pub shard: Option<String>,
    /// Fine-tune the nonlinear network instead of the tangent model.
    #[arg(long)]
    #[serde(default)]
    pub nonlinear: bool,
    /// Threads for per-example work; results do not depend on it.
    #[arg(long)]
    #[serde(default)]
    pub workers: Option<usize>,
    #[arg(long, default_value = "delta")]
    pub name: String,
    /// Output directory; falls back to $TANGENT_OUT_DIR, then `out`.
    #[arg(long, env = OUT_DIR_ENV)]
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ComposeArgs {
    #[arg(long)]
    pub base: PathBuf,
    /// Shard model files written by `train --shard`.
    #[arg(long, num_args = 1.., required = true)]
    pub shards: Vec<PathBuf>,
    /// Comma-separated weights; uniform when omitted.
    #[arg(long, value_delimiter = ',')]
    #[serde(default)]
    pub lambdas: Option<Vec<f64>>,
    #[arg(long, default_value = "composed")]
    pub name: String,
    /// Output directory; falls back to $TANGENT_OUT_DIR, then `out`.
    #[arg(long, env = OUT_DIR_ENV)]
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RenormArg {
    Uniform,
    Proportional,
}

impl From<RenormArg> for Renormalization {
    fn from(r: RenormArg) -> Self {
        match r {
            RenormArg::Uniform => Renormalization::Uniform,
            RenormArg::Proportional => Renormalization::Proportional,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
#[command(group = clap::ArgGroup::new("method").required(true).args(["subtract", "retrain"]))]
pub struct UnlearnArgs {
    #[arg(long)]
    pub base: PathBuf,
    #[arg(long)]
    pub composed: PathBuf,
    #[arg(long)]
    pub shard_id: String,
    /// Drop the whole shard by weight-space subtraction (no training).
    #[arg(long)]
    #[serde(default)]
    pub subtract: bool,
    /// Retrain the shard without the --forget samples and recompose.
    #[arg(long, requires_all = ["data"])]
    #[serde(default)]
    pub retrain: bool,
    /// Comma-separated sample ids to forget (with --retrain).
    #[arg(long, value_delimiter = ',')]
    #[serde(default)]
    pub forget: Vec<u64>,
    #[arg(long)]
    #[serde(default)]
    pub data: Option<PathBuf>,
    /// Must equal the config the shard was trained with.
    #[arg(long)]
    #[serde(default)]
    pub train_config: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "uniform")]
    pub renormalization: RenormArg,
    #[arg(long)]
    #[serde(default)]
    pub workers: Option<usize>,
    #[arg(long, default_value = "unlearned")]
    pub name: String,
    /// Output directory; falls back to $TANGENT_OUT_DIR, then `out`.
    #[arg(long, env = OUT_DIR_ENV)]
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
}

fn infinite() -> f64 {
    f64::INFINITY
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainDpArgs {
    #[arg(long)]
    pub base: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    #[serde(default)]
    pub train_config: Option<PathBuf>,
    /// Target ε; training stops before exceeding it.
    #[arg(long, default_value_t = f64::INFINITY)]
    #[serde(with = "tangent_core::serde_float", default = "infinite")]
    pub epsilon: f64,
    #[arg(long, default_value_t = 1e-5)]
    pub delta: f64,
    #[arg(long, default_value_t = 1.0)]
    pub clip_norm: f64,
    #[arg(long, default_value_t = 1.0)]
    pub noise_multiplier: f64,
    /// DP fine-tuning of the nonlinear tunable blocks instead.
    #[arg(long)]
    #[serde(default)]
    pub nonlinear: bool,
    #[arg(long)]
    #[serde(default)]
    pub workers: Option<usize>,
    #[arg(long, default_value = "dp")]
    pub name: String,
    /// Output directory; falls back to $TANGENT_OUT_DIR, then `out`.
    #[arg(long, env = OUT_DIR_ENV)]
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
#[command(group = clap::ArgGroup::new("model").args(["delta", "shard", "composed"]))]
pub struct EvalArgs {
    #[arg(long)]
    pub base: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    #[serde(default)]
    pub delta: Option<PathBuf>,
    #[arg(long)]
    #[serde(default)]
    pub shard: Option<PathBuf>,
    #[arg(long)]
    #[serde(default)]
    pub composed: Option<PathBuf>,
    /// Evaluate the nonlinear network `w + Δw` instead of the tangent model.
    #[arg(long)]
    #[serde(default)]
    pub nonlinear: bool,
    /// Training config whose loss is reported.
    #[arg(long)]
    #[serde(default)]
    pub train_config: Option<PathBuf>,
    /// Also write per-sample predictions to `{name}.predictions.json`.
    #[arg(long)]
    #[serde(default)]
    pub predictions: bool,
    #[arg(long, default_value = "eval")]
    pub name: String,
    /// Output directory; falls back to $TANGENT_OUT_DIR, then `out`.
    #[arg(long, env = OUT_DIR_ENV)]
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FaultArg {
    Attention,
}

impl From<FaultArg> for Fault {
    fn from(f: FaultArg) -> Self {
        match f {
            FaultArg::Attention => Fault::Attention,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OracleArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Random cases per check.
    #[arg(long, default_value_t = 100)]
    pub instances: usize,
    /// Print the report as JSON.
    #[arg(long)]
    #[serde(default)]
    pub json: bool,
    /// Test fixture: run with a deliberately broken formula.
    #[arg(long, value_enum, hide = true)]
    #[serde(default)]
    pub inject_fault: Option<FaultArg>,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DpSigmaArgs {
    #[arg(long)]
    pub epsilon: f64,
    #[arg(long, default_value_t = 1e-5)]
    pub delta: f64,
    #[arg(long)]
    pub steps: usize,
    #[arg(long, default_value_t = 1.0)]
    pub sample_rate: f64,
}
