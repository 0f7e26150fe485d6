//! Command-line interface.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use crate::config::{MethodTarget, Overrides, PipelineConfig};
use crate::error::{AppError, AppResult};
use crate::pipeline::{self, parse_set, Ctx};

#[derive(Debug, Parser)]
#[command(name = "cud", version, about = "Circuit-guided unlearning difficulty on a toy transformer")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    #[command(flatten)]
    pub common: Common,
}

/// Options every subcommand accepts. Flags win over the config file, which
/// wins over built-in defaults.
#[derive(Debug, Clone, Args)]
pub struct Common {
    /// JSON configuration file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Master seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Edges kept per circuit.
    #[arg(long, global = true)]
    pub k: Option<usize>,
    /// Interpolation steps of the integrated-gradient attribution.
    #[arg(long = "ig-steps", global = true)]
    pub ig_steps: Option<usize>,
    /// Attribution metric (answer_logprob, answer_logit_diff) or similarity
    /// metric (cosine, jaccard, hamming).
    #[arg(long, global = true)]
    pub metric: Option<String>,
    /// Unlearning method (gradascent, graddiff, npo, simnpo, undial) or
    /// attribution method (exact, eap, eapig).
    #[arg(long, global = true)]
    pub method: Option<String>,
    /// Run directory; defaults to `$CUD_RUNS_DIR/<run_id>`.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Overrides `run_id` from the configuration.
    #[arg(long = "run-id", global = true)]
    pub run_id: Option<String>,
}

#[derive(Debug, Clone, Args)]
pub struct SetArgs {
    /// default, easy or hard.
    #[arg(long)]
    pub set: String,
    /// Seed of the unlearning run; must be one of the validation seeds.
    #[arg(long = "run-seed", default_value_t = 0)]
    pub run_seed: u64,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic corpus.
    GenData,
    /// Train the model.
    Train {
        /// Also train the retain-only oracle.
        #[arg(long)]
        oracle: bool,
    },
    /// Search easy and hard anchor sets; --method picks the unlearning objective.
    FindAnchors,
    /// Circuits of the forget set, or of one sample.
    Circuit {
        #[arg(long)]
        sample: Option<usize>,
    },
    /// Score the forget set against the anchor circuits.
    CudScore,
    /// Pick the easy, hard and random default sets.
    SelectSets,
    /// Unlearn one selected set.
    Unlearn(SetArgs),
    /// Evaluate an unlearned model.
    Evaluate(SetArgs),
    /// Edge frequencies, depth, robustness and MRD-proxy comparison.
    Analyze,
    /// Unlearning comparison across methods, sets and seeds.
    Validate,
    /// Every stage in order.
    Pipeline,
}

/// Resolved configuration for `command` from `common`.
pub fn resolve(common: &Common, target: MethodTarget) -> AppResult<PipelineConfig> {
    let mut cfg = PipelineConfig::load(common.config.as_deref())?;
    if let Some(id) = &common.run_id {
        cfg.run_id = id.clone();
    }
    let o = Overrides {
        seed: common.seed,
        k: common.k,
        ig_steps: common.ig_steps,
        metric: common.metric.clone(),
        method: common.method.clone(),
    };
    cfg.resolve(&o, target)
}

fn set_mode(s: &str) -> AppResult<cud_core::cud::SelectionMode> {
    parse_set(s).ok_or_else(|| AppError::Config(format!("unknown set `{s}`; use default, easy or hard")))
}

pub fn run(cli: Cli) -> AppResult<()> {
    run_with(cli.command, &cli.common)
}

pub fn run_with(command: Command, common: &Common) -> AppResult<()> {
    let target = match command {
        Command::Unlearn(_) | Command::Evaluate(_) => MethodTarget::Unlearn,
        Command::Validate | Command::Pipeline => MethodTarget::Validate,
        _ => MethodTarget::Anchors,
    };
    let cfg = resolve(common, target)?;
    let mut ctx = Ctx::open(cfg, common.out.as_deref())?;
    let anchor_method = ctx.cfg.anchors.inner.method;
    match command {
        Command::GenData => pipeline::gen_data(&mut ctx),
        Command::Train { oracle } => pipeline::train_stage(&mut ctx, oracle),
        Command::FindAnchors => pipeline::find_anchors_stage(&mut ctx, anchor_method),
        Command::Circuit { sample: None } => pipeline::circuit_stage(&mut ctx),
        Command::Circuit { sample: Some(id) } => pipeline::circuit_sample_stage(&mut ctx, id),
        Command::CudScore => pipeline::cud_score_stage(&mut ctx, anchor_method),
        Command::SelectSets => pipeline::select_sets_stage(&mut ctx),
        Command::Unlearn(a) => pipeline::unlearn_stage(&mut ctx, set_mode(&a.set)?, a.run_seed),
        Command::Evaluate(a) => pipeline::evaluate_stage(&mut ctx, set_mode(&a.set)?, a.run_seed),
        Command::Analyze => pipeline::analyze_stage(&mut ctx),
        Command::Validate => pipeline::validate_stage(&mut ctx),
        Command::Pipeline => pipeline::run_all(&mut ctx),
    }
}
