//! Bi-level search for easy and hard anchor samples and their circuits.
//!
//! The mask `w ∈ [0,1]^n` over the forget set is optimized in rounds. Each
//! round restarts from the trained model, runs a few unlearning steps with
//! the forget terms weighted by `w`, and measures every forget sample's loss
//! under the result. The outer step then treats those losses as constants
//! (first-order truncation). Losses are replaced by their centred ranks
//! `z_i ∈ [-1, 1]` before the step, which keeps a single runaway loss from
//! flattening every other sample, and the `λ‖w‖²` penalty shrinks `w` in
//! both directions through a proximal step. At a fixed point
//! `w_i = ±z_i / 2λ`, so a sample stays selected (`w_i ≥ τ`) while its rank
//! score is at least `2λτ` from the middle, on the high side for easy and
//! the low side for hard.

use alloc::collections::BTreeSet;
use alloc::format;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::circuits::{binarize, scores_for_sample, Circuit, CircuitConfig, EdgeScores};
use crate::data::{Dataset, Sample};
use crate::error::{Error, Result};
use crate::model::{forward, Model};
use crate::stats::ranks;
use crate::unlearn::{loss::answer_ce, unlearn_steps, Method, UnlearnConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    /// Samples whose loss rises most under unlearning.
    Easy,
    /// Samples whose loss stays lowest under unlearning.
    Hard,
}

impl Direction {
    pub fn as_str(self) -> &'static str {
        match self {
            Direction::Easy => "easy",
            Direction::Hard => "hard",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AnchorConfig {
    /// Unlearning steps per round (K).
    pub inner_steps: usize,
    /// Mask update rounds (T).
    pub outer_steps: usize,
    pub lambda: f64,
    pub lr_outer: f64,
    /// Hardening threshold.
    pub tau: f64,
    /// Initial mask value.
    pub w_init: f64,
    pub seeds: Vec<u64>,
    /// Inner unlearning objective; its `seed` is replaced per run.
    pub inner: UnlearnConfig,
}

impl Default for AnchorConfig {
    fn default() -> Self {
        AnchorConfig {
            inner_steps: 10,
            outer_steps: 15,
            lambda: 0.5,
            lr_outer: 0.5,
            tau: 0.5,
            w_init: 1.0,
            seeds: (0..5).collect(),
            inner: UnlearnConfig {
                method: Method::GradDiff,
                lr: 0.02,
                batch_size: 8,
                ..UnlearnConfig::default()
            },
        }
    }
}

impl AnchorConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) {
            return Err(Error::Config("lambda must be non-negative".into()));
        }
        if !(self.tau > 0.0 && self.tau <= 1.0) || !(0.0..=1.0).contains(&self.w_init) {
            return Err(Error::Config("tau must lie in (0, 1] and w_init in [0, 1]".into()));
        }
        if self.outer_steps == 0 || !(self.lr_outer > 0.0) {
            return Err(Error::Config("outer loop needs at least one step and a positive rate".into()));
        }
        self.inner.validate()
    }
}

/// Relaxed mask after the last round, with the losses that drove it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BilevelTrace {
    pub weights: Vec<f64>,
    /// Per-sample answer CE under the last inner solution.
    pub losses: Vec<f64>,
    pub selected: Vec<usize>,
}

fn per_sample_losses(model: &Model, samples: &[Sample]) -> Result<Vec<f64>> {
    samples
        .iter()
        .map(|s| Ok(answer_ce(&forward(model, &s.input_tokens())?.logits, s).0))
        .collect()
}

/// Average ranks mapped onto `[-1, 1]`; `None` when every value ties.
fn rank_scores(xs: &[f64]) -> Option<Vec<f64>> {
    let lo = xs.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(hi - lo > 1e-12 * (1.0 + libm::fabs(hi))) {
        return None;
    }
    let half = (xs.len() - 1) as f64 / 2.0;
    Some(ranks(xs).iter().map(|r| (r - 1.0 - half) / half).collect())
}

/// Runs the bi-level loop and returns the relaxed mask and hardened set
/// (indices into `forget`).
pub fn bilevel_trace(
    model: &Model,
    forget: &[Sample],
    retain: &[Sample],
    direction: Direction,
    cfg: &AnchorConfig,
    seed: u64,
) -> Result<BilevelTrace> {
    cfg.validate()?;
    if forget.len() < 2 {
        return Err(Error::Input("anchor search needs at least two forget samples".into()));
    }
    let inner = UnlearnConfig {
        seed,
        ..cfg.inner.clone()
    };
    let sign = match direction {
        Direction::Easy => 1.0,
        Direction::Hard => -1.0,
    };
    let mut w = alloc::vec![cfg.w_init; forget.len()];
    let mut losses = Vec::new();
    for _ in 0..cfg.outer_steps {
        let unlearned = unlearn_steps(model, forget, &w, retain, &inner, cfg.inner_steps)?;
        losses = per_sample_losses(&unlearned, forget)?;
        let z = rank_scores(&losses).ok_or_else(|| {
            Error::DegenerateSelection("every forget sample has the same post-unlearning loss".into())
        })?;
        // Gradient step on the loss term, proximal step on the penalty.
        let shrink = 1.0 + 2.0 * cfg.lambda * cfg.lr_outer;
        for (wi, zi) in w.iter_mut().zip(&z) {
            *wi = ((*wi + cfg.lr_outer * sign * zi) / shrink).clamp(0.0, 1.0);
        }
    }
    let selected: Vec<usize> = (0..w.len()).filter(|&i| w[i] >= cfg.tau).collect();
    Ok(BilevelTrace {
        weights: w,
        losses,
        selected,
    })
}

/// Sample ids selected by one seeded bi-level run.
pub fn bilevel_select(
    model: &Model,
    forget: &[Sample],
    retain: &[Sample],
    direction: Direction,
    cfg: &AnchorConfig,
    seed: u64,
) -> Result<BTreeSet<usize>> {
    let trace = bilevel_trace(model, forget, retain, direction, cfg, seed)?;
    if trace.selected.is_empty() {
        return Err(Error::DegenerateSelection(format!(
            "no {} sample kept weight ≥ τ; lower λ or τ",
            direction.as_str()
        )));
    }
    if trace.selected.len() == forget.len() {
        return Err(Error::DegenerateSelection(format!(
            "every sample selected as {}; the mask did not separate",
            direction.as_str()
        )));
    }
    Ok(trace.selected.iter().map(|&i| forget[i].id).collect())
}

/// Intersects the per-seed sets of each direction and drops ids claimed by
/// both.
pub fn stabilize(easy_runs: &[BTreeSet<usize>], hard_runs: &[BTreeSet<usize>]) -> Result<(BTreeSet<usize>, BTreeSet<usize>)> {
    fn intersect(runs: &[BTreeSet<usize>], what: &str) -> Result<BTreeSet<usize>> {
        if runs.len() < 2 {
            return Err(Error::Input(format!("need at least two {what} runs")));
        }
        Ok(runs[1..]
            .iter()
            .fold(runs[0].clone(), |acc, r| acc.intersection(r).copied().collect()))
    }
    let easy = intersect(easy_runs, "easy")?;
    let hard = intersect(hard_runs, "hard")?;
    let both: BTreeSet<usize> = easy.intersection(&hard).copied().collect();
    let easy: BTreeSet<usize> = easy.difference(&both).copied().collect();
    let hard: BTreeSet<usize> = hard.difference(&both).copied().collect();
    for (set, what) in [(&easy, "easy"), (&hard, "hard")] {
        if set.is_empty() {
            return Err(Error::Stabilization(format!(
                "no {what} sample survives every seed; lower tau or lambda"
            )));
        }
    }
    Ok((easy, hard))
}

/// Edge-wise mean of the member samples' scores.
pub fn anchor_scores(model: &Model, ids: &BTreeSet<usize>, dataset: &Dataset, cfg: &CircuitConfig) -> Result<EdgeScores> {
    if ids.is_empty() {
        return Err(Error::Input("anchor set is empty".into()));
    }
    let scores = ids
        .iter()
        .map(|&id| {
            let s = dataset.get(id).ok_or_else(|| Error::Input(format!("unknown sample id {id}")))?;
            scores_for_sample(model, s, dataset, cfg)
        })
        .collect::<Result<Vec<_>>>()?;
    EdgeScores::mean(&scores)
}

/// Mean-then-binarize circuit of an anchor set.
pub fn anchor_circuit(model: &Model, ids: &BTreeSet<usize>, dataset: &Dataset, cfg: &CircuitConfig) -> Result<Circuit> {
    let scores = anchor_scores(model, ids, dataset, cfg)?;
    binarize(&scores, cfg.resolve_k(scores.scores.len())?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnchorResult {
    pub easy_ids: BTreeSet<usize>,
    pub hard_ids: BTreeSet<usize>,
    pub easy_runs: Vec<BTreeSet<usize>>,
    pub hard_runs: Vec<BTreeSet<usize>>,
    pub easy_circuit: Circuit,
    pub hard_circuit: Circuit,
    pub config: AnchorConfig,
}

/// Seeded easy/hard runs, stabilization and anchor circuits.
pub fn find_anchors(
    model: &Model,
    dataset: &Dataset,
    forget: &[Sample],
    retain: &[Sample],
    cfg: &AnchorConfig,
    circuit_cfg: &CircuitConfig,
) -> Result<AnchorResult> {
    let mut easy_runs = Vec::with_capacity(cfg.seeds.len());
    let mut hard_runs = Vec::with_capacity(cfg.seeds.len());
    for &seed in &cfg.seeds {
        easy_runs.push(bilevel_select(model, forget, retain, Direction::Easy, cfg, seed)?);
        hard_runs.push(bilevel_select(model, forget, retain, Direction::Hard, cfg, seed)?);
    }
    let (easy_ids, hard_ids) = stabilize(&easy_runs, &hard_runs)?;
    Ok(AnchorResult {
        easy_circuit: anchor_circuit(model, &easy_ids, dataset, circuit_cfg)?,
        hard_circuit: anchor_circuit(model, &hard_ids, dataset, circuit_cfg)?,
        easy_ids,
        hard_ids,
        easy_runs,
        hard_runs,
        config: cfg.clone(),
    })
}
