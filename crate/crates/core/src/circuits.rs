//! Edge attribution: exact patching, EAP, EAP-IG, top-k circuits and
//! faithfulness.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::data::{make_patch, Dataset, PatchPair, PatchStrategy, Sample};
use crate::error::{Error, Result};
use crate::kernel::{log_softmax_row, softmax_rows, Tensor};
use crate::model::{
    backward, forward, forward_with, ActivationCache, ComputationGraph, Edge, Intervention, Model, RunSpec,
};
use crate::rng::Rng;

/// Scalar readout of a run, differentiable in the logits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    /// Summed log-probability of the answer tokens.
    AnswerLogProb,
    /// Summed margin of each answer logit over the mean logit at its position.
    AnswerLogitDiff,
}

impl Metric {
    pub fn as_str(self) -> &'static str {
        match self {
            Metric::AnswerLogProb => "answer_logprob",
            Metric::AnswerLogitDiff => "answer_logit_diff",
        }
    }

    pub fn parse(s: &str) -> Option<Metric> {
        [Metric::AnswerLogProb, Metric::AnswerLogitDiff].into_iter().find(|m| m.as_str() == s)
    }

    pub fn value(self, logits: &Tensor, sample: &Sample) -> Result<f64> {
        Ok(self.value_and_grad(logits, sample)?.0)
    }

    /// Metric value and its gradient with respect to the logits.
    pub fn value_and_grad(self, logits: &Tensor, sample: &Sample) -> Result<(f64, Tensor)> {
        let v = logits.cols();
        let mut grad = Tensor::zeros(logits.shape());
        let mut total = 0.0;
        for (pos, tok) in sample.answer_targets() {
            let row = logits.row(pos);
            let g = grad.row_mut(pos);
            match self {
                Metric::AnswerLogProb => {
                    let lp = log_softmax_row(row);
                    total += lp[tok];
                    for (gi, l) in g.iter_mut().zip(&lp) {
                        *gi -= libm::exp(*l);
                    }
                    g[tok] += 1.0;
                }
                Metric::AnswerLogitDiff => {
                    let mean = row.iter().sum::<f64>() / v as f64;
                    total += row[tok] - mean;
                    for gi in g.iter_mut() {
                        *gi -= 1.0 / v as f64;
                    }
                    g[tok] += 1.0;
                }
            }
        }
        if !total.is_finite() {
            return Err(Error::NonFinite("metric"));
        }
        Ok((total, grad))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttributionMethod {
    Exact,
    Eap,
    EapIg,
}

impl AttributionMethod {
    pub fn as_str(self) -> &'static str {
        match self {
            AttributionMethod::Exact => "exact",
            AttributionMethod::Eap => "eap",
            AttributionMethod::EapIg => "eapig",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [Self::Exact, Self::Eap, Self::EapIg].into_iter().find(|m| m.as_str() == s)
    }
}

/// Where a score vector came from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub method: AttributionMethod,
    pub ig_steps: usize,
    pub strategy: PatchStrategy,
    pub metric: Metric,
    /// `None` for aggregates over several samples.
    pub sample_id: Option<usize>,
}

/// Identifies the graph a score or circuit vector is aligned with.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct GraphRef {
    pub n_layers: usize,
    pub n_heads: usize,
    pub fingerprint: u64,
}

impl GraphRef {
    pub fn of(graph: &ComputationGraph) -> Self {
        GraphRef {
            n_layers: graph.n_layers(),
            n_heads: graph.n_heads(),
            fingerprint: graph.fingerprint(),
        }
    }

    pub fn graph(&self) -> ComputationGraph {
        ComputationGraph::with_shape(self.n_layers, self.n_heads)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EdgeScores {
    pub graph: GraphRef,
    /// One score per edge, in graph edge order.
    pub scores: Vec<f64>,
    pub provenance: Provenance,
}

impl EdgeScores {
    pub fn new(graph: &ComputationGraph, scores: Vec<f64>, provenance: Provenance) -> Result<Self> {
        if scores.len() != graph.edge_count() {
            return Err(Error::Input(format!(
                "{} scores for {} edges",
                scores.len(),
                graph.edge_count()
            )));
        }
        if scores.iter().any(|s| !s.is_finite()) {
            return Err(Error::NonFinite("edge scores"));
        }
        Ok(EdgeScores {
            graph: GraphRef::of(graph),
            scores,
            provenance,
        })
    }

    /// Edge-wise mean of several score vectors over one graph.
    pub fn mean(items: &[EdgeScores]) -> Result<EdgeScores> {
        let first = items.first().ok_or_else(|| Error::Input("no scores to average".into()))?;
        let mut acc = vec![0.0; first.scores.len()];
        for it in items {
            if it.graph != first.graph {
                return Err(Error::Input("scores come from different graphs".into()));
            }
            for (a, s) in acc.iter_mut().zip(&it.scores) {
                *a += s;
            }
        }
        let n = items.len() as f64;
        for a in &mut acc {
            *a /= n;
        }
        let mut provenance = first.provenance.clone();
        if items.len() > 1 {
            provenance.sample_id = None;
        }
        Ok(EdgeScores {
            graph: first.graph,
            scores: acc,
            provenance,
        })
    }
}

/// A set of edges, one bit per graph edge.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Circuit {
    pub graph: GraphRef,
    pub bits: Vec<bool>,
    pub k: usize,
    pub provenance: Provenance,
}

impl Circuit {
    pub fn from_bits(graph: GraphRef, bits: Vec<bool>, provenance: Provenance) -> Self {
        let k = bits.iter().filter(|b| **b).count();
        Circuit {
            graph,
            bits,
            k,
            provenance,
        }
    }

    pub fn edges(&self) -> Vec<usize> {
        self.bits.iter().enumerate().filter(|(_, b)| **b).map(|(i, _)| i).collect()
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    /// FNV-1a hash of the graph fingerprint and the bit pattern.
    pub fn fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let bytes = self.graph.fingerprint.to_le_bytes();
        for b in bytes.into_iter().chain(self.bits.iter().map(|&x| x as u8)) {
            h ^= b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
        h
    }

    pub fn is_empty(&self) -> bool {
        self.k == 0
    }
}

/// Keeps the `k` edges of largest `|score|`, lower index first on ties.
pub fn binarize(scores: &EdgeScores, k: usize) -> Result<Circuit> {
    let n = scores.scores.len();
    if k == 0 || k > n {
        return Err(Error::Config(format!("k = {k} outside 1..={n}")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        libm::fabs(scores.scores[b])
            .total_cmp(&libm::fabs(scores.scores[a]))
            .then(a.cmp(&b))
    });
    let mut bits = vec![false; n];
    for &e in &order[..k] {
        bits[e] = true;
    }
    Ok(Circuit {
        graph: scores.graph,
        bits,
        k,
        provenance: scores.provenance.clone(),
    })
}

/// Clean run, patched-source outputs and the metric on the clean run.
struct PairRuns {
    graph: ComputationGraph,
    clean: ActivationCache,
    /// Patched minus clean output, per source.
    deltas: Vec<Tensor>,
    /// Input-node output of the patch run (zeros under zero ablation).
    patch_embedding: Tensor,
    clean_metric: f64,
}

fn pair_runs(model: &Model, pair: &PatchPair, metric: Metric) -> Result<PairRuns> {
    let graph = model.graph();
    let clean = forward(model, &pair.clean.input_tokens())?;
    let clean_metric = metric.value(&clean.logits, &pair.clean)?;
    let (deltas, patch_embedding) = match pair.patch_input() {
        Some(tokens) => {
            if tokens.len() != clean.tokens.len() {
                return Err(Error::Pairing("patch and clean inputs differ in length".into()));
            }
            let patched = forward(model, &tokens)?;
            let deltas = patched
                .source_outputs
                .iter()
                .zip(&clean.source_outputs)
                .map(|(p, c)| p.sub(c))
                .collect();
            (deltas, patched.source_outputs[0].clone())
        }
        None => {
            let deltas = clean
                .source_outputs
                .iter()
                .map(|c| {
                    let mut d = c.clone();
                    d.scale(-1.0);
                    d
                })
                .collect();
            (deltas, Tensor::zeros(clean.source_outputs[0].shape()))
        }
    };
    Ok(PairRuns {
        graph,
        clean,
        deltas,
        patch_embedding,
        clean_metric,
    })
}

fn provenance(method: AttributionMethod, ig_steps: usize, pair: &PatchPair, metric: Metric) -> Provenance {
    Provenance {
        method,
        ig_steps,
        strategy: pair.strategy,
        metric,
        sample_id: Some(pair.clean.id),
    }
}

fn exact_effect(model: &Model, runs: &PairRuns, pair: &PatchPair, edge: usize, metric: Metric) -> Result<f64> {
    let Edge { source, sink } = runs.graph.edges()[edge];
    let deltas = [(sink, runs.deltas[source].clone())];
    let spec = RunSpec {
        input_embedding: None,
        intervention: Intervention::SinkDeltas(&deltas),
    };
    let patched = forward_with(model, &pair.clean.input_tokens(), &spec)?;
    let m = metric.value(&patched.logits, &pair.clean)?;
    Ok(m - runs.clean_metric)
}

/// Metric change when only `edge`'s source contribution into its sink is
/// replaced by the patched-run value (zeros under zero ablation).
pub fn exact_edge_effect(model: &Model, pair: &PatchPair, edge: usize, metric: Metric) -> Result<f64> {
    let runs = pair_runs(model, pair, metric)?;
    if edge >= runs.graph.edge_count() {
        return Err(Error::Input(format!("edge {edge} out of range")));
    }
    exact_effect(model, &runs, pair, edge, metric)
}

/// Exact patching effect of every edge (one forward per edge).
pub fn exact_scores(model: &Model, pair: &PatchPair, metric: Metric) -> Result<EdgeScores> {
    let runs = pair_runs(model, pair, metric)?;
    let scores = (0..runs.graph.edge_count())
        .map(|e| exact_effect(model, &runs, pair, e, metric))
        .collect::<Result<Vec<_>>>()?;
    EdgeScores::new(&runs.graph, scores, provenance(AttributionMethod::Exact, 0, pair, metric))
}

fn scores_from_grads(runs: &PairRuns, sink_grads: &[Tensor]) -> Vec<f64> {
    runs.graph
        .edges()
        .iter()
        .map(|e| runs.deltas[e.source].dot(&sink_grads[e.sink]))
        .collect()
}

/// First-order edge attribution: `Δa_u · ∂m/∂a_v` at the clean input.
pub fn eap_scores(model: &Model, pair: &PatchPair, metric: Metric) -> Result<EdgeScores> {
    let runs = pair_runs(model, pair, metric)?;
    let (_, dlogits) = metric.value_and_grad(&runs.clean.logits, &pair.clean)?;
    let grads = backward(model, &runs.clean, &dlogits, None)?;
    let scores = scores_from_grads(&runs, &grads.sinks);
    EdgeScores::new(&runs.graph, scores, provenance(AttributionMethod::Eap, 0, pair, metric))
}

/// Interpolation points for the integrated gradient.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IgPoints {
    /// `α = (i + 0.5) / steps`.
    Midpoint,
    /// Every point at `α = 0`; with one step this is plain EAP.
    Origin,
}

pub fn eapig_scores(model: &Model, pair: &PatchPair, metric: Metric, steps: usize) -> Result<EdgeScores> {
    eapig_scores_with(model, pair, metric, steps, IgPoints::Midpoint)
}

/// EAP-IG: `Δa_u` times the sink gradient averaged along the embedding-space
/// path from the clean input to the patch input.
pub fn eapig_scores_with(
    model: &Model,
    pair: &PatchPair,
    metric: Metric,
    steps: usize,
    points: IgPoints,
) -> Result<EdgeScores> {
    if steps == 0 {
        return Err(Error::Config("ig_steps must be at least 1".into()));
    }
    let runs = pair_runs(model, pair, metric)?;
    let clean_emb = &runs.clean.source_outputs[0];
    let direction = runs.patch_embedding.sub(clean_emb);
    let tokens = pair.clean.input_tokens();
    let mut mean: Option<Vec<Tensor>> = None;
    for i in 0..steps {
        let alpha = match points {
            IgPoints::Midpoint => (i as f64 + 0.5) / steps as f64,
            IgPoints::Origin => 0.0,
        };
        let mut emb = clean_emb.clone();
        for (e, d) in emb.data_mut().iter_mut().zip(direction.data()) {
            *e += alpha * d;
        }
        let spec = RunSpec {
            input_embedding: Some(&emb),
            intervention: Intervention::None,
        };
        let cache = forward_with(model, &tokens, &spec)?;
        let (_, dlogits) = metric.value_and_grad(&cache.logits, &pair.clean)?;
        let g = backward(model, &cache, &dlogits, None)?;
        match mean.as_mut() {
            None => mean = Some(g.sinks),
            Some(acc) => {
                for (a, s) in acc.iter_mut().zip(&g.sinks) {
                    a.add_assign(s);
                }
            }
        }
    }
    let mut mean = mean.expect("at least one step");
    if steps > 1 {
        for m in &mut mean {
            m.scale(1.0 / steps as f64);
        }
    }
    let scores = scores_from_grads(&runs, &mean);
    EdgeScores::new(&runs.graph, scores, provenance(AttributionMethod::EapIg, steps, pair, metric))
}

/// Everything needed to turn a sample into a circuit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CircuitConfig {
    pub strategy: PatchStrategy,
    pub metric: Metric,
    pub method: AttributionMethod,
    pub ig_steps: usize,
    /// Explicit edge budget; falls back to `k_fraction` of the edges.
    pub k: Option<usize>,
    pub k_fraction: f64,
    /// Seeds the choice of substitute entity.
    pub seed: u64,
}

impl Default for CircuitConfig {
    fn default() -> Self {
        CircuitConfig {
            strategy: PatchStrategy::EntitySwap,
            metric: Metric::AnswerLogProb,
            method: AttributionMethod::EapIg,
            ig_steps: 10,
            k: None,
            k_fraction: 0.1,
            seed: 0,
        }
    }
}

impl CircuitConfig {
    pub fn resolve_k(&self, edge_count: usize) -> Result<usize> {
        let k = match self.k {
            Some(k) => k,
            None => {
                if !(self.k_fraction > 0.0 && self.k_fraction <= 1.0) {
                    return Err(Error::Config(format!("k fraction {} outside (0, 1]", self.k_fraction)));
                }
                (libm::round(self.k_fraction * edge_count as f64) as usize).max(1)
            }
        };
        if k == 0 || k > edge_count {
            return Err(Error::Config(format!("k = {k} outside 1..={edge_count}")));
        }
        Ok(k)
    }
}

/// The pair a sample is attributed with. Entity swaps that find no
/// substitute fall back to zero ablation.
pub fn pair_for_sample(sample: &Sample, dataset: &Dataset, cfg: &CircuitConfig) -> Result<PatchPair> {
    let mut rng = Rng::new(cfg.seed).fork(sample.id as u64);
    match make_patch(sample, dataset, cfg.strategy, &mut rng) {
        Err(Error::Pairing(_)) if cfg.strategy != PatchStrategy::Zero => Ok(PatchPair::zero(sample)),
        other => other,
    }
}

pub fn scores_for_pair(model: &Model, pair: &PatchPair, cfg: &CircuitConfig) -> Result<EdgeScores> {
    match cfg.method {
        AttributionMethod::Exact => exact_scores(model, pair, cfg.metric),
        AttributionMethod::Eap => eap_scores(model, pair, cfg.metric),
        AttributionMethod::EapIg => eapig_scores(model, pair, cfg.metric, cfg.ig_steps),
    }
}

pub fn scores_for_sample(model: &Model, sample: &Sample, dataset: &Dataset, cfg: &CircuitConfig) -> Result<EdgeScores> {
    let pair = pair_for_sample(sample, dataset, cfg)?;
    scores_for_pair(model, &pair, cfg)
}

pub fn circuit_for_sample(model: &Model, sample: &Sample, dataset: &Dataset, cfg: &CircuitConfig) -> Result<Circuit> {
    let scores = scores_for_sample(model, sample, dataset, cfg)?;
    binarize(&scores, cfg.resolve_k(scores.scores.len())?)
}

/// What replaces the contribution of an edge outside the circuit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Ablation {
    /// Per-position mean of the source output over a reference batch.
    Mean,
    Zero,
}

/// Replacement value per source node for out-of-circuit edges.
pub fn ablation_values(model: &Model, reference: &[Sample], kind: Ablation) -> Result<Vec<Tensor>> {
    let first = reference.first().ok_or_else(|| Error::Input("empty reference batch".into()))?;
    let t = first.seq_len();
    let mut acc: Option<Vec<Tensor>> = None;
    for s in reference {
        if s.seq_len() != t {
            return Err(Error::Input("reference samples must share one sequence length".into()));
        }
        let cache = forward(model, &s.input_tokens())?;
        match acc.as_mut() {
            None => acc = Some(cache.source_outputs),
            Some(a) => {
                for (x, y) in a.iter_mut().zip(&cache.source_outputs) {
                    x.add_assign(y);
                }
            }
        }
    }
    let mut acc = acc.expect("non-empty reference");
    for x in &mut acc {
        match kind {
            Ablation::Mean => x.scale(1.0 / reference.len() as f64),
            Ablation::Zero => x.fill(0.0),
        }
    }
    Ok(acc)
}

fn masked_metric(model: &Model, sample: &Sample, keep: &[bool], ablation: &[Tensor], metric: Metric) -> Result<f64> {
    let spec = RunSpec {
        input_embedding: None,
        intervention: Intervention::EdgeMask { keep, ablation },
    };
    let cache = forward_with(model, &sample.input_tokens(), &spec)?;
    metric.value(&cache.logits, sample)
}

/// Fraction of the full model's metric recovered by running only the
/// circuit's edges, relative to the run with every edge ablated:
/// `(M_circuit − M_empty) / (M_full − M_empty)` over sample means, clipped
/// to `[0, 1]`.
pub fn faithfulness(
    model: &Model,
    circuit: &Circuit,
    samples: &[Sample],
    ablation: &[Tensor],
    metric: Metric,
) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Input("faithfulness needs at least one sample".into()));
    }
    let graph = model.graph();
    if circuit.graph != GraphRef::of(&graph) {
        return Err(Error::Input("circuit does not belong to this model's graph".into()));
    }
    let none = vec![false; circuit.bits.len()];
    let (mut full, mut part, mut empty) = (0.0, 0.0, 0.0);
    for s in samples {
        full += metric.value(&forward(model, &s.input_tokens())?.logits, s)?;
        part += masked_metric(model, s, &circuit.bits, ablation, metric)?;
        empty += masked_metric(model, s, &none, ablation, metric)?;
    }
    let den = full - empty;
    if libm::fabs(den) < 1e-12 {
        return Ok(if libm::fabs(part - full) < 1e-12 { 1.0 } else { 0.0 });
    }
    Ok(((part - empty) / den).clamp(0.0, 1.0))
}

/// Next-token distributions at each position, for diagnostics.
pub fn probabilities(model: &Model, tokens: &[usize]) -> Result<Tensor> {
    Ok(softmax_rows(&forward(model, tokens)?.logits))
}

/// Renders a circuit as its edge names.
pub fn edge_names(circuit: &Circuit) -> Vec<String> {
    let g = circuit.graph.graph();
    circuit.edges().into_iter().map(|e| g.edge_name(e)).collect()
}

#[cfg(test)]
mod tests;
