//! Edge-frequency statistics, depth profiles, distribution tests and the
//! perturbation-sensitivity (MRD-proxy) baseline.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::circuits::{Circuit, GraphRef};
use crate::data::Sample;
use crate::error::{Error, Result};
use crate::model::{forward, ComputationGraph, Model, Node};
use crate::rng::Rng;
use crate::unlearn::loss::answer_logprob;

/// How many circuits contain each edge.
pub fn edge_frequency(circuits: &[Circuit]) -> Result<Vec<usize>> {
    let first = circuits.first().ok_or_else(|| Error::Input("no circuits to count".into()))?;
    let mut counts = vec![0usize; first.bits.len()];
    for c in circuits {
        if c.graph != first.graph || c.bits.len() != counts.len() {
            return Err(Error::Input("circuits come from different graphs".into()));
        }
        for (n, &b) in counts.iter_mut().zip(&c.bits) {
            *n += b as usize;
        }
    }
    Ok(counts)
}

/// Counts in decreasing order, for frequency-rank plots.
pub fn sorted_counts(counts: &[usize]) -> Vec<usize> {
    let mut v = counts.to_vec();
    v.sort_unstable_by(|a, b| b.cmp(a));
    v
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EdgeFrequencyRow {
    pub edge: usize,
    pub name: String,
    pub count_easy: usize,
    pub count_hard: usize,
    /// Percent of easy circuits containing the edge.
    pub freq_easy: f64,
    pub freq_hard: f64,
    /// `freq_easy − freq_hard`.
    pub delta: f64,
}

/// Per-edge counts and percentages over two circuit collections.
pub fn frequency_table(easy: &[Circuit], hard: &[Circuit]) -> Result<Vec<EdgeFrequencyRow>> {
    let ce = edge_frequency(easy)?;
    let ch = edge_frequency(hard)?;
    if easy[0].graph != hard[0].graph {
        return Err(Error::Input("easy and hard circuits come from different graphs".into()));
    }
    let graph = easy[0].graph.graph();
    let (ne, nh) = (easy.len() as f64, hard.len() as f64);
    Ok((0..ce.len())
        .map(|e| {
            let freq_easy = 100.0 * ce[e] as f64 / ne;
            let freq_hard = 100.0 * ch[e] as f64 / nh;
            EdgeFrequencyRow {
                edge: e,
                name: graph.edge_name(e),
                count_easy: ce[e],
                count_hard: ch[e],
                freq_easy,
                freq_hard,
                delta: freq_easy - freq_hard,
            }
        })
        .collect())
}

/// Top-`n` rows by `Δ` descending (easy-unique) and ascending (hard-unique),
/// lower edge index first on ties.
pub fn top_unique_edges(table: &[EdgeFrequencyRow], n: usize) -> (Vec<EdgeFrequencyRow>, Vec<EdgeFrequencyRow>) {
    let mut easy = table.to_vec();
    easy.sort_by(|a, b| b.delta.total_cmp(&a.delta).then(a.edge.cmp(&b.edge)));
    let mut hard = table.to_vec();
    hard.sort_by(|a, b| a.delta.total_cmp(&b.delta).then(a.edge.cmp(&b.edge)));
    easy.truncate(n);
    hard.truncate(n);
    (easy, hard)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KsResult {
    pub statistic: f64,
    pub p_value: f64,
    /// Whether the p-value came from exact path counting.
    pub exact: bool,
}

/// Two-sample Kolmogorov–Smirnov statistic `sup |F_x − F_y|`.
pub fn ks_statistic(x: &[f64], y: &[f64]) -> f64 {
    let mut a = x.to_vec();
    let mut b = y.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (n, m) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j, mut d) = (0usize, 0usize, 0.0f64);
    while i < a.len() && j < b.len() {
        let v = if a[i] <= b[j] { a[i] } else { b[j] };
        while i < a.len() && a[i] == v {
            i += 1;
        }
        while j < b.len() && b[j] == v {
            j += 1;
        }
        d = d.max(libm::fabs(i as f64 / n - j as f64 / m));
    }
    d
}

/// `P(D ≥ d)` by counting monotone lattice paths that stay strictly inside
/// the band `|i/n − j/m| < d`.
fn ks_exact_p(n: usize, m: usize, d: f64) -> f64 {
    let tol = 1e-9;
    let inside = |i: usize, j: usize| libm::fabs(i as f64 / n as f64 - j as f64 / m as f64) < d - tol;
    // Paths are counted as probabilities: each step splits the mass by the
    // hypergeometric odds of drawing from x or y next.
    let mut row = vec![0.0f64; m + 1];
    for i in 0..=n {
        for j in 0..=m {
            if i == 0 && j == 0 {
                row[0] = 1.0;
                continue;
            }
            if !inside(i, j) {
                row[j] = 0.0;
                continue;
            }
            let from_up = if i > 0 { row[j] * (n - i + 1) as f64 / (n + m - i - j + 1) as f64 } else { 0.0 };
            let from_left = if j > 0 { row[j - 1] * (m - j + 1) as f64 / (n + m - i - j + 1) as f64 } else { 0.0 };
            row[j] = from_up + from_left;
        }
    }
    (1.0 - row[m]).clamp(0.0, 1.0)
}

/// Kolmogorov limiting survival function.
fn kolmogorov_q(lambda: f64) -> f64 {
    if lambda < 1e-3 {
        return 1.0;
    }
    let mut sum = 0.0;
    for k in 1..=100 {
        let kf = k as f64;
        let term = libm::exp(-2.0 * kf * kf * lambda * lambda);
        sum += if k % 2 == 1 { term } else { -term };
        if term < 1e-16 {
            break;
        }
    }
    (2.0 * sum).clamp(0.0, 1.0)
}

/// Two-sample KS test; exact when `n·m ≤ 10 000`, asymptotic otherwise.
pub fn distribution_test(x: &[f64], y: &[f64]) -> Result<KsResult> {
    if x.is_empty() || y.is_empty() {
        return Err(Error::Input("both samples must be non-empty".into()));
    }
    let d = ks_statistic(x, y);
    if d == 0.0 {
        return Ok(KsResult {
            statistic: 0.0,
            p_value: 1.0,
            exact: true,
        });
    }
    let (n, m) = (x.len(), y.len());
    if n * m <= 10_000 {
        return Ok(KsResult {
            statistic: d,
            p_value: ks_exact_p(n, m, d),
            exact: true,
        });
    }
    let ne = libm::sqrt((n * m) as f64 / (n + m) as f64);
    Ok(KsResult {
        statistic: d,
        p_value: kolmogorov_q((ne + 0.12 + 0.11 / ne) * d),
        exact: false,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DepthStats {
    pub mean_source_depth: f64,
    pub mean_sink_depth: f64,
    pub logits_fraction: f64,
    pub attention_fraction: f64,
}

/// Depth profile of an edge list; depth runs from 0 (input) to 1 (logits).
pub fn depth_stats(graph: &ComputationGraph, edges: &[usize]) -> Result<DepthStats> {
    if edges.is_empty() {
        return Err(Error::Input("depth statistics need at least one edge".into()));
    }
    let l = graph.n_layers();
    let (mut src, mut sink, mut logits, mut attn) = (0.0, 0.0, 0usize, 0usize);
    for &e in edges {
        if e >= graph.edge_count() {
            return Err(Error::Input(format!("edge {e} out of range")));
        }
        let s = graph.edge_sink(e);
        src += graph.edge_source(e).depth(l);
        sink += s.node.depth(l);
        logits += matches!(s.node, Node::Logits) as usize;
        attn += matches!(s.node, Node::Head { .. }) as usize;
    }
    let n = edges.len() as f64;
    Ok(DepthStats {
        mean_source_depth: src / n,
        mean_sink_depth: sink / n,
        logits_fraction: logits as f64 / n,
        attention_fraction: attn as f64 / n,
    })
}

pub fn circuit_depth_stats(circuit: &Circuit) -> Result<DepthStats> {
    depth_stats(&GraphRef::graph(&circuit.graph), &circuit.edges())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MrdRecord {
    pub id: usize,
    /// Mean relative likelihood change, in `[0, 2]`.
    pub mrd: f64,
    /// `1 − mrd / 2`.
    pub difficulty: f64,
    pub sigma: f64,
    pub n_draws: usize,
    pub seed: u64,
}

/// Default perturbation scale: 1% of the parameter RMS.
pub fn default_sigma(model: &Model) -> f64 {
    0.01 * model.params.rms()
}

fn likelihood(model: &Model, sample: &Sample) -> Result<f64> {
    let logits = forward(model, &sample.input_tokens())?.logits;
    let lp = answer_logprob(&logits, sample).0 / sample.answer_tokens.len() as f64;
    let p = libm::exp(lp);
    if !p.is_finite() {
        return Err(Error::NonFinite("likelihood"));
    }
    Ok(p)
}

/// Relative change of the per-token answer likelihood under Gaussian weight
/// noise, averaged over draws and clipped to `[0, 2]`.
pub fn mrd_score(model: &Model, sample: &Sample, sigma: f64, n_draws: usize, seed: u64) -> Result<MrdRecord> {
    if !(sigma > 0.0) || n_draws == 0 {
        return Err(Error::Config("sigma must be positive and n_draws at least 1".into()));
    }
    let p = likelihood(model, sample)?;
    let root = Rng::new(seed).fork(sample.id as u64);
    let mut total = 0.0;
    for draw in 0..n_draws {
        let mut rng = root.fork(draw as u64);
        let mut noisy = model.clone();
        for v in noisy.params.iter_values_mut() {
            *v += sigma * rng.normal();
        }
        let q = likelihood(&noisy, sample)?;
        total += libm::fabs(q - p) / p.max(1e-12);
    }
    let mrd = (total / n_draws as f64).clamp(0.0, 2.0);
    Ok(MrdRecord {
        id: sample.id,
        mrd,
        difficulty: 1.0 - mrd / 2.0,
        sigma,
        n_draws,
        seed,
    })
}
