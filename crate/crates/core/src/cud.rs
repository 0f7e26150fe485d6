//! Circuit similarity and the difficulty score.
//!
//! A sample's score places its circuit between the easy anchor circuit
//! (score 0) and the hard anchor circuit (score 1):
//! `(1 − s_E) / ((1 − s_E) + (1 − s_H))`.

use alloc::collections::BTreeSet;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::anchors::AnchorResult;
use crate::circuits::{circuit_for_sample, Circuit, CircuitConfig};
use crate::data::{Dataset, Sample};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SimilarityMetric {
    Cosine,
    Jaccard,
    Hamming,
}

impl SimilarityMetric {
    pub const ALL: [SimilarityMetric; 3] = [Self::Cosine, Self::Jaccard, Self::Hamming];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Cosine => "cosine",
            Self::Jaccard => "jaccard",
            Self::Hamming => "hamming",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|m| m.as_str() == s)
    }
}

/// Similarity of two edge sets. Hamming similarity is the fraction of
/// agreeing positions.
pub fn similarity(a: &[bool], b: &[bool], metric: SimilarityMetric) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Dimension {
            op: "similarity",
            lhs: alloc::vec![a.len()],
            rhs: alloc::vec![b.len()],
        });
    }
    if a.is_empty() {
        return Err(Error::UndefinedSimilarity);
    }
    let (mut both, mut na, mut nb) = (0usize, 0usize, 0usize);
    for (&x, &y) in a.iter().zip(b) {
        both += (x && y) as usize;
        na += x as usize;
        nb += y as usize;
    }
    match metric {
        SimilarityMetric::Cosine => {
            if na == 0 && nb == 0 {
                return Err(Error::UndefinedSimilarity);
            }
            if na == 0 || nb == 0 {
                return Ok(0.0);
            }
            Ok(both as f64 / libm::sqrt(na as f64 * nb as f64))
        }
        SimilarityMetric::Jaccard => {
            let union = na + nb - both;
            if union == 0 {
                return Err(Error::UndefinedSimilarity);
            }
            Ok(both as f64 / union as f64)
        }
        SimilarityMetric::Hamming => {
            let agree = a.len() - (na + nb - 2 * both);
            Ok(agree as f64 / a.len() as f64)
        }
    }
}

/// Score and degeneracy flag from the two anchor similarities. When the
/// sample is equally identical to both anchors the score is 0.5, flagged.
///
/// The smaller side is divided and the larger taken as its complement, so
/// swapping the anchors gives scores that sum to exactly 1.
pub fn cud_from_similarities(s_e: f64, s_h: f64) -> (f64, bool) {
    let (x, y) = (1.0 - s_e, 1.0 - s_h);
    let den = x + y;
    if !(den > 0.0) {
        return (0.5, true);
    }
    let c = if x <= y { x / den } else { 1.0 - y / den };
    (c.clamp(0.0, 1.0), false)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CudScore {
    pub s_e: f64,
    pub s_h: f64,
    pub cud: f64,
    pub degenerate: bool,
}

pub fn cud_score(circuit: &Circuit, easy: &Circuit, hard: &Circuit, metric: SimilarityMetric) -> Result<CudScore> {
    if circuit.graph != easy.graph || circuit.graph != hard.graph {
        return Err(Error::Input("circuits come from different graphs".into()));
    }
    let s_e = similarity(&circuit.bits, &easy.bits, metric)?;
    let s_h = similarity(&circuit.bits, &hard.bits, metric)?;
    let (cud, degenerate) = cud_from_similarities(s_e, s_h);
    Ok(CudScore {
        s_e,
        s_h,
        cud,
        degenerate,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CudRecord {
    pub id: usize,
    pub s_e: f64,
    pub s_h: f64,
    pub cud: f64,
    pub metric: SimilarityMetric,
    pub degenerate: bool,
    /// Identifies the anchor circuit pair the sample was scored against.
    pub anchor_hash: u64,
    /// Set when the sample could not be scored; `cud` is then 0.5.
    pub error: Option<String>,
}

/// Hash of an anchor circuit pair.
pub fn anchor_hash(easy: &Circuit, hard: &Circuit) -> u64 {
    easy.fingerprint().rotate_left(17) ^ hard.fingerprint()
}

/// Scores precomputed sample circuits against a pair of anchors.
pub fn score_circuits(
    circuits: &[(usize, Result<Circuit>)],
    easy: &Circuit,
    hard: &Circuit,
    metric: SimilarityMetric,
) -> Vec<CudRecord> {
    let hash = anchor_hash(easy, hard);
    circuits
        .iter()
        .map(|(id, c)| {
            let scored = c
                .as_ref()
                .map_err(|e| e.to_string())
                .and_then(|c| cud_score(c, easy, hard, metric).map_err(|e| e.to_string()));
            match scored {
                Ok(s) => CudRecord {
                    id: *id,
                    s_e: s.s_e,
                    s_h: s.s_h,
                    cud: s.cud,
                    metric,
                    degenerate: s.degenerate,
                    anchor_hash: hash,
                    error: None,
                },
                Err(e) => CudRecord {
                    id: *id,
                    s_e: f64::NAN,
                    s_h: f64::NAN,
                    cud: 0.5,
                    metric,
                    degenerate: true,
                    anchor_hash: hash,
                    error: Some(e),
                },
            }
        })
        .collect()
}

/// Per-sample circuits of `samples`, keeping failures per sample.
pub fn sample_circuits(
    model: &Model,
    samples: &[Sample],
    dataset: &Dataset,
    cfg: &CircuitConfig,
) -> Vec<(usize, Result<Circuit>)> {
    samples
        .iter()
        .map(|s| (s.id, circuit_for_sample(model, s, dataset, cfg)))
        .collect()
}

/// One record per forget sample, scored against the anchor circuits.
pub fn score_forget_set(
    model: &Model,
    forget: &[Sample],
    dataset: &Dataset,
    anchors: &AnchorResult,
    cfg: &CircuitConfig,
    metric: SimilarityMetric,
) -> Vec<CudRecord> {
    let circuits = sample_circuits(model, forget, dataset, cfg);
    score_circuits(&circuits, &anchors.easy_circuit, &anchors.hard_circuit, metric)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionMode {
    Easy,
    Hard,
    DefaultRandom,
}

impl SelectionMode {
    pub const ALL: [SelectionMode; 3] = [Self::DefaultRandom, Self::Easy, Self::Hard];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Easy => "easy",
            Self::Hard => "hard",
            Self::DefaultRandom => "default_random",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|m| m.as_str() == s)
    }
}

/// Picks `n` sample ids: lowest scores (easy), highest (hard) or a seeded
/// uniform draw. Score ties go to the lower id. Returned ids are sorted.
pub fn select_sets(records: &[CudRecord], n: usize, mode: SelectionMode, seed: u64) -> Result<Vec<usize>> {
    if n > records.len() {
        return Err(Error::Input(format!("cannot select {n} of {} samples", records.len())));
    }
    let mut order: Vec<usize> = (0..records.len()).collect();
    match mode {
        SelectionMode::Easy => {
            order.sort_by(|&a, &b| records[a].cud.total_cmp(&records[b].cud).then(records[a].id.cmp(&records[b].id)))
        }
        SelectionMode::Hard => {
            order.sort_by(|&a, &b| records[b].cud.total_cmp(&records[a].cud).then(records[a].id.cmp(&records[b].id)))
        }
        SelectionMode::DefaultRandom => {
            order.sort_by_key(|&i| records[i].id);
            Rng::new(seed).fork(0x5e1ec7).shuffle(&mut order);
        }
    }
    let picked: BTreeSet<usize> = order[..n].iter().map(|&i| records[i].id).collect();
    Ok(picked.into_iter().collect())
}
