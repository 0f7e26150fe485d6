use alloc::vec;
use alloc::vec::Vec;

use super::*;
use crate::data::{gen_corpus, CorpusConfig, Split};
use crate::model::{slot, ModelConfig};
use crate::stats::spearman;

fn setup(final_norm: bool) -> (Dataset, Model) {
    let ds = gen_corpus(&CorpusConfig::new(20, 2, 64, 1)).unwrap();
    let cfg = ModelConfig {
        n_layers: 2,
        n_heads: 2,
        d_model: 16,
        d_head: 8,
        d_mlp: 32,
        vocab_size: 64,
        max_seq: ds.max_seq_len(),
        seed: 11,
        final_norm,
    };
    (ds, crate::model::tests::rough_model(cfg))
}

fn dummy_scores(scores: Vec<f64>) -> EdgeScores {
    EdgeScores {
        graph: GraphRef {
            n_layers: 0,
            n_heads: 0,
            fingerprint: 0,
        },
        scores,
        provenance: Provenance {
            method: AttributionMethod::Eap,
            ig_steps: 0,
            strategy: PatchStrategy::Zero,
            metric: Metric::AnswerLogProb,
            sample_id: None,
        },
    }
}

fn swap_pair(ds: &Dataset, i: usize) -> PatchPair {
    let s = &ds.split_owned(Split::Forget)[i % 4];
    pair_for_sample(s, ds, &CircuitConfig { seed: i as u64, ..CircuitConfig::default() }).unwrap()
}

#[test]
fn binarize_examples() {
    let c = binarize(&dummy_scores(vec![0.5, -0.9, 0.1]), 2).unwrap();
    assert_eq!(c.bits, [true, true, false]);
    assert_eq!(c.k, 2);
    let all = binarize(&dummy_scores(vec![0.5, -0.9, 0.1]), 3).unwrap();
    assert!(all.bits.iter().all(|b| *b));
    let tie = binarize(&dummy_scores(vec![0.1, -0.7, 0.7, 0.2]), 1).unwrap();
    assert_eq!(tie.edges(), [1]);
    assert!(binarize(&dummy_scores(vec![1.0]), 0).is_err());
    assert!(binarize(&dummy_scores(vec![1.0]), 2).is_err());
}

#[test]
fn identity_pair_scores_vanish() {
    let (ds, m) = setup(true);
    let pair = PatchPair::identity(&ds.samples[0]);
    for s in [
        exact_scores(&m, &pair, Metric::AnswerLogProb).unwrap(),
        eap_scores(&m, &pair, Metric::AnswerLogProb).unwrap(),
        eapig_scores(&m, &pair, Metric::AnswerLogProb, 4).unwrap(),
    ] {
        assert!(s.scores.iter().all(|x| *x == 0.0));
    }
}

#[test]
fn zero_ablating_a_silent_source_is_a_no_op() {
    let (ds, mut m) = setup(true);
    let w = crate::model::layer_index(0, slot::W_OUT);
    let b = crate::model::layer_index(0, slot::B_OUT);
    m.params.tensors[w].fill(0.0);
    m.params.tensors[b].fill(0.0);
    let g = m.graph();
    let m0 = g.source_index(crate::model::Node::Mlp { layer: 0 }).unwrap();
    let pair = PatchPair::zero(&ds.samples[1]);
    for (e, edge) in g.edges().iter().enumerate() {
        if edge.source == m0 {
            assert_eq!(exact_edge_effect(&m, &pair, e, Metric::AnswerLogProb).unwrap(), 0.0);
        }
    }
}

#[test]
fn exact_effect_matches_edge_mask_rebuild() {
    let (ds, m) = setup(true);
    let pair = swap_pair(&ds, 0);
    let clean = forward(&m, &pair.clean.input_tokens()).unwrap();
    let patched = forward(&m, &pair.patch_input().unwrap()).unwrap();
    let base = Metric::AnswerLogProb.value(&clean.logits, &pair.clean).unwrap();
    let exact = exact_scores(&m, &pair, Metric::AnswerLogProb).unwrap();
    let g = m.graph();
    for e in 0..g.edge_count() {
        let mut keep = vec![true; g.edge_count()];
        keep[e] = false;
        let spec = RunSpec {
            input_embedding: None,
            intervention: Intervention::EdgeMask {
                keep: &keep,
                ablation: &patched.source_outputs,
            },
        };
        let run = forward_with(&m, &pair.clean.input_tokens(), &spec).unwrap();
        let oracle = Metric::AnswerLogProb.value(&run.logits, &pair.clean).unwrap() - base;
        assert!((oracle - exact.scores[e]).abs() < 1e-10, "edge {e}");
    }
}

#[test]
fn eap_is_exact_for_linear_readout() {
    let (ds, m) = setup(false);
    let pair = swap_pair(&ds, 1);
    let g = m.graph();
    let eap = eap_scores(&m, &pair, Metric::AnswerLogitDiff).unwrap();
    let logits = g.sinks().len() - 1;
    for e in g.edges_into(logits) {
        let exact = exact_edge_effect(&m, &pair, e, Metric::AnswerLogitDiff).unwrap();
        assert!((exact - eap.scores[e]).abs() < 1e-9, "edge {e}: {exact} vs {}", eap.scores[e]);
    }
}

#[test]
fn single_origin_step_reduces_to_eap() {
    let (ds, m) = setup(true);
    for pair in [swap_pair(&ds, 2), PatchPair::zero(&ds.samples[3])] {
        let eap = eap_scores(&m, &pair, Metric::AnswerLogProb).unwrap();
        let ig = eapig_scores_with(&m, &pair, Metric::AnswerLogProb, 1, IgPoints::Origin).unwrap();
        assert_eq!(eap.scores, ig.scores);
    }
}

#[test]
fn ig_tracks_exact_patching() {
    let (ds, m) = setup(true);
    let mut rhos = Vec::new();
    for i in 0..4 {
        let pair = swap_pair(&ds, i);
        let exact = exact_scores(&m, &pair, Metric::AnswerLogProb).unwrap();
        let ig = eapig_scores(&m, &pair, Metric::AnswerLogProb, 10).unwrap();
        rhos.push(spearman(&exact.scores, &ig.scores).unwrap());
    }
    let mean = rhos.iter().sum::<f64>() / rhos.len() as f64;
    assert!(mean >= 0.8, "{rhos:?}");
}

#[test]
fn ig_step_count_converges() {
    let (ds, m) = setup(true);
    let pair = swap_pair(&ds, 3);
    let a = binarize(&eapig_scores(&m, &pair, Metric::AnswerLogProb, 5).unwrap(), 20).unwrap();
    let b = binarize(&eapig_scores(&m, &pair, Metric::AnswerLogProb, 50).unwrap(), 20).unwrap();
    let overlap = a.bits.iter().zip(&b.bits).filter(|(x, y)| **x && **y).count();
    assert!(overlap >= 18, "{overlap}");
}

#[test]
fn circuits_are_deterministic_and_exactly_k() {
    let (ds, m) = setup(true);
    let cfg = CircuitConfig::default();
    let s = &ds.samples[5];
    let a = circuit_for_sample(&m, s, &ds, &cfg).unwrap();
    let b = circuit_for_sample(&m, s, &ds, &cfg).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.k, cfg.resolve_k(46).unwrap());
    assert_eq!(a.bits.iter().filter(|x| **x).count(), a.k);
    assert_eq!(a.provenance.sample_id, Some(s.id));
}

#[test]
fn general_samples_fall_back_to_zero_ablation() {
    let (ds, m) = setup(true);
    let g = ds.split_owned(Split::General);
    let c = circuit_for_sample(&m, &g[0], &ds, &CircuitConfig::default()).unwrap();
    assert_eq!(c.provenance.strategy, PatchStrategy::Zero);
}

#[test]
fn faithfulness_endpoints() {
    let (ds, m) = setup(true);
    let retain = ds.split_owned(Split::Retain);
    let ablation = ablation_values(&m, &retain, Ablation::Mean).unwrap();
    let scores = eap_scores(&m, &swap_pair(&ds, 0), Metric::AnswerLogProb).unwrap();
    let full = binarize(&scores, 46).unwrap();
    let samples = &retain[..3];
    assert_eq!(faithfulness(&m, &full, samples, &ablation, Metric::AnswerLogProb).unwrap(), 1.0);
    let none = Circuit::from_bits(full.graph, vec![false; 46], full.provenance.clone());
    assert_eq!(faithfulness(&m, &none, samples, &ablation, Metric::AnswerLogProb).unwrap(), 0.0);
    assert!(faithfulness(&m, &full, &[], &ablation, Metric::AnswerLogProb).is_err());
    assert!(ablation_values(&m, &[], Ablation::Mean).is_err());
}

#[test]
fn metric_gradients_match_finite_differences() {
    let (ds, m) = setup(true);
    let s = &ds.samples[0];
    let logits = forward(&m, &s.input_tokens()).unwrap().logits;
    for metric in [Metric::AnswerLogProb, Metric::AnswerLogitDiff] {
        let (_, g) = metric.value_and_grad(&logits, s).unwrap();
        for i in [0usize, 7, 5 * 64 + 3, 4 * 64 + s.answer_tokens[0]] {
            let mut p = logits.clone();
            p.data_mut()[i] += 1e-6;
            let mut q = logits.clone();
            q.data_mut()[i] -= 1e-6;
            let fd = (metric.value(&p, s).unwrap() - metric.value(&q, s).unwrap()) / 2e-6;
            assert!((fd - g.data()[i]).abs() < 1e-6);
        }
    }
}
