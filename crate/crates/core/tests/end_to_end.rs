//! A trained two-layer model carried through circuits, scoring, selection
//! and unlearning.

use std::sync::OnceLock;

use cud_core::circuits::{
    circuit_for_sample, eap_scores, eapig_scores, exact_edge_effect, exact_scores, pair_for_sample, CircuitConfig,
    Metric,
};
use cud_core::cud::{cud_score, select_sets, sample_circuits, score_circuits, SelectionMode, SimilarityMetric};
use cud_core::data::{gen_corpus, CorpusConfig, Dataset, PatchPair, Split};
use cud_core::unlearn::{accuracy, mean_jsd, run_unlearning, train, Method, TrainConfig, UnlearnConfig};
use cud_core::{Model, ModelConfig};

struct World {
    dataset: Dataset,
    model: Model,
}

fn world() -> &'static World {
    static WORLD: OnceLock<World> = OnceLock::new();
    WORLD.get_or_init(|| {
        let dataset = gen_corpus(&CorpusConfig::new(30, 2, 80, 7)).unwrap();
        let cfg = ModelConfig {
            n_layers: 2,
            n_heads: 2,
            d_model: 24,
            d_head: 12,
            d_mlp: 48,
            vocab_size: 80,
            max_seq: dataset.max_seq_len(),
            seed: 3,
            final_norm: true,
        };
        let tcfg = TrainConfig {
            lr: 5e-3,
            max_epochs: 150,
            batch_size: 8,
            ..TrainConfig::default()
        };
        let (model, _) = train(&cfg, &dataset.samples, &tcfg).unwrap();
        World { dataset, model }
    })
}

#[test]
fn training_memorizes_the_corpus() {
    let w = world();
    assert!(accuracy(&w.model, &w.dataset.split_owned(Split::Forget)).unwrap() >= 0.9);
    assert!(accuracy(&w.model, &w.dataset.split_owned(Split::Retain)).unwrap() >= 0.9);
}

#[test]
fn attribution_methods_share_the_pair_delta() {
    let w = world();
    let cfg = CircuitConfig::default();
    let s = &w.dataset.split_owned(Split::Forget)[0];
    let pair = pair_for_sample(s, &w.dataset, &cfg).unwrap();
    let exact = exact_scores(&w.model, &pair, Metric::AnswerLogProb).unwrap();
    assert_eq!(exact.scores.len(), 46);
    for e in [0, 17, 45] {
        assert_eq!(exact.scores[e], exact_edge_effect(&w.model, &pair, e, Metric::AnswerLogProb).unwrap());
    }
    // Edges whose source is unchanged by the patch score zero under every method.
    let eap = eap_scores(&w.model, &pair, Metric::AnswerLogProb).unwrap();
    let ig = eapig_scores(&w.model, &pair, Metric::AnswerLogProb, 5).unwrap();
    for e in 0..46 {
        if exact.scores[e] == 0.0 {
            assert_eq!(eap.scores[e], 0.0);
            assert_eq!(ig.scores[e], 0.0);
        }
    }
    let zero = PatchPair::zero(s);
    let z = eapig_scores(&w.model, &zero, Metric::AnswerLogitDiff, 3).unwrap();
    assert!(z.scores.iter().all(|x| x.is_finite()));
    assert!(z.scores.iter().any(|&x| x != 0.0));
}

#[test]
fn scoring_and_selection_over_the_forget_set() {
    let w = world();
    let cfg = CircuitConfig::default();
    let forget = w.dataset.split_owned(Split::Forget);
    let circuits = sample_circuits(&w.model, &forget, &w.dataset, &cfg);
    let again = circuit_for_sample(&w.model, &forget[0], &w.dataset, &cfg).unwrap();
    let first = circuits[0].1.as_ref().unwrap();
    assert_eq!(first, &again);
    assert_eq!(first.k, 5);

    let easy = circuits[0].1.as_ref().unwrap().clone();
    let hard = circuits.last().unwrap().1.as_ref().unwrap().clone();
    let own = cud_score(&easy, &easy, &hard, SimilarityMetric::Jaccard).unwrap();
    if easy != hard {
        assert_eq!(own.cud, 0.0);
        assert_eq!(cud_score(&hard, &easy, &hard, SimilarityMetric::Jaccard).unwrap().cud, 1.0);
    }

    let records = score_circuits(&circuits, &easy, &hard, SimilarityMetric::Cosine);
    assert_eq!(records.len(), forget.len());
    assert!(records.iter().all(|r| r.error.is_none() && (0.0..=1.0).contains(&r.cud)));
    let picked = select_sets(&records, 2, SelectionMode::Easy, 0).unwrap();
    assert!(picked.contains(&forget[0].id));
}

#[test]
fn unlearning_lowers_forget_accuracy_and_moves_the_model() {
    let w = world();
    let forget = w.dataset.split_owned(Split::Forget);
    let retain = w.dataset.split_owned(Split::Retain);
    let cfg = UnlearnConfig {
        method: Method::GradAscent,
        lr: 0.05,
        epochs: 5,
        ..UnlearnConfig::default()
    };
    let (unlearned, logs) = run_unlearning(&w.model, &forget, None, &retain, &cfg).unwrap();
    assert_eq!(logs.len(), 5);
    assert!(accuracy(&unlearned, &forget).unwrap() < accuracy(&w.model, &forget).unwrap());
    assert_eq!(mean_jsd(&w.model, &w.model, &forget).unwrap(), 0.0);
    let jsd = mean_jsd(&unlearned, &w.model, &forget).unwrap();
    assert!(jsd > 0.0 && jsd <= std::f64::consts::LN_2);
}
