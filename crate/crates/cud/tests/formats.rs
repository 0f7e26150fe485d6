use cud::formats::{checkpoint, circuit, dataset, tables};
use cud::AppError;
use cud_core::circuits::{binarize, AttributionMethod, EdgeScores, Metric, Provenance};
use cud_core::cud::{CudRecord, SimilarityMetric};
use cud_core::data::{gen_corpus, CorpusConfig, PatchStrategy};
use cud_core::{ComputationGraph, Model, ModelConfig};
use proptest::prelude::*;

fn small_model() -> Model {
    Model::init(ModelConfig {
        n_layers: 2,
        n_heads: 2,
        d_model: 16,
        d_head: 8,
        d_mlp: 32,
        vocab_size: 40,
        max_seq: 6,
        seed: 11,
        final_norm: true,
    })
    .unwrap()
}

fn provenance() -> Provenance {
    Provenance {
        method: AttributionMethod::EapIg,
        ig_steps: 10,
        strategy: PatchStrategy::EntitySwap,
        metric: Metric::AnswerLogProb,
        sample_id: Some(7),
    }
}

#[test]
fn checkpoint_round_trip_is_exact() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.cudm");
    let model = small_model();
    checkpoint::save(&path, &model, serde_json::json!({ "stage": "test" })).unwrap();
    let back = checkpoint::load(&path).unwrap();
    assert_eq!(back.cfg, model.cfg);
    assert_eq!(back.params, model.params);
    assert_eq!(checkpoint::encode(&back).unwrap(), std::fs::read(&path).unwrap());
    let side = checkpoint::load_sidecar(&path).unwrap();
    assert_eq!(side.parameter_count, model.params.count());
    assert_eq!(&std::fs::read(&path).unwrap()[..4], b"CUDM");
}

#[test]
fn corrupt_checkpoints_are_rejected() {
    let bytes = checkpoint::encode(&small_model()).unwrap();
    let p = std::path::Path::new("x.cudm");
    let mut wrong_magic = bytes.clone();
    wrong_magic[0] = b'X';
    let mut trailing = bytes.clone();
    trailing.push(0);
    for bad in [wrong_magic, trailing, bytes[..bytes.len() - 3].to_vec()] {
        let err = checkpoint::decode(&bad, p).unwrap_err();
        assert!(matches!(err, AppError::Format { .. }), "{err}");
        assert_eq!(err.exit_code(), 3);
    }
}

#[test]
fn dataset_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let ds = gen_corpus(&CorpusConfig::new(20, 2, 80, 4)).unwrap();
    let (s, v) = (dir.path().join("s.jsonl"), dir.path().join("v.json"));
    dataset::write(&ds, &s, &v).unwrap();
    assert_eq!(std::fs::read_to_string(&s).unwrap().lines().count(), ds.samples.len());
    assert_eq!(dataset::read(&s, &v).unwrap(), ds);
}

#[test]
fn circuit_file_round_trip_and_header() {
    let dir = tempfile::tempdir().unwrap();
    let g = ComputationGraph::with_shape(2, 2);
    let scores: Vec<f64> = (0..g.edge_count()).map(|i| ((i * 37) % 11) as f64 - 5.0).collect();
    let c = binarize(&EdgeScores::new(&g, scores, provenance()).unwrap(), 9).unwrap();
    let path = dir.path().join("c.circuit.json");
    circuit::save(&path, &c).unwrap();
    assert_eq!(circuit::load(&path).unwrap(), c);
    let file: circuit::CircuitFile = serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
    assert_eq!(file.header.edge_count, 46);
    assert_eq!(file.header.k, 9);
    assert_eq!(file.header.sample_id, Some(7));
    assert_eq!(file.bits.len(), 2 * 46usize.div_ceil(8));

    let mut wrong = file.clone();
    wrong.header.k = 8;
    assert!(circuit::from_file(&wrong, &path).is_err());
    let mut wrong = file;
    wrong.header.graph_hash = "0000000000000000".into();
    assert!(circuit::from_file(&wrong, &path).is_err());
}

#[test]
fn edge_score_table_uses_canonical_names() {
    let g = ComputationGraph::with_shape(2, 2);
    let s = EdgeScores::new(&g, vec![0.5; g.edge_count()], provenance()).unwrap();
    let rows = tables::edge_score_rows(&s);
    assert_eq!(rows.len(), 46);
    assert!(rows.iter().any(|r| r.edge_name == "input→logits"));
    assert!(rows.iter().all(|r| g.edge_by_name(&r.edge_name).is_some()));
}

#[test]
fn cud_table_round_trip_with_header() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("cud.csv");
    let recs = vec![
        CudRecord {
            id: 3,
            s_e: 0.9,
            s_h: 0.5,
            cud: 1.0 / 6.0,
            metric: SimilarityMetric::Cosine,
            degenerate: false,
            anchor_hash: 0xdead_beef,
            error: None,
        },
        CudRecord {
            id: 4,
            s_e: 1.0,
            s_h: 1.0,
            cud: 0.5,
            metric: SimilarityMetric::Cosine,
            degenerate: true,
            anchor_hash: 0xdead_beef,
            error: Some("no circuit".into()),
        },
    ];
    tables::write_cud(&path, &recs).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    assert!(text.starts_with("id,s_e,s_h,cud,metric,degenerate_flag"));
    assert_eq!(tables::read_cud(&path).unwrap(), recs);
}

#[test]
fn histogram_pads_the_shorter_side() {
    let rows = tables::histogram_rows(&[5, 3], &[4, 2, 1]);
    assert_eq!(rows.len(), 3);
    assert_eq!((rows[2].rank, rows[2].count_easy, rows[2].count_hard), (3, 0, 1));
}

proptest! {
    #[test]
    fn packed_bits_round_trip(bits in proptest::collection::vec(any::<bool>(), 0..200)) {
        let text = circuit::pack_bits(&bits);
        prop_assert_eq!(text.len(), 2 * bits.len().div_ceil(8));
        prop_assert_eq!(circuit::unpack_bits(&text, bits.len()), Some(bits));
    }
}
