//! Shared fixtures for unit tests.

use std::sync::OnceLock;

use crate::data::{gen_corpus, CorpusConfig, Dataset};
use crate::model::{Model, ModelConfig};
use crate::unlearn::{train, TrainConfig};

pub(crate) fn tiny_model_config(ds: &Dataset) -> ModelConfig {
    ModelConfig {
        n_layers: 2,
        n_heads: 2,
        d_model: 32,
        d_head: 16,
        d_mlp: 64,
        vocab_size: ds.config.vocab_size,
        max_seq: ds.max_seq_len(),
        seed: 5,
        final_norm: true,
    }
}

/// A 2-layer model memorizing an 80-sample corpus (8 forget samples).
pub(crate) fn tiny_trained() -> &'static (Dataset, Model) {
    static CELL: OnceLock<(Dataset, Model)> = OnceLock::new();
    CELL.get_or_init(|| {
        let ds = gen_corpus(&CorpusConfig::new(40, 2, 96, 3)).unwrap();
        let tc = TrainConfig {
            lr: 5e-3,
            max_epochs: 300,
            batch_size: 8,
            ..TrainConfig::default()
        };
        let (m, _) = train(&tiny_model_config(&ds), &ds.samples, &tc).unwrap();
        (ds, m)
    })
}
