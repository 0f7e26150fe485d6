//! Dataset as JSON Lines plus a vocabulary header.

use std::fmt::Write as _;
use std::path::Path;

use cud_core::data::{CorpusConfig, Dataset, Sample, Split};
use serde::{Deserialize, Serialize};

use super::{read_json, write_bytes, write_json};
use crate::error::{AppError, AppResult};

/// One line of `dataset.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleLine {
    pub id: usize,
    pub split: Split,
    pub entity: String,
    pub prompt: String,
    pub answer: String,
    pub prompt_tokens: Vec<usize>,
    pub answer_tokens: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VocabHeader {
    pub config: CorpusConfig,
    pub vocab: Vec<String>,
}

pub fn write(dataset: &Dataset, samples_path: &Path, vocab_path: &Path) -> AppResult<()> {
    let mut text = String::new();
    for s in &dataset.samples {
        let line = SampleLine {
            id: s.id,
            split: s.split,
            entity: s.entity.clone(),
            prompt: dataset.render(&s.prompt_tokens),
            answer: dataset.render(&s.answer_tokens),
            prompt_tokens: s.prompt_tokens.clone(),
            answer_tokens: s.answer_tokens.clone(),
        };
        let json = serde_json::to_string(&line).map_err(AppError::json("dataset line"))?;
        writeln!(text, "{json}").expect("writing to a String");
    }
    write_bytes(samples_path, text.as_bytes())?;
    write_json(
        vocab_path,
        &VocabHeader {
            config: dataset.config.clone(),
            vocab: dataset.vocab.clone(),
        },
    )
}

pub fn read(samples_path: &Path, vocab_path: &Path) -> AppResult<Dataset> {
    let header: VocabHeader = read_json(vocab_path)?;
    let text = std::fs::read_to_string(samples_path).map_err(AppError::io(samples_path))?;
    let mut samples = Vec::new();
    for (n, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let l: SampleLine =
            serde_json::from_str(line).map_err(AppError::json(format!("{}:{}", samples_path.display(), n + 1)))?;
        samples.push(Sample {
            id: l.id,
            prompt_tokens: l.prompt_tokens,
            answer_tokens: l.answer_tokens,
            entity: l.entity,
            split: l.split,
        });
    }
    let dataset = Dataset {
        config: header.config,
        samples,
        vocab: header.vocab,
    };
    dataset.validate()?;
    Ok(dataset)
}
