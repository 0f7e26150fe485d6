//! Synthetic entity–attribute question answering corpus.
//!
//! Every entity has a two-token name and answers one question per attribute
//! with a two-token value. Values are drawn from a Zipf law over each
//! attribute's value pool, so some answers are shared by many entities and
//! others are nearly unique. A tenth of the entities form the forget split.
//! A disjoint template family of entity-free facts forms the general split.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Forget,
    Retain,
    General,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Forget => "forget",
            Split::Retain => "retain",
            Split::General => "general",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sample {
    pub id: usize,
    pub prompt_tokens: Vec<usize>,
    pub answer_tokens: Vec<usize>,
    /// Entity name, or `"general"` for entity-free facts.
    pub entity: String,
    pub split: Split,
}

impl Sample {
    /// Teacher-forced model input: the prompt followed by all but the last
    /// answer token.
    pub fn input_tokens(&self) -> Vec<usize> {
        input_with_prompt(&self.prompt_tokens, &self.answer_tokens)
    }

    /// `(position, target token)` for every answer token.
    pub fn answer_targets(&self) -> Vec<(usize, usize)> {
        let p = self.prompt_tokens.len();
        self.answer_tokens.iter().enumerate().map(|(i, &tok)| (p - 1 + i, tok)).collect()
    }

    pub fn seq_len(&self) -> usize {
        self.prompt_tokens.len() + self.answer_tokens.len() - 1
    }
}

pub(crate) fn input_with_prompt(prompt: &[usize], answer: &[usize]) -> Vec<usize> {
    let mut v = prompt.to_vec();
    v.extend_from_slice(&answer[..answer.len().saturating_sub(1)]);
    v
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorpusConfig {
    pub n_entities: usize,
    pub attrs_per_entity: usize,
    pub vocab_size: usize,
    /// Entity-free facts in the general split.
    pub n_general: usize,
    /// Zipf exponent of the answer-value distribution.
    pub zipf_exponent: f64,
    pub seed: u64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig::new(100, 4, 256, 0)
    }
}

impl CorpusConfig {
    pub fn new(n_entities: usize, attrs_per_entity: usize, vocab_size: usize, seed: u64) -> Self {
        CorpusConfig {
            n_entities,
            attrs_per_entity,
            vocab_size,
            n_general: n_entities * attrs_per_entity / 10,
            zipf_exponent: 1.0,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub config: CorpusConfig,
    pub samples: Vec<Sample>,
    /// Token id → surface string.
    pub vocab: Vec<String>,
}

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const QMARK: usize = 2;
pub const GEN: usize = 3;
const N_SPECIAL: usize = 4;

pub const PROMPT_LEN: usize = 5;
pub const ANSWER_LEN: usize = 2;
/// Positions of the two entity-name tokens inside an entity prompt.
pub const ENTITY_SPAN: core::ops::Range<usize> = 2..4;

const ATTRS: [&str; 8] = ["born", "wrote", "studied", "parent", "award", "genre", "lives", "works"];
const FIRST: [&str; 16] = [
    "Ada", "Bram", "Cyra", "Dov", "Esme", "Finn", "Gala", "Hugo", "Ines", "Jory", "Kaia", "Leif", "Mira", "Noor",
    "Oren", "Pia",
];
const LAST: [&str; 16] = [
    "Voss", "Hale", "Quist", "Marr", "Lund", "Okafor", "Reyes", "Sato", "Tam", "Ueda", "Wren", "Yilmaz", "Zell",
    "Brandt", "Costa", "Dunn",
];

/// Where each token family lives in the vocabulary.
struct Layout {
    attr_base: usize,
    first_base: usize,
    n_first: usize,
    last_base: usize,
    n_last: usize,
    value_base: usize,
    values_per_attr: usize,
    concept_base: usize,
    n_concepts: usize,
    relation_base: usize,
    n_relations: usize,
    general_value_base: usize,
    n_general_values: usize,
    used: usize,
}

impl Layout {
    fn plan(cfg: &CorpusConfig) -> Result<Layout> {
        let a = cfg.attrs_per_entity;
        if a == 0 {
            return Err(Error::Generation("attrs_per_entity must be at least 1".into()));
        }
        // Smallest square name grid that fits every entity, with slack.
        let mut side = 2;
        while side * side < cfg.n_entities + cfg.n_entities / 2 {
            side += 1;
        }
        let n_relations = 4;
        let mut n_concepts = 2;
        while n_concepts * n_relations < cfg.n_general {
            n_concepts += 1;
        }
        let n_general_values = 8;
        let fixed = N_SPECIAL + a + 2 * side + n_concepts + n_relations + n_general_values;
        if fixed + 2 * a > cfg.vocab_size {
            return Err(Error::Generation(format!(
                "vocab size {} too small for {} entities x {} attributes",
                cfg.vocab_size, cfg.n_entities, a
            )));
        }
        let values_per_attr = ((cfg.vocab_size - fixed) / a).min(24);
        let attr_base = N_SPECIAL;
        let first_base = attr_base + a;
        let last_base = first_base + side;
        let value_base = last_base + side;
        let concept_base = value_base + a * values_per_attr;
        let relation_base = concept_base + n_concepts;
        let general_value_base = relation_base + n_relations;
        Ok(Layout {
            attr_base,
            first_base,
            n_first: side,
            last_base,
            n_last: side,
            value_base,
            values_per_attr,
            concept_base,
            n_concepts,
            relation_base,
            n_relations,
            general_value_base,
            n_general_values,
            used: general_value_base + n_general_values,
        })
    }

    fn vocab(&self, cfg: &CorpusConfig) -> Vec<String> {
        let mut v: Vec<String> = ["<pad>", "<bos>", "?", "<gen>"].iter().map(|s| s.to_string()).collect();
        let pick = |list: &[&str], i: usize| -> String {
            if i < list.len() {
                list[i].to_string()
            } else {
                format!("{}{}", list[i % list.len()], i / list.len())
            }
        };
        for k in 0..cfg.attrs_per_entity {
            v.push(pick(&ATTRS, k));
        }
        for i in 0..self.n_first {
            v.push(pick(&FIRST, i));
        }
        for i in 0..self.n_last {
            v.push(pick(&LAST, i));
        }
        for k in 0..cfg.attrs_per_entity {
            for i in 0..self.values_per_attr {
                v.push(format!("{}:{}", pick(&ATTRS, k), i));
            }
        }
        for i in 0..self.n_concepts {
            v.push(format!("concept{i}"));
        }
        for i in 0..self.n_relations {
            v.push(format!("rel{i}"));
        }
        for i in 0..self.n_general_values {
            v.push(format!("fact{i}"));
        }
        while v.len() < cfg.vocab_size {
            v.push(format!("<unused{}>", v.len()));
        }
        debug_assert_eq!(v.len(), cfg.vocab_size);
        debug_assert!(self.used <= cfg.vocab_size);
        v
    }
}

/// Inverse-CDF draw from a Zipf law over `0..n`.
fn zipf(rng: &mut Rng, n: usize, exponent: f64) -> usize {
    let weights: Vec<f64> = (1..=n).map(|r| 1.0 / libm::pow(r as f64, exponent)).collect();
    let total: f64 = weights.iter().sum();
    let mut u = rng.uniform() * total;
    for (i, w) in weights.iter().enumerate() {
        if u < *w {
            return i;
        }
        u -= w;
    }
    n - 1
}

/// Generates the corpus. Fully determined by `cfg`.
pub fn gen_corpus(cfg: &CorpusConfig) -> Result<Dataset> {
    if cfg.n_entities < 20 {
        return Err(Error::Generation("need at least 20 entities".into()));
    }
    if cfg.vocab_size < 64 {
        return Err(Error::Generation("vocab size must be at least 64".into()));
    }
    let layout = Layout::plan(cfg)?;
    let vocab = layout.vocab(cfg);
    let root = Rng::new(cfg.seed);

    let mut names: Vec<(usize, usize)> = (0..layout.n_first)
        .flat_map(|f| (0..layout.n_last).map(move |l| (f, l)))
        .collect();
    root.fork(1).shuffle(&mut names);
    names.truncate(cfg.n_entities);

    let n_forget = cfg.n_entities / 10;
    let mut order: Vec<usize> = (0..cfg.n_entities).collect();
    root.fork(2).shuffle(&mut order);
    let mut is_forget = alloc::vec![false; cfg.n_entities];
    for &e in &order[..n_forget] {
        is_forget[e] = true;
    }

    let mut values = root.fork(3);
    let mut samples = Vec::with_capacity(cfg.n_entities * cfg.attrs_per_entity + cfg.n_general);
    for (e, &(f, l)) in names.iter().enumerate() {
        let first = layout.first_base + f;
        let last = layout.last_base + l;
        let entity = format!("{} {}", vocab[first], vocab[last]);
        for k in 0..cfg.attrs_per_entity {
            let pool = layout.value_base + k * layout.values_per_attr;
            let answer = (0..ANSWER_LEN)
                .map(|_| pool + zipf(&mut values, layout.values_per_attr, cfg.zipf_exponent))
                .collect();
            samples.push(Sample {
                id: samples.len(),
                prompt_tokens: alloc::vec![BOS, layout.attr_base + k, first, last, QMARK],
                answer_tokens: answer,
                entity: entity.clone(),
                split: if is_forget[e] { Split::Forget } else { Split::Retain },
            });
        }
    }

    let mut facts: Vec<(usize, usize)> = (0..layout.n_concepts)
        .flat_map(|c| (0..layout.n_relations).map(move |r| (c, r)))
        .collect();
    root.fork(4).shuffle(&mut facts);
    let mut gen_values = root.fork(5);
    for &(c, r) in facts.iter().take(cfg.n_general) {
        let answer = (0..ANSWER_LEN)
            .map(|_| layout.general_value_base + gen_values.below(layout.n_general_values))
            .collect();
        samples.push(Sample {
            id: samples.len(),
            prompt_tokens: alloc::vec![BOS, GEN, layout.concept_base + c, layout.relation_base + r, QMARK],
            answer_tokens: answer,
            entity: "general".into(),
            split: Split::General,
        });
    }

    Ok(Dataset {
        config: cfg.clone(),
        samples,
        vocab,
    })
}

impl Dataset {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &Sample> {
        self.samples.iter().filter(move |s| s.split == split)
    }

    pub fn split_owned(&self, split: Split) -> Vec<Sample> {
        self.split(split).cloned().collect()
    }

    pub fn get(&self, id: usize) -> Option<&Sample> {
        self.samples.get(id).filter(|s| s.id == id).or_else(|| self.samples.iter().find(|s| s.id == id))
    }

    pub fn max_seq_len(&self) -> usize {
        self.samples.iter().map(Sample::seq_len).max().unwrap_or(0)
    }

    pub fn render(&self, tokens: &[usize]) -> String {
        let words: Vec<&str> = tokens.iter().map(|&t| self.vocab.get(t).map_or("<oov>", String::as_str)).collect();
        words.join(" ")
    }

    /// Token ids of an entity name.
    pub fn entity_tokens(&self, entity: &str) -> Option<Vec<usize>> {
        let index: BTreeMap<&str, usize> = self.vocab.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
        entity.split(' ').map(|w| index.get(w).copied()).collect()
    }

    /// Distinct entity names of a split, in first-appearance order.
    pub fn entities(&self, split: Split) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for s in self.split(split) {
            if out.last() != Some(&s.entity) && !out.contains(&s.entity) {
                out.push(s.entity.clone());
            }
        }
        out
    }

    /// Checks split disjointness, id uniqueness and vocabulary bounds.
    pub fn validate(&self) -> Result<()> {
        let mut ids = alloc::collections::BTreeSet::new();
        for s in &self.samples {
            if !ids.insert(s.id) {
                return Err(Error::Input(format!("duplicate sample id {}", s.id)));
            }
            if s.answer_tokens.is_empty() {
                return Err(Error::Input(format!("sample {} has an empty answer", s.id)));
            }
            if let Some(t) = s.prompt_tokens.iter().chain(&s.answer_tokens).find(|&&t| t >= self.vocab.len()) {
                return Err(Error::Input(format!("sample {} uses token {t} outside the vocabulary", s.id)));
            }
        }
        let forget = self.entities(Split::Forget);
        if self.entities(Split::Retain).iter().any(|e| forget.contains(e)) {
            return Err(Error::Input("forget and retain entities overlap".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PatchStrategy {
    /// Replace the entity name with a same-length name from the other split.
    EntitySwap,
    /// Use the prompt of an unrelated sample (other entity, other question).
    AnswerIrrelevantPrompt,
    /// No patch input; patched activations are zero.
    Zero,
}

impl PatchStrategy {
    pub fn as_str(self) -> &'static str {
        match self {
            PatchStrategy::EntitySwap => "entity_swap",
            PatchStrategy::AnswerIrrelevantPrompt => "answer_irrelevant_prompt",
            PatchStrategy::Zero => "zero",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchPair {
    pub clean: Sample,
    /// Corrupted prompt, same length as the clean prompt. Empty under zero ablation.
    pub patch_tokens: Vec<usize>,
    pub zero_ablation: bool,
    pub strategy: PatchStrategy,
}

impl PatchPair {
    pub fn zero(clean: &Sample) -> Self {
        PatchPair {
            clean: clean.clone(),
            patch_tokens: Vec::new(),
            zero_ablation: true,
            strategy: PatchStrategy::Zero,
        }
    }

    /// Builds a pair from an explicit corrupted prompt.
    pub fn with_prompt(clean: &Sample, patch_tokens: Vec<usize>, strategy: PatchStrategy) -> Result<Self> {
        if patch_tokens.len() != clean.prompt_tokens.len() {
            return Err(Error::Pairing(format!(
                "patch length {} differs from prompt length {}",
                patch_tokens.len(),
                clean.prompt_tokens.len()
            )));
        }
        if patch_tokens == clean.prompt_tokens {
            return Err(Error::Pairing("patch prompt equals the clean prompt".into()));
        }
        Ok(PatchPair {
            clean: clean.clone(),
            patch_tokens,
            zero_ablation: false,
            strategy,
        })
    }

    /// Clean pair with itself; useful as an identity intervention.
    pub fn identity(clean: &Sample) -> Self {
        PatchPair {
            clean: clean.clone(),
            patch_tokens: clean.prompt_tokens.clone(),
            zero_ablation: false,
            strategy: PatchStrategy::EntitySwap,
        }
    }

    /// Patch-run input (corrupted prompt plus the clean answer prefix).
    pub fn patch_input(&self) -> Option<Vec<usize>> {
        (!self.zero_ablation).then(|| input_with_prompt(&self.patch_tokens, &self.clean.answer_tokens))
    }
}

/// Swaps `sample`'s entity name for `substitute`.
pub fn entity_swap_with(sample: &Sample, dataset: &Dataset, substitute: &str) -> Result<PatchPair> {
    let clean_name = dataset
        .entity_tokens(&sample.entity)
        .filter(|_| sample.split != Split::General)
        .ok_or_else(|| Error::Pairing(format!("sample {} has no entity mention", sample.id)))?;
    let sub = dataset
        .entity_tokens(substitute)
        .ok_or_else(|| Error::Pairing(format!("unknown entity {substitute:?}")))?;
    if sub.len() != clean_name.len() {
        return Err(Error::Pairing(format!("{substitute:?} is not length-matched")));
    }
    let span = ENTITY_SPAN;
    if sample.prompt_tokens.get(span.clone()) != Some(&clean_name[..]) {
        return Err(Error::Pairing(format!("entity not found in prompt of sample {}", sample.id)));
    }
    let mut patch = sample.prompt_tokens.clone();
    patch[span].copy_from_slice(&sub);
    PatchPair::with_prompt(sample, patch, PatchStrategy::EntitySwap)
}

/// Builds a clean/patch pair under `strategy`.
pub fn make_patch(sample: &Sample, dataset: &Dataset, strategy: PatchStrategy, rng: &mut Rng) -> Result<PatchPair> {
    match strategy {
        PatchStrategy::Zero => Ok(PatchPair::zero(sample)),
        PatchStrategy::EntitySwap => {
            let other = match sample.split {
                Split::Forget => Split::Retain,
                Split::Retain => Split::Forget,
                Split::General => {
                    return Err(Error::Pairing(format!("general sample {} has no entity", sample.id)))
                }
            };
            let own = dataset
                .entity_tokens(&sample.entity)
                .ok_or_else(|| Error::Pairing(format!("unknown entity {:?}", sample.entity)))?;
            let candidates: Vec<(String, usize)> = dataset
                .entities(other)
                .into_iter()
                .filter_map(|e| {
                    let toks = dataset.entity_tokens(&e)?;
                    (toks.len() == own.len()).then(|| {
                        let differing = toks.iter().zip(&own).filter(|(a, b)| a != b).count();
                        (e, differing)
                    })
                })
                .filter(|(_, differing)| *differing > 0)
                .collect();
            let best = candidates.iter().map(|c| c.1).max().unwrap_or(0);
            let pool: Vec<&String> = candidates.iter().filter(|c| c.1 == best).map(|c| &c.0).collect();
            if pool.is_empty() {
                return Err(Error::Pairing(format!("no length-matched substitute for {:?}", sample.entity)));
            }
            let pick = pool[rng.below(pool.len())];
            entity_swap_with(sample, dataset, pick)
        }
        PatchStrategy::AnswerIrrelevantPrompt => {
            let attr = sample.prompt_tokens.get(1).copied();
            let pool: Vec<&Sample> = dataset
                .samples
                .iter()
                .filter(|s| {
                    s.id != sample.id
                        && s.entity != sample.entity
                        && s.prompt_tokens.len() == sample.prompt_tokens.len()
                        && (sample.split == Split::General || s.prompt_tokens.get(1).copied() != attr)
                        && s.prompt_tokens != sample.prompt_tokens
                })
                .collect();
            if pool.is_empty() {
                return Err(Error::Pairing(format!("no unrelated prompt for sample {}", sample.id)));
            }
            let pick = pool[rng.below(pool.len())];
            PatchPair::with_prompt(sample, pick.prompt_tokens.clone(), PatchStrategy::AnswerIrrelevantPrompt)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn corpus() -> Dataset {
        gen_corpus(&CorpusConfig::new(100, 4, 256, 7)).unwrap()
    }

    #[test]
    fn sizes_and_partition() {
        let d = corpus();
        let entity_samples = d.samples.iter().filter(|s| s.split != Split::General).count();
        assert_eq!(entity_samples, 400);
        assert_eq!(d.split(Split::Forget).count(), 40);
        assert_eq!(d.split(Split::General).count(), 40);
        assert_eq!(d.entities(Split::Forget).len(), 10);
        d.validate().unwrap();
        let forget = d.entities(Split::Forget);
        assert!(d.entities(Split::Retain).iter().all(|e| !forget.contains(e)));
        assert_eq!(d.max_seq_len(), PROMPT_LEN + ANSWER_LEN - 1);
    }

    #[test]
    fn deterministic() {
        assert_eq!(corpus(), corpus());
        assert_ne!(corpus(), gen_corpus(&CorpusConfig::new(100, 4, 256, 8)).unwrap());
    }

    #[test]
    fn too_small_inputs() {
        assert!(matches!(gen_corpus(&CorpusConfig::new(10, 4, 256, 0)), Err(Error::Generation(_))));
        assert!(matches!(gen_corpus(&CorpusConfig::new(100, 4, 32, 0)), Err(Error::Generation(_))));
        assert!(matches!(gen_corpus(&CorpusConfig::new(400, 8, 64, 0)), Err(Error::Generation(_))));
        assert!(gen_corpus(&CorpusConfig::new(20, 2, 64, 0)).is_ok());
    }

    #[test]
    fn entity_swap_changes_only_entity_positions() {
        let d = corpus();
        let s = d.split(Split::Forget).next().unwrap().clone();
        let mut rng = Rng::new(1);
        let pair = make_patch(&s, &d, PatchStrategy::EntitySwap, &mut rng).unwrap();
        assert_eq!(pair.patch_tokens.len(), s.prompt_tokens.len());
        for (i, (a, b)) in pair.patch_tokens.iter().zip(&s.prompt_tokens).enumerate() {
            assert_eq!(a != b, ENTITY_SPAN.contains(&i), "position {i}");
        }
        let swapped = d.render(&pair.patch_tokens[ENTITY_SPAN]);
        assert!(d.entities(Split::Retain).contains(&swapped));
    }

    #[test]
    fn self_swap_rejected() {
        let d = corpus();
        let s = d.split(Split::Retain).next().unwrap();
        assert!(matches!(entity_swap_with(s, &d, &s.entity), Err(Error::Pairing(_))));
    }

    #[test]
    fn zero_strategy() {
        let d = corpus();
        let s = &d.samples[0];
        let pair = make_patch(s, &d, PatchStrategy::Zero, &mut Rng::new(0)).unwrap();
        assert!(pair.zero_ablation);
        assert!(pair.patch_tokens.is_empty());
        assert!(pair.patch_input().is_none());
    }

    #[test]
    fn irrelevant_prompt_and_general_handling() {
        let d = corpus();
        let g = d.split(Split::General).next().unwrap();
        assert!(matches!(make_patch(g, &d, PatchStrategy::EntitySwap, &mut Rng::new(0)), Err(Error::Pairing(_))));
        let pair = make_patch(g, &d, PatchStrategy::AnswerIrrelevantPrompt, &mut Rng::new(0)).unwrap();
        assert_eq!(pair.patch_tokens.len(), g.prompt_tokens.len());
        let s = &d.samples[5];
        let pair = make_patch(s, &d, PatchStrategy::AnswerIrrelevantPrompt, &mut Rng::new(0)).unwrap();
        assert_ne!(pair.patch_tokens[1], s.prompt_tokens[1]);
    }

    #[test]
    fn answer_targets_align_with_input() {
        let d = corpus();
        let s = &d.samples[3];
        let input = s.input_tokens();
        assert_eq!(input.len(), s.seq_len());
        for (pos, tok) in s.answer_targets() {
            assert!(pos < input.len());
            if pos + 1 < input.len() {
                assert_eq!(input[pos + 1], tok);
            }
        }
    }
}
