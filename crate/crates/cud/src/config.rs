//! Pipeline configuration: built-in defaults, a JSON file, then flags.

use std::path::Path;

use cud_core::anchors::AnchorConfig;
use cud_core::circuits::{AttributionMethod, CircuitConfig, Metric};
use cud_core::cud::SimilarityMetric;
use cud_core::data::CorpusConfig;
use cud_core::unlearn::{Method, TrainConfig, UnlearnConfig};
use cud_core::ModelConfig;
use serde::{Deserialize, Serialize};

use crate::error::{AppError, AppResult};
use crate::formats::read_json;

/// Architecture without the data-dependent sizes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelSpec {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_head: usize,
    pub d_mlp: usize,
    pub final_norm: bool,
}

impl Default for ModelSpec {
    fn default() -> Self {
        ModelSpec {
            n_layers: 4,
            n_heads: 4,
            d_model: 64,
            d_head: 16,
            d_mlp: 256,
            final_norm: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ValidateConfig {
    /// Samples per selected set.
    pub n_select: usize,
    pub seeds: Vec<u64>,
    pub methods: Vec<Method>,
}

impl Default for ValidateConfig {
    fn default() -> Self {
        ValidateConfig {
            n_select: 20,
            seeds: (0..5).collect(),
            methods: Method::ALL.to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MrdConfig {
    /// Noise scale as a multiple of the parameter RMS.
    pub sigma_scale: f64,
    pub n_draws: usize,
}

impl Default for MrdConfig {
    fn default() -> Self {
        MrdConfig {
            sigma_scale: 0.01,
            n_draws: 16,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AnalysisConfig {
    /// Extra anchor objectives whose scores are correlated with the main one.
    pub robustness_methods: Vec<Method>,
    /// Rows per side in the unique-edge listing.
    pub top_n: usize,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        AnalysisConfig {
            robustness_methods: vec![Method::Undial],
            top_n: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub run_id: String,
    /// Master seed; stamped into the corpus, model, training and circuit
    /// seeds when the configuration is resolved.
    pub seed: u64,
    pub corpus: CorpusConfig,
    pub model: ModelSpec,
    pub train: TrainConfig,
    pub circuit: CircuitConfig,
    pub anchors: AnchorConfig,
    pub similarity: SimilarityMetric,
    pub unlearn: UnlearnConfig,
    pub validate: ValidateConfig,
    pub mrd: MrdConfig,
    pub analysis: AnalysisConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            run_id: "default".into(),
            seed: 0,
            corpus: CorpusConfig::default(),
            model: ModelSpec::default(),
            train: TrainConfig::default(),
            circuit: CircuitConfig::default(),
            anchors: AnchorConfig::default(),
            similarity: SimilarityMetric::Cosine,
            unlearn: UnlearnConfig::default(),
            validate: ValidateConfig::default(),
            mrd: MrdConfig::default(),
            analysis: AnalysisConfig::default(),
        }
    }
}

/// Which unlearning method a `--method` flag replaces.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MethodTarget {
    /// The objective inside the anchor search.
    Anchors,
    /// The method of a single unlearning run.
    Unlearn,
    /// Restricts the validation grid to one method.
    Validate,
}

/// Command-line overrides shared by every subcommand.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub k: Option<usize>,
    pub ig_steps: Option<usize>,
    /// Attribution metric or similarity metric name.
    pub metric: Option<String>,
    /// Unlearning method or attribution method name.
    pub method: Option<String>,
}

impl PipelineConfig {
    pub fn load(path: Option<&Path>) -> AppResult<Self> {
        match path {
            Some(p) => read_json(p).map_err(|e| match e {
                AppError::Json { context, source } => AppError::Config(format!("{context}: {source}")),
                other => other,
            }),
            None => Ok(Self::default()),
        }
    }

    /// Applies flag overrides, stamps the master seed and validates.
    pub fn resolve(mut self, o: &Overrides, target: MethodTarget) -> AppResult<Self> {
        if let Some(s) = o.seed {
            self.seed = s;
        }
        if let Some(k) = o.k {
            self.circuit.k = Some(k);
        }
        if let Some(n) = o.ig_steps {
            self.circuit.ig_steps = n;
        }
        if let Some(m) = &o.metric {
            if let Some(sim) = SimilarityMetric::parse(m) {
                self.similarity = sim;
            } else if let Some(metric) = Metric::parse(m) {
                self.circuit.metric = metric;
            } else {
                return Err(AppError::Config(format!("unknown metric `{m}`")));
            }
        }
        if let Some(m) = &o.method {
            if let Some(method) = Method::parse(m) {
                match target {
                    MethodTarget::Anchors => self.anchors.inner.method = method,
                    MethodTarget::Unlearn => self.unlearn.method = method,
                    MethodTarget::Validate => self.validate.methods = vec![method],
                }
            } else if let Some(a) = AttributionMethod::parse(m) {
                self.circuit.method = a;
            } else {
                return Err(AppError::Config(format!("unknown method `{m}`")));
            }
        }
        self.corpus.seed = self.seed;
        self.train.seed = self.seed;
        self.circuit.seed = self.seed;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> AppResult<()> {
        let bad = |m: &str| Err(AppError::Config(m.to_string()));
        if self.run_id.is_empty() || self.run_id.contains(['/', '\\']) || self.run_id.starts_with('.') {
            return bad("run_id must be a plain directory name");
        }
        let m = &self.model;
        if m.n_layers == 0 || m.n_heads == 0 || m.d_model == 0 || m.d_head == 0 || m.d_mlp == 0 {
            return bad("model dimensions must be positive");
        }
        if self.circuit.ig_steps == 0 {
            return bad("ig_steps must be positive");
        }
        if self.validate.n_select == 0 || self.validate.seeds.is_empty() || self.validate.methods.is_empty() {
            return bad("validation needs a set size, seeds and methods");
        }
        if !(self.mrd.sigma_scale > 0.0) || self.mrd.n_draws == 0 {
            return bad("MRD-proxy needs a positive noise scale and draw count");
        }
        self.anchors.validate()?;
        self.unlearn.validate()?;
        Ok(())
    }

    pub fn model_config(&self, max_seq: usize) -> ModelConfig {
        let m = &self.model;
        ModelConfig {
            n_layers: m.n_layers,
            n_heads: m.n_heads,
            d_model: m.d_model,
            d_head: m.d_head,
            d_mlp: m.d_mlp,
            vocab_size: self.corpus.vocab_size,
            max_seq,
            seed: self.seed,
            final_norm: m.final_norm,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_beat_file_values() {
        let file: PipelineConfig = serde_json::from_str(r#"{"seed": 3, "circuit": {"ig_steps": 4}}"#).unwrap();
        let o = Overrides {
            seed: Some(9),
            metric: Some("jaccard".into()),
            method: Some("undial".into()),
            ..Overrides::default()
        };
        let c = file.clone().resolve(&o, MethodTarget::Anchors).unwrap();
        assert_eq!((c.seed, c.corpus.seed, c.circuit.seed), (9, 9, 9));
        assert_eq!(c.circuit.ig_steps, 4);
        assert_eq!(c.similarity, SimilarityMetric::Jaccard);
        assert_eq!(c.anchors.inner.method, Method::Undial);
        assert_eq!(c.unlearn.method, Method::GradDiff);

        let c = file.resolve(&Overrides { method: Some("eap".into()), ..Overrides::default() }, MethodTarget::Unlearn).unwrap();
        assert_eq!(c.circuit.method, AttributionMethod::Eap);
        assert_eq!(c.seed, 3);
    }

    #[test]
    fn rejects_unknown_names_and_fields() {
        let o = Overrides { metric: Some("manhattan".into()), ..Overrides::default() };
        assert!(matches!(PipelineConfig::default().resolve(&o, MethodTarget::Unlearn), Err(AppError::Config(_))));
        assert!(serde_json::from_str::<PipelineConfig>(r#"{"sede": 1}"#).is_err());
    }
}
