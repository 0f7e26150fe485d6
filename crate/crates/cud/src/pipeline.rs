//! Pipeline stages. Each stage reads its inputs from the run directory,
//! writes its artifacts and records them in the manifest.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use cud_core::analysis::{
    circuit_depth_stats, depth_stats, distribution_test, frequency_table, mrd_score, sorted_counts,
    top_unique_edges, DepthStats, EdgeFrequencyRow, KsResult,
};
use cud_core::anchors::{find_anchors, AnchorConfig, AnchorResult};
use cud_core::circuits::{binarize, circuit_for_sample, scores_for_sample, Circuit};
use cud_core::cud::{score_circuits, select_sets, CudRecord, SelectionMode, SimilarityMetric};
use cud_core::data::{gen_corpus, Dataset, Sample, Split};
use cud_core::stats::{mean, pearson, sign_test, spearman};
use cud_core::unlearn::{evaluate, mean_jsd, retrain_oracle, run_unlearning, train, EvalReport, EvalSets, Method};
use cud_core::{Error, Model};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::config::PipelineConfig;
use crate::error::{AppError, AppResult};
use crate::formats::tables::{self, MrdRow, ValidationRow, ValidationRun};
use crate::formats::{checkpoint, circuit as circuit_file, dataset as dataset_file, read_json, write_json};
use crate::manifest::Run;

pub const SAMPLES: &str = "data/samples.jsonl";
pub const VOCAB: &str = "data/vocab.json";
pub const MODEL: &str = "models/model.cudm";
pub const MODEL_SIDECAR: &str = "models/model.json";
pub const TRAIN_CURVE: &str = "models/train_curve.csv";
pub const ORACLE: &str = "models/oracle.cudm";
pub const ORACLE_SIDECAR: &str = "models/oracle.json";
pub const ORACLE_CURVE: &str = "models/oracle_curve.csv";
pub const CIRCUIT_INDEX: &str = "circuits/forget/index.json";

pub fn anchors_json(m: Method) -> String {
    format!("anchors/anchors_{}.json", m.as_str())
}

pub fn anchor_circuit_path(m: Method, side: &str) -> String {
    format!("anchors/{side}_{}.circuit.json", m.as_str())
}

pub fn forget_circuit_path(id: usize) -> String {
    format!("circuits/forget/{id}.circuit.json")
}

pub fn cud_table(m: Method, sim: SimilarityMetric) -> String {
    format!("scores/cud_{}_{}.csv", m.as_str(), sim.as_str())
}

pub fn sets_json(m: Method, sim: SimilarityMetric) -> String {
    format!("scores/sets_{}_{}.json", m.as_str(), sim.as_str())
}

fn run_tag(method: Method, mode: SelectionMode, seed: u64) -> String {
    format!("{}_{}_s{seed}", method.as_str(), set_label(mode))
}

pub fn unlearned_model(method: Method, mode: SelectionMode, seed: u64) -> String {
    format!("models/unlearned/{}.cudm", run_tag(method, mode, seed))
}

pub fn eval_report(method: Method, mode: SelectionMode, seed: u64) -> String {
    format!("reports/eval/{}.json", run_tag(method, mode, seed))
}

pub const VALIDATION: &str = "reports/validation.csv";
pub const VALIDATION_RUNS: &str = "reports/validation_runs.csv";
pub const VALIDATION_SUMMARY: &str = "reports/validation_summary.json";
pub const EDGE_FREQUENCY: &str = "reports/edge_frequency.csv";
pub const HISTOGRAM: &str = "reports/edge_histogram.csv";
pub const MRD_PROXY: &str = "reports/mrd_proxy.csv";
pub const ANALYSIS: &str = "reports/analysis.json";

/// Table label of a selection mode.
pub fn set_label(mode: SelectionMode) -> &'static str {
    match mode {
        SelectionMode::DefaultRandom => "default",
        m => m.as_str(),
    }
}

pub fn parse_set(s: &str) -> Option<SelectionMode> {
    match s {
        "default" => Some(SelectionMode::DefaultRandom),
        other => SelectionMode::parse(other),
    }
}

/// An open run with its resolved configuration.
pub struct Ctx {
    pub run: Run,
    pub cfg: PipelineConfig,
}

impl Ctx {
    /// Opens `out`, or `<runs root>/<run_id>` when no directory is given.
    pub fn open(cfg: PipelineConfig, out: Option<&Path>) -> AppResult<Ctx> {
        let dir = out.map(Path::to_path_buf).unwrap_or_else(|| crate::manifest::runs_root().join(&cfg.run_id));
        let echo = serde_json::to_value(&cfg).map_err(AppError::json("configuration"))?;
        Ok(Ctx {
            run: Run::open(&dir, &cfg.run_id, echo)?,
            cfg,
        })
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.run.path(rel)
    }

    fn dataset(&self) -> AppResult<Dataset> {
        let s = self.run.require(SAMPLES, "gen-data")?;
        let v = self.run.require(VOCAB, "gen-data")?;
        dataset_file::read(&s, &v)
    }

    fn model(&self) -> AppResult<Model> {
        checkpoint::load(&self.run.require(MODEL, "train")?)
    }

    fn oracle(&self) -> AppResult<Option<Model>> {
        let p = self.path(ORACLE);
        p.exists().then(|| checkpoint::load(&p)).transpose()
    }

    fn anchor_method(&self) -> Method {
        self.cfg.anchors.inner.method
    }
}

fn to_value<T: Serialize>(v: &T) -> AppResult<Value> {
    serde_json::to_value(v).map_err(AppError::json("stage configuration"))
}

pub fn gen_data(ctx: &mut Ctx) -> AppResult<()> {
    let corpus = ctx.cfg.corpus.clone();
    ctx.run.stage("gen-data", &to_value(&corpus)?, &[], |run| {
        let ds = gen_corpus(&corpus)?;
        dataset_file::write(&ds, &run.path(SAMPLES), &run.path(VOCAB))?;
        Ok(vec![SAMPLES.into(), VOCAB.into()])
    })?;
    Ok(())
}

/// Trains the model and, with `oracle`, the retain-only reference model.
pub fn train_stage(ctx: &mut Ctx, oracle: bool) -> AppResult<()> {
    let ds = ctx.dataset()?;
    let model_cfg = ctx.cfg.model_config(ds.max_seq_len());
    let train_cfg = ctx.cfg.train.clone();
    let slice = json!({ "model": model_cfg, "train": train_cfg });
    ctx.run.stage("train", &slice, &[SAMPLES, VOCAB], |run| {
        let (model, logs) = train(&model_cfg, &ds.samples, &train_cfg)?;
        checkpoint::save(&run.path(MODEL), &model, json!({ "stage": "train", "train": train_cfg, "epochs": logs.len() }))?;
        tables::write_curve(&run.path(TRAIN_CURVE), &logs)?;
        Ok(vec![MODEL.into(), MODEL_SIDECAR.into(), TRAIN_CURVE.into()])
    })?;
    if oracle {
        ctx.run.stage("train-oracle", &slice, &[SAMPLES, VOCAB], |run| {
            let (model, logs) = retrain_oracle(&model_cfg, &ds.samples, &train_cfg)?;
            checkpoint::save(
                &run.path(ORACLE),
                &model,
                json!({ "stage": "train-oracle", "train": train_cfg, "epochs": logs.len(), "excludes": "forget" }),
            )?;
            tables::write_curve(&run.path(ORACLE_CURVE), &logs)?;
            Ok(vec![ORACLE.into(), ORACLE_SIDECAR.into(), ORACLE_CURVE.into()])
        })?;
    }
    Ok(())
}

/// Anchor search with the objective `method`.
pub fn find_anchors_stage(ctx: &mut Ctx, method: Method) -> AppResult<()> {
    let ds = ctx.dataset()?;
    let model = ctx.model()?;
    let acfg = AnchorConfig {
        inner: cud_core::unlearn::UnlearnConfig {
            method,
            ..ctx.cfg.anchors.inner.clone()
        },
        ..ctx.cfg.anchors.clone()
    };
    let ccfg = ctx.cfg.circuit.clone();
    let key = format!("find-anchors:{}", method.as_str());
    let slice = json!({ "anchors": acfg, "circuit": ccfg });
    ctx.run.stage(&key, &slice, &[SAMPLES, VOCAB, MODEL], |run| {
        let forget = ds.split_owned(Split::Forget);
        let retain = ds.split_owned(Split::Retain);
        let result = find_anchors(&model, &ds, &forget, &retain, &acfg, &ccfg)?;
        let (json_path, easy, hard) = (anchors_json(method), anchor_circuit_path(method, "easy"), anchor_circuit_path(method, "hard"));
        write_json(&run.path(&json_path), &result)?;
        circuit_file::save(&run.path(&easy), &result.easy_circuit)?;
        circuit_file::save(&run.path(&hard), &result.hard_circuit)?;
        log::info!("easy anchors {:?}, hard anchors {:?}", result.easy_ids, result.hard_ids);
        Ok(vec![json_path, easy, hard])
    })?;
    Ok(())
}

fn load_anchors(ctx: &Ctx, method: Method) -> AppResult<(AnchorResult, Circuit, Circuit)> {
    let stage = "find-anchors";
    let result: AnchorResult = read_json(&ctx.run.require(&anchors_json(method), stage)?)?;
    let easy = circuit_file::load(&ctx.run.require(&anchor_circuit_path(method, "easy"), stage)?)?;
    let hard = circuit_file::load(&ctx.run.require(&anchor_circuit_path(method, "hard"), stage)?)?;
    Ok((result, easy, hard))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CircuitIndexEntry {
    pub id: usize,
    /// Relative path of the circuit file, absent when attribution failed.
    pub file: Option<String>,
    pub fingerprint: Option<String>,
    pub error: Option<String>,
}

/// Circuits of every forget sample.
pub fn circuit_stage(ctx: &mut Ctx) -> AppResult<()> {
    let ds = ctx.dataset()?;
    let model = ctx.model()?;
    let ccfg = ctx.cfg.circuit.clone();
    ctx.run.stage("circuit", &to_value(&ccfg)?, &[SAMPLES, VOCAB, MODEL], |run| {
        let mut index = Vec::new();
        let mut written = Vec::new();
        for s in ds.split(Split::Forget) {
            match circuit_for_sample(&model, s, &ds, &ccfg) {
                Ok(c) => {
                    let rel = forget_circuit_path(s.id);
                    circuit_file::save(&run.path(&rel), &c)?;
                    index.push(CircuitIndexEntry {
                        id: s.id,
                        file: Some(rel.clone()),
                        fingerprint: Some(format!("{:016x}", c.fingerprint())),
                        error: None,
                    });
                    written.push(rel);
                }
                Err(e) => {
                    log::warn!("sample {}: {e}", s.id);
                    index.push(CircuitIndexEntry {
                        id: s.id,
                        file: None,
                        fingerprint: None,
                        error: Some(e.to_string()),
                    });
                }
            }
        }
        write_json(&run.path(CIRCUIT_INDEX), &index)?;
        written.push(CIRCUIT_INDEX.into());
        Ok(written)
    })?;
    Ok(())
}

/// Circuit and edge-score table of a single sample.
pub fn circuit_sample_stage(ctx: &mut Ctx, id: usize) -> AppResult<()> {
    let ds = ctx.dataset()?;
    let model = ctx.model()?;
    let sample = ds
        .get(id)
        .cloned()
        .ok_or_else(|| AppError::Core(Error::Input(format!("unknown sample id {id}"))))?;
    let ccfg = ctx.cfg.circuit.clone();
    let key = format!("circuit:sample:{id}");
    ctx.run.stage(&key, &to_value(&ccfg)?, &[SAMPLES, VOCAB, MODEL], |run| {
        let scores = scores_for_sample(&model, &sample, &ds, &ccfg)?;
        let c = binarize(&scores, ccfg.resolve_k(scores.scores.len())?)?;
        let (cpath, spath) = (format!("circuits/sample_{id}.circuit.json"), format!("circuits/sample_{id}_scores.csv"));
        circuit_file::save(&run.path(&cpath), &c)?;
        tables::write_rows(&run.path(&spath), &tables::edge_score_rows(&scores))?;
        Ok(vec![cpath, spath])
    })?;
    Ok(())
}

fn load_forget_circuits(ctx: &Ctx) -> AppResult<Vec<(usize, cud_core::Result<Circuit>)>> {
    let index: Vec<CircuitIndexEntry> = read_json(&ctx.run.require(CIRCUIT_INDEX, "circuit")?)?;
    index
        .into_iter()
        .map(|e| match (e.file, e.error) {
            (Some(f), _) => Ok((e.id, Ok(circuit_file::load(&ctx.run.require(&f, "circuit")?)?))),
            (None, err) => Ok((e.id, Err(Error::Input(err.unwrap_or_else(|| "no circuit".into()))))),
        })
        .collect()
}

/// CUD tables of the forget set under every similarity metric, scored
/// against the anchors found with `method`.
pub fn cud_score_stage(ctx: &mut Ctx, method: Method) -> AppResult<()> {
    let (_, easy, hard) = load_anchors(ctx, method)?;
    let circuits = load_forget_circuits(ctx)?;
    let (a, e, h) = (anchors_json(method), anchor_circuit_path(method, "easy"), anchor_circuit_path(method, "hard"));
    let key = format!("cud-score:{}", method.as_str());
    ctx.run.stage(&key, &Value::Null, &[a.as_str(), e.as_str(), h.as_str(), CIRCUIT_INDEX], |run| {
        let mut written = Vec::new();
        for sim in SimilarityMetric::ALL {
            let rel = cud_table(method, sim);
            tables::write_cud(&run.path(&rel), &score_circuits(&circuits, &easy, &hard, sim))?;
            written.push(rel);
        }
        Ok(written)
    })?;
    Ok(())
}

/// Selected id lists: easy and hard are seed-free, the random default has
/// one draw per validation seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectedSets {
    pub anchor_method: Method,
    pub similarity: SimilarityMetric,
    pub n: usize,
    pub easy: Vec<usize>,
    pub hard: Vec<usize>,
    pub default: BTreeMap<u64, Vec<usize>>,
}

impl SelectedSets {
    pub fn ids(&self, mode: SelectionMode, seed: u64) -> AppResult<&[usize]> {
        match mode {
            SelectionMode::Easy => Ok(&self.easy),
            SelectionMode::Hard => Ok(&self.hard),
            SelectionMode::DefaultRandom => self.default.get(&seed).map(Vec::as_slice).ok_or_else(|| {
                AppError::Config(format!("run seed {seed} is not one of the validation seeds"))
            }),
        }
    }
}

fn read_cud(ctx: &Ctx, method: Method, sim: SimilarityMetric) -> AppResult<Vec<CudRecord>> {
    tables::read_cud(&ctx.run.require(&cud_table(method, sim), "cud-score")?)
}

pub fn select_sets_stage(ctx: &mut Ctx) -> AppResult<()> {
    let (method, sim) = (ctx.anchor_method(), ctx.cfg.similarity);
    let table = cud_table(method, sim);
    let records = read_cud(ctx, method, sim)?;
    let (n, seeds) = (ctx.cfg.validate.n_select, ctx.cfg.validate.seeds.clone());
    let key = format!("select-sets:{}:{}", method.as_str(), sim.as_str());
    let slice = json!({ "n_select": n, "seeds": seeds });
    ctx.run.stage(&key, &slice, &[table.as_str()], |run| {
        let sets = SelectedSets {
            anchor_method: method,
            similarity: sim,
            n,
            easy: select_sets(&records, n, SelectionMode::Easy, 0)?,
            hard: select_sets(&records, n, SelectionMode::Hard, 0)?,
            default: seeds
                .iter()
                .map(|&s| Ok((s, select_sets(&records, n, SelectionMode::DefaultRandom, s)?)))
                .collect::<AppResult<_>>()?,
        };
        let rel = sets_json(method, sim);
        write_json(&run.path(&rel), &sets)?;
        Ok(vec![rel])
    })?;
    Ok(())
}

fn load_sets(ctx: &Ctx) -> AppResult<(String, SelectedSets)> {
    let rel = sets_json(ctx.anchor_method(), ctx.cfg.similarity);
    let sets = read_json(&ctx.run.require(&rel, "select-sets")?)?;
    Ok((rel, sets))
}

fn subset(ds: &Dataset, ids: &[usize]) -> Vec<Sample> {
    ds.samples.iter().filter(|s| ids.binary_search(&s.id).is_ok()).cloned().collect()
}

/// Unlearning that keeps the last stable parameters when a run diverges.
fn unlearn_once(
    model: &Model,
    forget: &[Sample],
    retain: &[Sample],
    cfg: &cud_core::unlearn::UnlearnConfig,
) -> AppResult<(Model, Vec<cud_core::unlearn::EpochLog>, bool)> {
    match run_unlearning(model, forget, None, retain, cfg) {
        Ok((m, logs)) => Ok((m, logs, false)),
        Err(Error::Diverged {
            epoch,
            last_stable: Some(m),
        }) => {
            log::warn!("{} diverged at epoch {epoch}; keeping the last stable parameters", cfg.method.as_str());
            Ok((*m, Vec::new(), true))
        }
        Err(e) => Err(e.into()),
    }
}

/// One unlearning run on a selected set.
pub fn unlearn_stage(ctx: &mut Ctx, mode: SelectionMode, seed: u64) -> AppResult<()> {
    let ds = ctx.dataset()?;
    let model = ctx.model()?;
    let (sets_rel, sets) = load_sets(ctx)?;
    let forget = subset(&ds, sets.ids(mode, seed)?);
    let retain = ds.split_owned(Split::Retain);
    let ucfg = cud_core::unlearn::UnlearnConfig {
        seed,
        ..ctx.cfg.unlearn.clone()
    };
    let method = ucfg.method;
    let key = format!("unlearn:{}", run_tag(method, mode, seed));
    ctx.run.stage(&key, &to_value(&ucfg)?, &[SAMPLES, MODEL, sets_rel.as_str()], |run| {
        let (m, logs, diverged) = unlearn_once(&model, &forget, &retain, &ucfg)?;
        let rel = unlearned_model(method, mode, seed);
        let curve = rel.replace(".cudm", "_curve.csv");
        checkpoint::save(
            &run.path(&rel),
            &m,
            json!({ "stage": "unlearn", "set": set_label(mode), "unlearn": ucfg, "diverged": diverged }),
        )?;
        tables::write_curve(&run.path(&curve), &logs)?;
        Ok(vec![rel.clone(), rel.replace(".cudm", ".json"), curve])
    })?;
    Ok(())
}

/// Evaluation of an unlearned model on its own forget set.
pub fn evaluate_stage(ctx: &mut Ctx, mode: SelectionMode, seed: u64) -> AppResult<()> {
    let ds = ctx.dataset()?;
    let method = ctx.cfg.unlearn.method;
    let model_rel = unlearned_model(method, mode, seed);
    let model = checkpoint::load(&ctx.run.require(&model_rel, "unlearn")?)?;
    let (sets_rel, sets) = load_sets(ctx)?;
    let forget = subset(&ds, sets.ids(mode, seed)?);
    let oracle = ctx.oracle()?;
    let mut inputs = vec![SAMPLES, model_rel.as_str(), sets_rel.as_str()];
    if oracle.is_some() {
        inputs.push(ORACLE);
    }
    let key = format!("evaluate:{}", run_tag(method, mode, seed));
    ctx.run.stage(&key, &Value::Null, &inputs, |run| {
        let retain = ds.split_owned(Split::Retain);
        let general = ds.split_owned(Split::General);
        let sets = EvalSets {
            forget: &forget,
            retain: &retain,
            general: &general,
        };
        let mut report = evaluate(&model, sets, oracle.as_ref())?;
        report.seed = Some(seed);
        report.method = Some(method);
        let rel = eval_report(method, mode, seed);
        write_json(&run.path(&rel), &report)?;
        Ok(vec![rel])
    })?;
    Ok(())
}

/// Per-method comparison of the three sets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: Method,
    pub mean_efficacy: BTreeMap<String, f64>,
    /// Seeds on which the easy set beat the hard set.
    pub easy_beats_hard: u64,
    pub easy_beats_default: u64,
    pub default_beats_hard: u64,
    pub n_seeds: u64,
    /// One-sided sign-test p-value of easy over hard.
    pub sign_test_p: f64,
    pub ordering_holds: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationSummary {
    pub anchor_method: Method,
    pub similarity: SimilarityMetric,
    pub n_select: usize,
    pub methods: Vec<MethodSummary>,
}

fn summarize(method: Method, runs: &[ValidationRun], seeds: &[u64]) -> MethodSummary {
    let eff = |set: &str, seed: u64| {
        runs.iter()
            .find(|r| r.set == set && r.seed == seed)
            .map_or(f64::NAN, |r| r.efficacy)
    };
    let count = |a: &str, b: &str| seeds.iter().filter(|&&s| eff(a, s) > eff(b, s)).count() as u64;
    let mean_efficacy: BTreeMap<String, f64> = SelectionMode::ALL
        .iter()
        .map(|&m| {
            let label = set_label(m);
            (label.to_string(), mean(&seeds.iter().map(|&s| eff(label, s)).collect::<Vec<_>>()))
        })
        .collect();
    let n = seeds.len() as u64;
    let easy_beats_hard = count("easy", "hard");
    MethodSummary {
        method,
        ordering_holds: mean_efficacy["easy"] > mean_efficacy["default"] && mean_efficacy["default"] > mean_efficacy["hard"],
        mean_efficacy,
        easy_beats_hard,
        easy_beats_default: count("easy", "default"),
        default_beats_hard: count("default", "hard"),
        n_seeds: n,
        sign_test_p: sign_test(easy_beats_hard, n),
    }
}

/// Unlearns every method on the default, easy and hard sets for every
/// validation seed under one shared configuration.
pub fn validate_stage(ctx: &mut Ctx) -> AppResult<()> {
    let ds = ctx.dataset()?;
    let model = ctx.model()?;
    let (sets_rel, sets) = load_sets(ctx)?;
    let oracle = ctx.oracle()?;
    let (ucfg, vcfg) = (ctx.cfg.unlearn.clone(), ctx.cfg.validate.clone());
    let mut inputs = vec![SAMPLES, MODEL, sets_rel.as_str()];
    if oracle.is_some() {
        inputs.push(ORACLE);
    }
    let slice = json!({ "unlearn": ucfg, "validate": vcfg });
    let key = format!("validate:{}:{}", sets.anchor_method.as_str(), sets.similarity.as_str());
    ctx.run.stage(&key, &slice, &inputs, |run| {
        let retain = ds.split_owned(Split::Retain);
        let general = ds.split_owned(Split::General);
        let mut runs = Vec::new();
        for &method in &vcfg.methods {
            for mode in SelectionMode::ALL {
                for &seed in &vcfg.seeds {
                    let forget = subset(&ds, sets.ids(mode, seed)?);
                    let cfg = cud_core::unlearn::UnlearnConfig {
                        method,
                        seed,
                        ..ucfg.clone()
                    };
                    let (m, _, diverged) = unlearn_once(&model, &forget, &retain, &cfg)?;
                    let eval_sets = EvalSets {
                        forget: &forget,
                        retain: &retain,
                        general: &general,
                    };
                    let r: EvalReport = evaluate(&m, eval_sets, oracle.as_ref())?;
                    let jsd_prior = oracle.as_ref().map(|o| mean_jsd(&model, o, &forget)).transpose()?;
                    runs.push(ValidationRun {
                        method: method.as_str().into(),
                        set: set_label(mode).into(),
                        seed,
                        efficacy: r.unlearn_efficacy,
                        retain: r.retain_acc,
                        general: r.general_acc,
                        jsd: r.jsd_to_retrain,
                        jsd_prior,
                        diverged,
                    });
                }
            }
            log::info!("validated {}", method.as_str());
        }
        let mut rows = Vec::new();
        let mut summaries = Vec::new();
        for &method in &vcfg.methods {
            let mine: Vec<ValidationRun> = runs.iter().filter(|r| r.method == method.as_str()).cloned().collect();
            for mode in SelectionMode::ALL {
                let sel: Vec<&ValidationRun> = mine.iter().filter(|r| r.set == set_label(mode)).collect();
                let avg = |f: fn(&ValidationRun) -> f64| mean(&sel.iter().map(|r| f(r)).collect::<Vec<_>>());
                let jsds: Option<Vec<f64>> = sel.iter().map(|r| r.jsd).collect();
                rows.push(ValidationRow {
                    method: method.as_str().into(),
                    set: set_label(mode).into(),
                    n_seeds: sel.len(),
                    efficacy: avg(|r| r.efficacy),
                    retain: avg(|r| r.retain),
                    general: avg(|r| r.general),
                    jsd: jsds.map(|v| mean(&v)),
                });
            }
            summaries.push(summarize(method, &mine, &vcfg.seeds));
        }
        tables::write_rows(&run.path(VALIDATION), &rows)?;
        tables::write_rows(&run.path(VALIDATION_RUNS), &runs)?;
        write_json(
            &run.path(VALIDATION_SUMMARY),
            &ValidationSummary {
                anchor_method: sets.anchor_method,
                similarity: sets.similarity,
                n_select: sets.n,
                methods: summaries,
            },
        )?;
        Ok(vec![VALIDATION.into(), VALIDATION_RUNS.into(), VALIDATION_SUMMARY.into()])
    })?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisReport {
    pub anchor_method: Method,
    pub similarity: SimilarityMetric,
    pub easy_set: Vec<usize>,
    pub hard_set: Vec<usize>,
    /// Two-sample test on per-edge frequencies of the easy and hard sets.
    pub frequency_ks: KsResult,
    pub top_unique_easy: Vec<EdgeFrequencyRow>,
    pub top_unique_hard: Vec<EdgeFrequencyRow>,
    pub anchor_depth_easy: DepthStats,
    pub anchor_depth_hard: DepthStats,
    pub set_depth_easy: DepthStats,
    pub set_depth_hard: DepthStats,
    /// Spearman ρ of CUD under cosine against the other metrics.
    pub similarity_spearman: BTreeMap<String, Option<f64>>,
    /// Pearson ρ of CUD from the main anchors against other objectives'.
    pub objective_pearson: BTreeMap<String, Option<f64>>,
    /// Spearman ρ between MRD-proxy difficulty and CUD.
    pub mrd_proxy_spearman: Option<f64>,
}

fn cud_by_id(records: &[CudRecord]) -> BTreeMap<usize, f64> {
    records.iter().map(|r| (r.id, r.cud)).collect()
}

/// Paired values of two id-keyed maps.
fn paired(a: &BTreeMap<usize, f64>, b: &BTreeMap<usize, f64>) -> (Vec<f64>, Vec<f64>) {
    a.iter().filter_map(|(id, &x)| b.get(id).map(|&y| (x, y))).unzip()
}

fn pooled_depth(circuits: &[Circuit]) -> AppResult<DepthStats> {
    let graph = circuits[0].graph.graph();
    let edges: Vec<usize> = circuits.iter().flat_map(Circuit::edges).collect();
    Ok(depth_stats(&graph, &edges)?)
}

pub fn analyze_stage(ctx: &mut Ctx) -> AppResult<()> {
    let ds = ctx.dataset()?;
    let model = ctx.model()?;
    let (method, sim) = (ctx.anchor_method(), ctx.cfg.similarity);
    let (_, easy_anchor, hard_anchor) = load_anchors(ctx, method)?;
    let circuits: BTreeMap<usize, Circuit> = load_forget_circuits(ctx)?
        .into_iter()
        .filter_map(|(id, c)| c.ok().map(|c| (id, c)))
        .collect();
    let tables_by_metric: Vec<(SimilarityMetric, Vec<CudRecord>)> = SimilarityMetric::ALL
        .iter()
        .map(|&s| Ok((s, read_cud(ctx, method, s)?)))
        .collect::<AppResult<_>>()?;
    let extra: Vec<(Method, Vec<CudRecord>)> = ctx
        .cfg
        .analysis
        .robustness_methods
        .iter()
        .filter(|&&m| m != method && ctx.path(&cud_table(m, sim)).exists())
        .map(|&m| Ok((m, read_cud(ctx, m, sim)?)))
        .collect::<AppResult<_>>()?;

    let mut input_paths: Vec<String> = vec![
        SAMPLES.into(),
        MODEL.into(),
        CIRCUIT_INDEX.into(),
        anchor_circuit_path(method, "easy"),
        anchor_circuit_path(method, "hard"),
    ];
    input_paths.extend(SimilarityMetric::ALL.iter().map(|&s| cud_table(method, s)));
    input_paths.extend(extra.iter().map(|(m, _)| cud_table(*m, sim)));
    let inputs: Vec<&str> = input_paths.iter().map(String::as_str).collect();
    let (mrd_cfg, top_n, n_select, seed) = (
        ctx.cfg.mrd.clone(),
        ctx.cfg.analysis.top_n,
        ctx.cfg.validate.n_select,
        ctx.cfg.seed,
    );
    let slice = json!({ "mrd": mrd_cfg, "top_n": top_n, "n_select": n_select, "seed": seed });
    let key = format!("analyze:{}:{}", method.as_str(), sim.as_str());
    ctx.run.stage(&key, &slice, &inputs, |run| {
        let main = &tables_by_metric.iter().find(|(s, _)| *s == sim).expect("every metric is loaded").1;
        let scored: Vec<CudRecord> = main.iter().filter(|r| circuits.contains_key(&r.id)).cloned().collect();
        let n = n_select.min(scored.len() / 2).max(1);
        let easy_set = select_sets(&scored, n, SelectionMode::Easy, 0)?;
        let hard_set = select_sets(&scored, n, SelectionMode::Hard, 0)?;
        let pick = |ids: &[usize]| ids.iter().map(|id| circuits[id].clone()).collect::<Vec<_>>();
        let (easy_c, hard_c) = (pick(&easy_set), pick(&hard_set));

        let table = frequency_table(&easy_c, &hard_c)?;
        let fe: Vec<f64> = table.iter().map(|r| r.freq_easy).collect();
        let fh: Vec<f64> = table.iter().map(|r| r.freq_hard).collect();
        let frequency_ks = distribution_test(&fe, &fh)?;
        let (top_unique_easy, top_unique_hard) = top_unique_edges(&table, top_n);
        tables::write_frequency(&run.path(EDGE_FREQUENCY), &table)?;
        let counts_e: Vec<usize> = table.iter().map(|r| r.count_easy).collect();
        let counts_h: Vec<usize> = table.iter().map(|r| r.count_hard).collect();
        tables::write_rows(
            &run.path(HISTOGRAM),
            &tables::histogram_rows(&sorted_counts(&counts_e), &sorted_counts(&counts_h)),
        )?;

        let main_cud = cud_by_id(main);
        let cosine = cud_by_id(&tables_by_metric[0].1);
        let similarity_spearman = tables_by_metric[1..]
            .iter()
            .map(|(s, recs)| {
                let (a, b) = paired(&cosine, &cud_by_id(recs));
                (format!("cosine_{}", s.as_str()), spearman(&a, &b))
            })
            .collect();
        let objective_pearson = extra
            .iter()
            .map(|(m, recs)| {
                let (a, b) = paired(&main_cud, &cud_by_id(recs));
                (m.as_str().to_string(), pearson(&a, &b))
            })
            .collect();

        let sigma = mrd_cfg.sigma_scale * model.params.rms();
        let mrd_rows = ds
            .split(Split::Forget)
            .map(|s| mrd_score(&model, s, sigma, mrd_cfg.n_draws, seed))
            .collect::<cud_core::Result<Vec<_>>>()?;
        tables::write_rows(&run.path(MRD_PROXY), &mrd_rows.iter().map(MrdRow::from).collect::<Vec<_>>())?;
        let mrd_map: BTreeMap<usize, f64> = mrd_rows.iter().map(|r| (r.id, r.difficulty)).collect();
        let (a, b) = paired(&mrd_map, &main_cud);

        let report = AnalysisReport {
            anchor_method: method,
            similarity: sim,
            frequency_ks,
            top_unique_easy,
            top_unique_hard,
            anchor_depth_easy: circuit_depth_stats(&easy_anchor)?,
            anchor_depth_hard: circuit_depth_stats(&hard_anchor)?,
            set_depth_easy: pooled_depth(&easy_c)?,
            set_depth_hard: pooled_depth(&hard_c)?,
            easy_set,
            hard_set,
            similarity_spearman,
            objective_pearson,
            mrd_proxy_spearman: spearman(&a, &b),
        };
        write_json(&run.path(ANALYSIS), &report)?;
        Ok(vec![EDGE_FREQUENCY.into(), HISTOGRAM.into(), MRD_PROXY.into(), ANALYSIS.into()])
    })?;
    Ok(())
}

/// Every stage in order.
pub fn run_all(ctx: &mut Ctx) -> AppResult<()> {
    gen_data(ctx)?;
    train_stage(ctx, true)?;
    let main = ctx.anchor_method();
    find_anchors_stage(ctx, main)?;
    circuit_stage(ctx)?;
    cud_score_stage(ctx, main)?;
    for m in ctx.cfg.analysis.robustness_methods.clone() {
        if m != main {
            find_anchors_stage(ctx, m)?;
            cud_score_stage(ctx, m)?;
        }
    }
    select_sets_stage(ctx)?;
    validate_stage(ctx)?;
    analyze_stage(ctx)
}
