//! Training, unlearning objectives, the retrain oracle and evaluation.

pub mod loss;
pub mod optim;

use alloc::boxed::Box;
use alloc::collections::BTreeMap;
use alloc::format;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::data::{Sample, Split};
use crate::error::{Error, Result};
use crate::kernel::{log_softmax_row, Tensor};
use crate::model::{backward, forward, Model, ModelConfig, Params};
use crate::rng::Rng;

pub use optim::{Optimizer, OptimizerKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    GradAscent,
    GradDiff,
    Npo,
    SimNpo,
    Undial,
}

impl Method {
    pub const ALL: [Method; 5] = [Method::GradAscent, Method::GradDiff, Method::Npo, Method::SimNpo, Method::Undial];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::GradAscent => "gradascent",
            Method::GradDiff => "graddiff",
            Method::Npo => "npo",
            Method::SimNpo => "simnpo",
            Method::Undial => "undial",
        }
    }

    pub fn parse(s: &str) -> Option<Method> {
        Method::ALL.into_iter().find(|m| m.as_str() == s)
    }

    pub fn needs_reference(self) -> bool {
        matches!(self, Method::Npo | Method::Undial)
    }

    pub fn uses_retain(self) -> bool {
        !matches!(self, Method::GradAscent)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub max_epochs: usize,
    pub batch_size: usize,
    /// Stop once every trained split reaches this answer-token accuracy.
    pub target_acc: f64,
    pub optimizer: OptimizerKind,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 3e-3,
            max_epochs: 200,
            batch_size: 16,
            target_acc: 0.95,
            optimizer: OptimizerKind::Adam,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct UnlearnConfig {
    pub method: Method,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Retain-term weight (every method except gradient ascent).
    pub alpha: f64,
    pub npo_beta: f64,
    pub simnpo_beta: f64,
    pub simnpo_gamma: f64,
    pub undial_beta: f64,
    pub optimizer: OptimizerKind,
    pub seed: u64,
}

impl Default for UnlearnConfig {
    fn default() -> Self {
        UnlearnConfig {
            method: Method::GradDiff,
            lr: 0.02,
            epochs: 3,
            batch_size: 8,
            alpha: 1.0,
            npo_beta: 0.5,
            simnpo_beta: 3.5,
            simnpo_gamma: 0.25,
            undial_beta: 10.0,
            optimizer: OptimizerKind::Sgd,
            seed: 0,
        }
    }
}

impl UnlearnConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || self.batch_size == 0 {
            return Err(Error::Config("learning rate and batch size must be positive".into()));
        }
        if !(self.npo_beta > 0.0 && self.simnpo_beta > 0.0 && self.undial_beta > 0.0) {
            return Err(Error::Config("beta hyperparameters must be positive".into()));
        }
        if !(self.alpha >= 0.0) {
            return Err(Error::Config("alpha must be non-negative".into()));
        }
        Ok(())
    }
}

/// One row of a training or unlearning curve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub forget_loss: f64,
    pub retain_loss: f64,
    pub forget_acc: f64,
    pub retain_acc: f64,
}

/// Mean answer CE and per-token accuracy of `model` on `samples`.
pub fn loss_and_accuracy(model: &Model, samples: &[Sample]) -> Result<(f64, f64)> {
    if samples.is_empty() {
        return Ok((0.0, 0.0));
    }
    let mut loss = 0.0;
    let mut hits = 0usize;
    let mut total = 0usize;
    for s in samples {
        let cache = forward(model, &s.input_tokens())?;
        loss += loss::answer_ce(&cache.logits, s).0;
        for (pos, tok) in s.answer_targets() {
            hits += (argmax(cache.logits.row(pos)) == tok) as usize;
            total += 1;
        }
    }
    Ok((loss / samples.len() as f64, hits as f64 / total as f64))
}

/// Per-token teacher-forced answer accuracy.
pub fn accuracy(model: &Model, samples: &[Sample]) -> Result<f64> {
    Ok(loss_and_accuracy(model, samples)?.1)
}

/// First index of the maximum.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

/// Autoregressive greedy continuation of `prompt` for `n` tokens.
pub fn greedy_decode(model: &Model, prompt: &[usize], n: usize) -> Result<Vec<usize>> {
    let mut seq = prompt.to_vec();
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let cache = forward(model, &seq)?;
        let next = argmax(cache.logits.row(seq.len() - 1));
        out.push(next);
        seq.push(next);
    }
    Ok(out)
}

fn epoch_log(model: &Model, epoch: usize, forget: &[Sample], retain: &[Sample]) -> Result<EpochLog> {
    let (forget_loss, forget_acc) = loss_and_accuracy(model, forget)?;
    let (retain_loss, retain_acc) = loss_and_accuracy(model, retain)?;
    Ok(EpochLog {
        epoch,
        forget_loss,
        retain_loss,
        forget_acc,
        retain_acc,
    })
}

/// Fits a freshly initialized model to `samples` with mean answer CE.
///
/// Stops early once every split present in `samples` reaches
/// `cfg.target_acc`; otherwise runs `cfg.max_epochs` epochs.
pub fn train(model_cfg: &ModelConfig, samples: &[Sample], cfg: &TrainConfig) -> Result<(Model, Vec<EpochLog>)> {
    if samples.is_empty() {
        return Err(Error::Input("cannot train on an empty dataset".into()));
    }
    if cfg.batch_size == 0 || !(cfg.lr > 0.0) {
        return Err(Error::Config("learning rate and batch size must be positive".into()));
    }
    let mut model = Model::init(model_cfg.clone())?;
    let by_split: BTreeMap<Split, Vec<Sample>> = samples.iter().fold(BTreeMap::new(), |mut m, s| {
        m.entry(s.split).or_insert_with(Vec::new).push(s.clone());
        m
    });
    let empty = Vec::new();
    let forget = by_split.get(&Split::Forget).unwrap_or(&empty);
    let retain = by_split.get(&Split::Retain).unwrap_or(&empty);
    let mut opt = Optimizer::new(cfg.optimizer, cfg.lr, &model.params);
    let mut rng = Rng::new(cfg.seed).fork(0x7a41);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut logs = Vec::new();
    let mut last_stable: Option<Box<Model>> = None;
    for epoch in 0..cfg.max_epochs {
        rng.shuffle(&mut order);
        for chunk in order.chunks(cfg.batch_size) {
            let scale = 1.0 / chunk.len() as f64;
            let mut grads = model.params.zeros_like();
            let mut batch_loss = 0.0;
            for &i in chunk {
                let s = &samples[i];
                let cache = forward(&model, &s.input_tokens())?;
                let (l, mut g) = loss::answer_ce(&cache.logits, s);
                g.scale(scale);
                batch_loss += l * scale;
                let mut sg = model.params.zeros_like();
                backward(&model, &cache, &g, Some(&mut sg))?;
                grads.add_assign(&sg);
            }
            if !batch_loss.is_finite() || !grads.is_finite() {
                return Err(Error::Diverged { epoch, last_stable });
            }
            opt.step(&mut model.params, &grads);
        }
        if !model.params.is_finite() {
            return Err(Error::Diverged { epoch, last_stable });
        }
        logs.push(epoch_log(&model, epoch, forget, retain)?);
        let mut done = true;
        for split_samples in by_split.values() {
            done &= accuracy_cached(&model, split_samples, forget, retain, logs.last())? >= cfg.target_acc;
        }
        last_stable = Some(Box::new(model.clone()));
        if done {
            break;
        }
    }
    Ok((model, logs))
}

/// Reuses the epoch log for splits it already covers.
fn accuracy_cached(
    model: &Model,
    split: &[Sample],
    forget: &[Sample],
    retain: &[Sample],
    log: Option<&EpochLog>,
) -> Result<f64> {
    match log {
        Some(l) if core::ptr::eq(split.as_ptr(), forget.as_ptr()) && !forget.is_empty() => Ok(l.forget_acc),
        Some(l) if core::ptr::eq(split.as_ptr(), retain.as_ptr()) && !retain.is_empty() => Ok(l.retain_acc),
        _ => accuracy(model, split),
    }
}

/// Trains from scratch on everything except the forget split.
pub fn retrain_oracle(model_cfg: &ModelConfig, samples: &[Sample], cfg: &TrainConfig) -> Result<(Model, Vec<EpochLog>)> {
    let kept: Vec<Sample> = samples.iter().filter(|s| s.split != Split::Forget).cloned().collect();
    train(model_cfg, &kept, cfg)
}

/// A forget-side sample with its mask weight and (optional) frozen
/// reference logits.
struct ForgetItem<'a> {
    sample: &'a Sample,
    weight: f64,
    reference: Option<&'a Tensor>,
}

fn forget_term(logits: &Tensor, item: &ForgetItem<'_>, cfg: &UnlearnConfig) -> Result<(f64, Tensor)> {
    let s = item.sample;
    let need_ref = || {
        item.reference
            .ok_or_else(|| Error::Config(format!("{} requires a reference model", cfg.method.as_str())))
    };
    Ok(match cfg.method {
        Method::GradAscent | Method::GradDiff => {
            let (l, mut g) = loss::answer_ce(logits, s);
            g.scale(-1.0);
            (-l, g)
        }
        Method::Npo => {
            let ref_lp = loss::answer_logprob(need_ref()?, s).0;
            loss::npo(logits, ref_lp, s, cfg.npo_beta)
        }
        Method::SimNpo => loss::simnpo(logits, s, cfg.simnpo_beta, cfg.simnpo_gamma),
        Method::Undial => loss::undial(logits, need_ref()?, s, cfg.undial_beta)?,
    })
}

/// `α · mean retain CE + (1/|forget|) Σ_j w_j ℓ_method(z_j)`.
fn objective(
    model: &Model,
    forget: &[ForgetItem<'_>],
    retain: &[Sample],
    cfg: &UnlearnConfig,
    want_grads: bool,
) -> Result<(f64, Option<Params>)> {
    let mut grads = want_grads.then(|| model.params.zeros_like());
    let mut total = 0.0;
    let mut accumulate = |cache: &crate::model::ActivationCache, value: f64, mut dlogits: Tensor, scale: f64| -> Result<()> {
        total += scale * value;
        if let Some(g) = grads.as_mut() {
            dlogits.scale(scale);
            let mut sg = model.params.zeros_like();
            backward(model, cache, &dlogits, Some(&mut sg))?;
            g.add_assign(&sg);
        }
        Ok(())
    };
    if cfg.method.uses_retain() && cfg.alpha != 0.0 && !retain.is_empty() {
        let scale = cfg.alpha / retain.len() as f64;
        for s in retain {
            let cache = forward(model, &s.input_tokens())?;
            let (l, g) = loss::answer_ce(&cache.logits, s);
            accumulate(&cache, l, g, scale)?;
        }
    }
    if !forget.is_empty() {
        let n = forget.len() as f64;
        for item in forget.iter().filter(|it| it.weight != 0.0) {
            let cache = forward(model, &item.sample.input_tokens())?;
            let (l, g) = forget_term(&cache.logits, item, cfg)?;
            accumulate(&cache, l, g, item.weight / n)?;
        }
    }
    if !total.is_finite() {
        return Err(Error::NonFinite("unlearning objective"));
    }
    Ok((total, grads))
}

fn reference_logits(reference: Option<&Model>, forget: &[Sample], method: Method) -> Result<Option<Vec<Tensor>>> {
    if !method.needs_reference() {
        return Ok(None);
    }
    let r = reference.ok_or_else(|| Error::Config(format!("{} requires a reference model", method.as_str())))?;
    forget
        .iter()
        .map(|s| Ok(forward(r, &s.input_tokens())?.logits))
        .collect::<Result<Vec<_>>>()
        .map(Some)
}

fn forget_items<'a>(forget: &'a [Sample], weights: Option<&[f64]>, refs: Option<&'a [Tensor]>) -> Result<Vec<ForgetItem<'a>>> {
    if let Some(w) = weights {
        if w.len() != forget.len() {
            return Err(Error::Input(format!("mask has {} weights for {} samples", w.len(), forget.len())));
        }
    }
    Ok(forget
        .iter()
        .enumerate()
        .map(|(i, s)| ForgetItem {
            sample: s,
            weight: weights.map_or(1.0, |w| w[i]),
            reference: refs.map(|r| &r[i]),
        })
        .collect())
}

/// Scalar unlearning objective for one forget/retain batch.
///
/// `mask_weights` (one per forget sample, default all ones) scale the forget
/// terms; `reference` is the frozen pre-unlearning model required by NPO and
/// UNDIAL.
pub fn unlearn_loss(
    model: &Model,
    reference: Option<&Model>,
    forget: &[Sample],
    retain: &[Sample],
    mask_weights: Option<&[f64]>,
    cfg: &UnlearnConfig,
) -> Result<f64> {
    let refs = reference_logits(reference, forget, cfg.method)?;
    let items = forget_items(forget, mask_weights, refs.as_deref())?;
    Ok(objective(model, &items, retain, cfg, false)?.0)
}

/// [`unlearn_loss`] together with its parameter gradient.
pub fn unlearn_loss_grads(
    model: &Model,
    reference: Option<&Model>,
    forget: &[Sample],
    retain: &[Sample],
    mask_weights: Option<&[f64]>,
    cfg: &UnlearnConfig,
) -> Result<(f64, Params)> {
    let refs = reference_logits(reference, forget, cfg.method)?;
    let items = forget_items(forget, mask_weights, refs.as_deref())?;
    let (l, g) = objective(model, &items, retain, cfg, true)?;
    Ok((l, g.expect("gradients requested")))
}

/// Streams retain minibatches from a reshuffled cycle.
pub(crate) struct RetainCycle<'a> {
    retain: &'a [Sample],
    cycle: IndexCycle,
}

impl<'a> RetainCycle<'a> {
    pub(crate) fn new(retain: &'a [Sample], rng: Rng) -> Self {
        RetainCycle {
            retain,
            cycle: IndexCycle::new(retain.len(), rng),
        }
    }

    pub(crate) fn next_batch(&mut self, n: usize) -> Vec<Sample> {
        self.cycle.next_batch(n).into_iter().map(|i| self.retain[i].clone()).collect()
    }
}

/// `steps` minibatch optimizer steps on the unlearning objective, starting
/// from `model` (also the frozen reference). Forget minibatches walk a
/// seeded shuffle of the forget set; each is paired with a retain minibatch
/// of the same size.
pub fn unlearn_steps(
    model: &Model,
    forget: &[Sample],
    mask_weights: &[f64],
    retain: &[Sample],
    cfg: &UnlearnConfig,
    steps: usize,
) -> Result<Model> {
    cfg.validate()?;
    let refs = reference_logits(Some(model), forget, cfg.method)?;
    let items = forget_items(forget, Some(mask_weights), refs.as_deref())?;
    let root = Rng::new(cfg.seed);
    let mut forget_cycle = IndexCycle::new(items.len(), root.fork(1));
    let mut retain_cycle = RetainCycle::new(retain, root.fork(2));
    let mut current = model.clone();
    let mut opt = Optimizer::new(cfg.optimizer, cfg.lr, &current.params);
    for _ in 0..steps {
        let batch: Vec<ForgetItem<'_>> = forget_cycle
            .next_batch(cfg.batch_size)
            .into_iter()
            .map(|i| ForgetItem {
                sample: items[i].sample,
                weight: items[i].weight,
                reference: items[i].reference,
            })
            .collect();
        let retain_batch = if cfg.method.uses_retain() {
            retain_cycle.next_batch(cfg.batch_size)
        } else {
            Vec::new()
        };
        let (_, grads) = objective(&current, &batch, &retain_batch, cfg, true)?;
        let grads = grads.expect("gradients requested");
        if !grads.is_finite() {
            return Err(Error::NonFinite("unlearning gradient"));
        }
        opt.step(&mut current.params, &grads);
    }
    Ok(current)
}

/// Endless reshuffled walk over `0..n`.
struct IndexCycle {
    order: Vec<usize>,
    cursor: usize,
    rng: Rng,
}

impl IndexCycle {
    fn new(n: usize, mut rng: Rng) -> Self {
        let mut order: Vec<usize> = (0..n).collect();
        rng.shuffle(&mut order);
        IndexCycle { order, cursor: 0, rng }
    }

    fn next_batch(&mut self, n: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(n);
        while out.len() < n.min(self.order.len()) {
            if self.cursor == self.order.len() {
                self.rng.shuffle(&mut self.order);
                self.cursor = 0;
            }
            out.push(self.order[self.cursor]);
            self.cursor += 1;
        }
        out
    }
}

/// Runs `cfg.epochs` epochs of minibatch unlearning on `forget`, pairing
/// each forget batch with an equally sized retain batch. The input model is
/// the frozen reference for methods that need one.
pub fn run_unlearning(
    model: &Model,
    forget: &[Sample],
    mask_weights: Option<&[f64]>,
    retain: &[Sample],
    cfg: &UnlearnConfig,
) -> Result<(Model, Vec<EpochLog>)> {
    cfg.validate()?;
    let refs = reference_logits(Some(model), forget, cfg.method)?;
    let items = forget_items(forget, mask_weights, refs.as_deref())?;
    let mut current = model.clone();
    let mut opt = Optimizer::new(cfg.optimizer, cfg.lr, &current.params);
    let root = Rng::new(cfg.seed);
    let mut order_rng = root.fork(1);
    let mut retain_cycle = RetainCycle::new(retain, root.fork(2));
    let mut order: Vec<usize> = (0..items.len()).collect();
    let mut logs = Vec::with_capacity(cfg.epochs);
    let mut last_stable = Box::new(current.clone());
    for epoch in 0..cfg.epochs {
        order_rng.shuffle(&mut order);
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<ForgetItem<'_>> = chunk
                .iter()
                .map(|&i| ForgetItem {
                    sample: items[i].sample,
                    weight: items[i].weight,
                    reference: items[i].reference,
                })
                .collect();
            let retain_batch = if cfg.method.uses_retain() {
                retain_cycle.next_batch(cfg.batch_size)
            } else {
                Vec::new()
            };
            let step = objective(&current, &batch, &retain_batch, cfg, true);
            let grads = match step {
                Ok((_, Some(g))) if g.is_finite() => g,
                Ok(_) | Err(Error::NonFinite(_)) => {
                    return Err(Error::Diverged {
                        epoch,
                        last_stable: Some(last_stable),
                    })
                }
                Err(e) => return Err(e),
            };
            opt.step(&mut current.params, &grads);
        }
        if !current.params.is_finite() {
            return Err(Error::Diverged {
                epoch,
                last_stable: Some(last_stable),
            });
        }
        match epoch_log(&current, epoch, forget, retain) {
            Ok(log) => logs.push(log),
            Err(Error::NonFinite(_)) => {
                return Err(Error::Diverged {
                    epoch,
                    last_stable: Some(last_stable),
                })
            }
            Err(e) => return Err(e),
        }
        last_stable = Box::new(current.clone());
    }
    Ok((current, logs))
}

/// Jensen–Shannon divergence (natural log) between two distributions.
pub fn jsd(p: &[f64], q: &[f64]) -> f64 {
    let mut total = 0.0;
    for (&a, &b) in p.iter().zip(q) {
        let m = 0.5 * (a + b);
        if a > 0.0 {
            total += 0.5 * a * libm::log(a / m);
        }
        if b > 0.0 {
            total += 0.5 * b * libm::log(b / m);
        }
    }
    total.clamp(0.0, core::f64::consts::LN_2)
}

/// Mean JSD between next-token distributions of two models over every
/// answer position of `samples`.
pub fn mean_jsd(a: &Model, b: &Model, samples: &[Sample]) -> Result<f64> {
    let mut total = 0.0;
    let mut n = 0usize;
    for s in samples {
        let tokens = s.input_tokens();
        let la = forward(a, &tokens)?.logits;
        let lb = forward(b, &tokens)?.logits;
        for (pos, _) in s.answer_targets() {
            let p: Vec<f64> = log_softmax_row(la.row(pos)).into_iter().map(libm::exp).collect();
            let q: Vec<f64> = log_softmax_row(lb.row(pos)).into_iter().map(libm::exp).collect();
            total += jsd(&p, &q);
            n += 1;
        }
    }
    Ok(if n == 0 { 0.0 } else { total / n as f64 })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub forget_acc: f64,
    pub retain_acc: f64,
    pub general_acc: f64,
    /// `1 − forget_acc`.
    pub unlearn_efficacy: f64,
    /// Mean JSD to the retrain oracle over forget answer positions, in nats.
    pub jsd_to_retrain: Option<f64>,
    pub seed: Option<u64>,
    pub method: Option<Method>,
}

/// Sample sets an evaluation runs on.
#[derive(Debug, Clone, Copy)]
pub struct EvalSets<'a> {
    pub forget: &'a [Sample],
    pub retain: &'a [Sample],
    pub general: &'a [Sample],
}

pub fn evaluate(model: &Model, sets: EvalSets<'_>, retrain: Option<&Model>) -> Result<EvalReport> {
    let forget_acc = accuracy(model, sets.forget)?;
    Ok(EvalReport {
        forget_acc,
        retain_acc: accuracy(model, sets.retain)?,
        general_acc: accuracy(model, sets.general)?,
        unlearn_efficacy: 1.0 - forget_acc,
        jsd_to_retrain: retrain.map(|r| mean_jsd(model, r, sets.forget)).transpose()?,
        seed: None,
        method: None,
    })
}
