//! Fine-tuning loop, learning-rate schedule, entity-level evaluation and the
//! ablation harnesses.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::Dropout;
use crate::embed::Vocab;
use crate::error::{Error, Result};
use crate::fixtures::{gradcheck_config, six_word_page};
use crate::model::{Model, ModelConfig, Prepared};
use crate::numerics::{grad_check, AdamState, GradCheckOptions, ParamStore, Tape};
use crate::tasks::synth::Corpus;
use crate::tasks::{bio_decode, Counts, DecodeMode, EntityTally, Scores};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Peak learning rate.
    pub lr: f64,
    /// Linear warmup length; `None` uses a tenth of the total.
    pub warmup_steps: Option<usize>,
    /// Optimizer steps; `None` runs `epochs` passes over the training split.
    pub total_steps: Option<usize>,
    pub weight_decay: f64,
    /// Documents per optimizer step.
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Steps between evaluations; 0 evaluates at the end of every epoch.
    pub eval_every: usize,
    /// Share of the corpus held out for evaluation (taken from the end).
    pub eval_fraction: f64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub clip_norm: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 5e-5,
            warmup_steps: None,
            total_steps: None,
            weight_decay: 0.01,
            batch_size: 1,
            epochs: 20,
            seed: 0,
            eval_every: 0,
            eval_fraction: 0.2,
            clip_norm: Some(1.0),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr must be positive");
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return bad("batch_size and epochs must be positive");
        }
        if !(0.0..1.0).contains(&self.eval_fraction) {
            return bad("eval_fraction must lie in [0, 1)");
        }
        if !(self.weight_decay >= 0.0) {
            return bad("weight_decay must be non-negative");
        }
        if matches!(self.clip_norm, Some(c) if !(c > 0.0)) {
            return bad("clip_norm must be positive");
        }
        if self.total_steps == Some(0) {
            return bad("total_steps must be positive");
        }
        if let (Some(w), Some(t)) = (self.warmup_steps, self.total_steps) {
            if w > t {
                return bad("warmup_steps must not exceed total_steps");
            }
        }
        Ok(())
    }

    /// Total and warmup steps for a training split of `n` documents.
    pub fn schedule_for(&self, n: usize) -> Schedule {
        let per_epoch = n.div_ceil(self.batch_size).max(1);
        let total = self.total_steps.unwrap_or(per_epoch * self.epochs);
        let warmup = self.warmup_steps.unwrap_or(total / 10).min(total);
        Schedule { peak: self.lr, warmup, total }
    }
}

/// Linear warmup then linear decay to zero.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Schedule {
    pub peak: f64,
    pub warmup: usize,
    pub total: usize,
}

pub fn lr_schedule(step: usize, s: &Schedule) -> f64 {
    if step >= s.total {
        return 0.0;
    }
    if step < s.warmup {
        return s.peak * step as f64 / s.warmup as f64;
    }
    s.peak * (s.total - step) as f64 / (s.total - s.warmup) as f64
}

/// A model configuration and a training configuration, as read from `train --config`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let c: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        c.model.validate()?;
        c.train.validate()?;
        Ok(c)
    }

    /// The desk-scale reference configuration.
    pub fn reference() -> Self {
        Self {
            model: ModelConfig { d: 64, heads: 4, fine_layers: 2, coarse_layers: 1, grid: [4, 4], vocab_size: 2048, ..ModelConfig::default() },
            train: TrainConfig { lr: REFERENCE_LR, epochs: 20, ..TrainConfig::default() },
        }
    }
}

/// Peak learning rate of the reference configuration. Models here start from
/// random weights rather than pretrained ones, which needs a larger step.
pub const REFERENCE_LR: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: usize,
    /// Mean training loss since the previous record.
    pub loss: f64,
    pub f1: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub micro: Scores,
    pub counts: Counts,
    pub per_type: BTreeMap<String, Scores>,
    pub documents: usize,
}

impl EvalReport {
    pub fn from_tally(tally: &EntityTally, documents: usize) -> Self {
        Self {
            micro: tally.micro.scores(),
            counts: tally.micro,
            per_type: tally.per_type.iter().map(|(k, c)| (k.clone(), c.scores())).collect(),
            documents,
        }
    }
}

/// Entity-level scores of word-tag predictions against gold word tags.
pub fn score_tags<S: AsRef<str>, T: AsRef<str>>(pred: &[Vec<S>], gold: &[Vec<T>]) -> Result<EvalReport> {
    if pred.len() != gold.len() {
        return Err(Error::Invalid(format!("{} predicted documents but {} gold", pred.len(), gold.len())));
    }
    let mut tally = EntityTally::default();
    for (p, g) in pred.iter().zip(gold) {
        if p.len() != g.len() {
            return Err(Error::Invalid(format!("{} predicted tags but {} gold", p.len(), g.len())));
        }
        tally.add(&bio_decode(p, DecodeMode::Lenient)?, &bio_decode(g, DecodeMode::Lenient)?);
    }
    Ok(EvalReport::from_tally(&tally, pred.len()))
}

fn gold_tags(doc: &Prepared) -> Result<Vec<String>> {
    doc.graph
        .page()
        .labels()
        .map(|l| l.to_vec())
        .ok_or_else(|| Error::Invalid("evaluation document has no labels".into()))
}

/// Predicted word tags for every document, in order.
pub fn predict_all(model: &Model, store: &ParamStore, docs: &[Prepared]) -> Result<Vec<Vec<String>>> {
    docs.iter().map(|d| model.predict(store, d)).collect()
}

pub fn evaluate(model: &Model, store: &ParamStore, docs: &[Prepared]) -> Result<EvalReport> {
    let pred = predict_all(model, store, docs)?;
    let gold = docs.iter().map(gold_tags).collect::<Result<Vec<_>>>()?;
    score_tags(&pred, &gold)
}

/// Prepares every page of `corpus` for `model`, naming the failing file on error.
pub fn prepare_corpus(model: &Model, corpus: &Corpus) -> Result<Vec<Prepared>> {
    corpus
        .docs
        .iter()
        .map(|(name, page)| {
            model.prepare(page, Some(&corpus.dir)).map_err(|e| match e {
                Error::Invalid(m) => Error::Invalid(format!("{name}: {m}")),
                other => other,
            })
        })
        .collect()
}

/// Loads a checkpoint and scores it on every document of `corpus`.
pub fn evaluate_checkpoint(path: &Path, corpus: &Corpus) -> Result<(EvalReport, Vec<Vec<String>>)> {
    let (model, store, _) = Model::load(path)?;
    let docs = prepare_corpus(&model, corpus)?;
    let pred = predict_all(&model, &store, &docs)?;
    let gold = docs.iter().map(gold_tags).collect::<Result<Vec<_>>>()?;
    Ok((score_tags(&pred, &gold)?, pred))
}

pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const LOG_FILE: &str = "metrics.jsonl";
pub const NAN_DUMP_FILE: &str = "nan_dump.json";

#[derive(Debug)]
pub struct TrainOutcome {
    pub model: Model,
    /// Parameters at the best evaluation.
    pub store: ParamStore,
    pub log: Vec<LogRecord>,
    pub best_f1: f64,
    pub best_step: usize,
    /// Scores of the best parameters on the held-out split.
    pub eval: EvalReport,
    pub seconds: f64,
}

/// Splits `corpus` into training and held-out documents.
pub fn split_corpus(corpus: &Corpus, eval_fraction: f64) -> Result<(Corpus, Corpus)> {
    let n = corpus.len();
    let held = ((n as f64) * eval_fraction).round() as usize;
    if n == 0 || held >= n {
        return Err(Error::Invalid(format!("corpus of {n} documents leaves nothing to train on")));
    }
    let held = if eval_fraction > 0.0 { held.max(1) } else { 0 };
    Ok(corpus.split(n - held))
}

/// Trains on the leading documents of `corpus` and evaluates on the held-out
/// tail (on the training split itself when nothing is held out). The best
/// evaluation's parameters are kept; with `out` set they are written there
/// together with the metric log.
pub fn train(corpus: &Corpus, model_cfg: &ModelConfig, cfg: &TrainConfig, out: Option<&Path>) -> Result<TrainOutcome> {
    cfg.validate()?;
    model_cfg.validate()?;
    let start = Instant::now();
    let (train_split, eval_split) = split_corpus(corpus, cfg.eval_fraction)?;
    let vocab = Vocab::build(train_split.pages().flat_map(|p| p.words().iter().map(|w| w.text.as_str())), model_cfg.vocab_size);
    let (model, mut store) = Model::init(model_cfg.clone(), vocab)?;
    let train_docs = prepare_corpus(&model, &train_split)?;
    if train_docs.iter().any(|d| d.targets.is_none()) {
        return Err(Error::Invalid("every training document needs labels".into()));
    }
    let eval_docs = if eval_split.is_empty() { train_docs.clone() } else { prepare_corpus(&model, &eval_split)? };

    if let Some(dir) = out {
        fs::create_dir_all(dir)?;
    }
    let mut log_file = match out {
        Some(dir) => Some(fs::File::create(dir.join(LOG_FILE))?),
        None => None,
    };

    let schedule = cfg.schedule_for(train_docs.len());
    let mut adam = AdamState::new(&store, cfg.weight_decay);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut drop_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_d509);
    let mut order: Vec<usize> = (0..train_docs.len()).collect();
    let mut best: Option<(f64, usize, ParamStore)> = None;
    let mut log = Vec::new();
    let (mut loss_sum, mut loss_count) = (0.0, 0usize);
    let mut step = 0;
    let mut evaluated_at = None;

    let mut record = |step: usize, store: &ParamStore, loss_sum: &mut f64, loss_count: &mut usize| -> Result<()> {
        let report = evaluate(&model, store, &eval_docs)?;
        let rec = LogRecord {
            step,
            loss: if *loss_count > 0 { *loss_sum / *loss_count as f64 } else { f64::NAN },
            f1: report.micro.f1,
            lr: lr_schedule(step, &schedule),
        };
        (*loss_sum, *loss_count) = (0.0, 0);
        if let Some(f) = log_file.as_mut() {
            writeln!(f, "{}", serde_json::to_string(&rec)?)?;
        }
        log.push(rec);
        if best.as_ref().is_none_or(|(f1, _, _)| report.micro.f1 > *f1) {
            best = Some((report.micro.f1, step, store.clone()));
        }
        Ok(())
    };

    'outer: loop {
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            if step >= schedule.total {
                break 'outer;
            }
            let mut grads = store.zeros_like();
            let mut batch_loss = Vec::with_capacity(batch.len());
            for &i in batch {
                let mut tape = Tape::new();
                let mut dropout = Dropout { p: model_cfg.dropout, rng: &mut drop_rng };
                let loss = model.loss(&mut tape, &store, &train_docs[i], Some(&mut dropout))?;
                let v = tape.value(loss).item();
                batch_loss.push(v);
                if !v.is_finite() {
                    break;
                }
                tape.backward(loss, Some(&mut grads))?;
            }
            if batch_loss.iter().any(|v| !v.is_finite()) || !grads.all_finite() {
                let names: Vec<&str> = batch.iter().map(|&i| train_split.docs[i].0.as_str()).collect();
                let dump = serde_json::json!({
                    "step": step,
                    "lr": lr_schedule(step, &schedule),
                    "documents": names,
                    "losses": batch_loss.iter().map(|v| v.to_string()).collect::<Vec<_>>(),
                    "grad_norm": grads.global_norm().to_string(),
                });
                let mut msg = format!("non-finite loss or gradient at step {step} on {names:?}");
                if let Some(dir) = out {
                    let p = dir.join(NAN_DUMP_FILE);
                    fs::write(&p, serde_json::to_string_pretty(&dump)?)?;
                    msg.push_str(&format!("; diagnostics in {}", p.display()));
                }
                return Err(Error::Numeric(msg));
            }
            grads.scale(1.0 / batch.len() as f64);
            if let Some(c) = cfg.clip_norm {
                grads.clip_global_norm(c);
            }
            adam.step(&mut store, &grads, lr_schedule(step, &schedule))?;
            step += 1;
            loss_sum += batch_loss.iter().sum::<f64>();
            loss_count += batch_loss.len();
            if cfg.eval_every > 0 && step % cfg.eval_every == 0 {
                record(step, &store, &mut loss_sum, &mut loss_count)?;
                evaluated_at = Some(step);
            }
        }
        if cfg.eval_every == 0 {
            record(step, &store, &mut loss_sum, &mut loss_count)?;
            evaluated_at = Some(step);
        }
    }
    if evaluated_at != Some(step) {
        record(step, &store, &mut loss_sum, &mut loss_count)?;
    }
    let (best_f1, best_step, best_store) = best.expect("at least one evaluation ran");
    let eval = evaluate(&model, &best_store, &eval_docs)?;
    if let Some(dir) = out {
        model.save(
            &dir.join(CHECKPOINT_FILE),
            &best_store,
            serde_json::json!({"train": cfg, "best_step": best_step, "best_f1": best_f1}),
        )?;
    }
    Ok(TrainOutcome { model, store: best_store, log, best_f1, best_step, eval, seconds: start.elapsed().as_secs_f64() })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AblationAxis {
    Components,
    CoarseLayers,
    Radius,
}

impl std::str::FromStr for AblationAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "components" => Ok(Self::Components),
            "coarse_layers" | "coarse-layers" => Ok(Self::CoarseLayers),
            "radius" => Ok(Self::Radius),
            _ => Err(Error::Invalid(format!("unknown ablation axis {s:?}; expected components, coarse_layers or radius"))),
        }
    }
}

pub const RADIUS_GRID: [f64; 5] = [5.0, 10.0, 30.0, 50.0, 100.0];
pub const FULL_MODEL: &str = "full";
pub const WITHOUT_COARSE: &str = "w/o Coarse-grained Encoder";
pub const WITHOUT_COMMON_SENSE: &str = "w/o Common Sense Enhancement";
pub const WITHOUT_AGGREGATION: &str = "w/o Aggregation with Cross-grained Edges";

/// Model with the coarse encoder removed.
pub fn without_coarse(c: &ModelConfig) -> ModelConfig {
    ModelConfig { coarse_layers: 0, ..c.clone() }
}

/// Model without common-sense vectors.
pub fn without_common_sense(c: &ModelConfig) -> ModelConfig {
    ModelConfig { common_sense: Vec::new(), custom_rules: Vec::new(), ..c.clone() }
}

/// The fine-grained encoder alone: no aggregation, coarse encoder or common sense.
pub fn without_aggregation(c: &ModelConfig) -> ModelConfig {
    ModelConfig { bypass_aggregation: true, ..without_common_sense(&without_coarse(c)) }
}

/// Named model variants along one axis.
pub fn ablation_variants(base: &ModelConfig, axis: AblationAxis) -> Vec<(String, ModelConfig)> {
    match axis {
        AblationAxis::Components => vec![
            (FULL_MODEL.to_string(), base.clone()),
            (WITHOUT_COARSE.to_string(), without_coarse(base)),
            (WITHOUT_COMMON_SENSE.to_string(), without_common_sense(base)),
            (WITHOUT_AGGREGATION.to_string(), without_aggregation(base)),
        ],
        AblationAxis::CoarseLayers => {
            (0..=5).map(|m| (format!("M={m}"), ModelConfig { coarse_layers: m, ..base.clone() })).collect()
        }
        AblationAxis::Radius => {
            RADIUS_GRID.iter().map(|&r| (format!("r={r}"), ModelConfig { radius: r, ..base.clone() })).collect()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationRow {
    pub run: String,
    pub seed: u64,
    pub f1: f64,
    pub precision: f64,
    pub recall: f64,
}

/// Seed-averaged result of one variant.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationSummary {
    pub run: String,
    pub mean_f1: f64,
    pub seeds: usize,
}

/// Trains every variant along `axis` once per seed; the seed sets both the
/// parameter initialization and the data order.
pub fn ablate(corpus: &Corpus, base: &RunConfig, axis: AblationAxis, seeds: &[u64]) -> Result<Vec<AblationRow>> {
    if seeds.is_empty() {
        return Err(Error::Invalid("ablation needs at least one seed".into()));
    }
    let mut rows = Vec::new();
    for (run, model_cfg) in ablation_variants(&base.model, axis) {
        for &seed in seeds {
            let m = ModelConfig { seed, ..model_cfg.clone() };
            let t = TrainConfig { seed, ..base.train.clone() };
            let outcome = train(corpus, &m, &t, None)?;
            let s = outcome.eval.micro;
            rows.push(AblationRow { run: run.clone(), seed, f1: s.f1, precision: s.precision, recall: s.recall });
        }
    }
    Ok(rows)
}

pub fn summarize(rows: &[AblationRow]) -> Vec<AblationSummary> {
    let mut out: Vec<AblationSummary> = Vec::new();
    for r in rows {
        match out.iter_mut().find(|s| s.run == r.run) {
            Some(s) => {
                s.mean_f1 += r.f1;
                s.seeds += 1;
            }
            None => out.push(AblationSummary { run: r.run.clone(), mean_f1: r.f1, seeds: 1 }),
        }
    }
    for s in &mut out {
        s.mean_f1 /= s.seeds as f64;
    }
    out
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut s = String::from("run,seed,f1,precision,recall\n");
    for r in rows {
        s.push_str(&format!("{},{},{},{},{}\n", r.run, r.seed, r.f1, r.precision, r.recall));
    }
    s
}

/// Result of the end-to-end finite-difference check.
#[derive(Debug, Clone, Serialize)]
pub struct GradCheckSummary {
    /// Max relative error over elements with |gradient| ≥ `resolution`.
    pub max_rel_error: f64,
    /// Max relative error over every element.
    pub strict_max_rel_error: f64,
    pub resolution: f64,
    pub checked: usize,
    pub unresolved: usize,
    pub worst_param: Option<String>,
    pub seconds: f64,
}

/// Gradients below this cannot be resolved by central differences at h=1e-5.
pub const GRADCHECK_RESOLUTION: f64 = 1e-6;

/// Checks every parameter element of the d=16, N=2, M=1, K=4 model on the
/// six-word page against central differences of the training loss.
pub fn gradcheck_suite(seed: u64) -> Result<GradCheckSummary> {
    let start = Instant::now();
    let page = six_word_page();
    let cfg = gradcheck_config(seed);
    let vocab = Vocab::build(page.words().iter().map(|w| w.text.as_str()), cfg.vocab_size);
    let (model, store) = Model::init(cfg, vocab)?;
    let doc = model.prepare(&page, None)?;
    let report = grad_check(
        &store,
        &[],
        |tape, s| model.loss(tape, s, &doc, None),
        &GradCheckOptions { min_magnitude: GRADCHECK_RESOLUTION, ..GradCheckOptions::default() },
    )?;
    Ok(GradCheckSummary {
        max_rel_error: report.max_rel_error,
        strict_max_rel_error: report.max_rel_error.max(report.unresolved_max_rel_error),
        resolution: GRADCHECK_RESOLUTION,
        checked: report.checked,
        unresolved: report.unresolved,
        worst_param: report.worst.map(|w| w.param),
        seconds: start.elapsed().as_secs_f64(),
    })
}

/// Writes `text` to `path`, creating parent directories.
pub fn write_file(path: &Path, text: &str) -> Result<PathBuf> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, text)?;
    Ok(path.to_path_buf())
}

#[cfg(test)]
mod tests;
