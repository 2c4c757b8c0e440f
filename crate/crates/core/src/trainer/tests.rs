use super::*;
use crate::doc::Page;
use crate::fixtures::{gradcheck_config, six_word_page, vocab_for};
use crate::tasks::synth::{synth_generate, SynthParams};
use crate::tasks::{bio_decode, entity_f1, Entity};

fn tiny_corpus(n: usize) -> Corpus {
    let params = SynthParams { max_words: 16, ..SynthParams::default() };
    Corpus::from_pages("/nonexistent", synth_generate(11, n, &params).unwrap().into_iter().map(|d| d.page).collect())
}

fn tiny_model() -> ModelConfig {
    ModelConfig { max_len: 64, ..gradcheck_config(0) }
}

fn tiny_train(epochs: usize) -> TrainConfig {
    TrainConfig { lr: 3e-3, epochs, eval_fraction: 0.25, ..TrainConfig::default() }
}

#[test]
fn schedule_endpoints_and_shape() {
    let s = Schedule { peak: 2.0, warmup: 10, total: 110 };
    assert_eq!(lr_schedule(0, &s), 0.0);
    assert_eq!(lr_schedule(5, &s), 1.0);
    assert_eq!(lr_schedule(10, &s), 2.0);
    assert_eq!(lr_schedule(60, &s), 1.0);
    assert_eq!(lr_schedule(110, &s), 0.0);
    assert_eq!(lr_schedule(500, &s), 0.0);
    // Continuous at the warmup boundary: neighbours differ by one slope step.
    let up = s.peak / s.warmup as f64;
    let down = s.peak / (s.total - s.warmup) as f64;
    assert!((lr_schedule(9, &s) - (2.0 - up)).abs() < 1e-15);
    assert!((lr_schedule(11, &s) - (2.0 - down)).abs() < 1e-15);
    let no_warmup = Schedule { peak: 1.0, warmup: 0, total: 4 };
    assert_eq!(lr_schedule(0, &no_warmup), 1.0);
}

#[test]
fn schedule_from_config() {
    let c = TrainConfig { batch_size: 3, epochs: 2, ..TrainConfig::default() };
    let s = c.schedule_for(10);
    assert_eq!((s.total, s.warmup), (8, 0));
    let c = TrainConfig { warmup_steps: Some(5), total_steps: Some(50), ..TrainConfig::default() };
    assert_eq!(c.schedule_for(3), Schedule { peak: 5e-5, warmup: 5, total: 50 });
}

#[test]
fn config_validation() {
    assert!(TrainConfig::default().validate().is_ok());
    for bad in [
        TrainConfig { lr: 0.0, ..TrainConfig::default() },
        TrainConfig { batch_size: 0, ..TrainConfig::default() },
        TrainConfig { eval_fraction: 1.0, ..TrainConfig::default() },
        TrainConfig { warmup_steps: Some(9), total_steps: Some(3), ..TrainConfig::default() },
        TrainConfig { clip_norm: Some(0.0), ..TrainConfig::default() },
    ] {
        assert!(bad.validate().is_err(), "{bad:?}");
    }
    let text = r#"{"model": {"d": 32, "heads": 4}, "train": {"lr": 0.001, "epochs": 3}}"#;
    let rc = RunConfig::from_json(text).unwrap();
    assert_eq!((rc.model.d, rc.train.epochs, rc.train.weight_decay), (32, 3, 0.01));
    assert!(RunConfig::from_json(r#"{"train": {"learning_rate": 1}}"#).is_err());
}

#[test]
fn gold_predictions_score_one() {
    let page = six_word_page();
    let gold = vec![page.labels().unwrap().to_vec()];
    let r = score_tags(&gold, &gold).unwrap();
    assert_eq!(r.micro.f1, 1.0);
    assert_eq!(r.per_type["ANSWER"].f1, 1.0);
    let empty = vec![vec!["O".to_string(); gold[0].len()]];
    let r = score_tags(&empty, &gold).unwrap();
    assert_eq!(r.micro.recall, 0.0);
    assert!(score_tags(&empty, &[vec!["O"]]).is_err());
}

#[test]
fn evaluation_matches_recomputed_f1() {
    let corpus = tiny_corpus(6);
    let pages: Vec<&Page> = corpus.pages().collect();
    let (model, store) = Model::init(tiny_model(), vocab_for(&pages, 32)).unwrap();
    let docs = prepare_corpus(&model, &corpus).unwrap();
    let report = evaluate(&model, &store, &docs).unwrap();
    let preds = predict_all(&model, &store, &docs).unwrap();
    let (mut pred_all, mut gold_all) = (Vec::new(), Vec::new());
    let mut offset = 0;
    for (p, page) in preds.iter().zip(&pages) {
        // Shift spans so every document occupies its own index range.
        let shift = |e: Entity| Entity::new(e.kind, e.start + offset, e.end + offset);
        pred_all.extend(bio_decode(p, DecodeMode::Lenient).unwrap().into_iter().map(shift));
        gold_all.extend(bio_decode(page.labels().unwrap(), DecodeMode::Lenient).unwrap().into_iter().map(shift));
        offset += p.len();
    }
    let s = entity_f1(&pred_all, &gold_all);
    assert_eq!(report.micro, s);
}

#[test]
fn one_step_updates_every_group() {
    let corpus = tiny_corpus(2);
    let cfg = TrainConfig { total_steps: Some(1), eval_fraction: 0.0, warmup_steps: Some(0), ..tiny_train(1) };
    let out = train(&corpus, &tiny_model(), &cfg, None).unwrap();
    let (_, init) = Model::init(tiny_model(), out.model.vocab.clone()).unwrap();
    // The single evaluation follows the step, so the kept store is the updated one.
    assert_eq!(out.log.len(), 1);
    for ((_, name, a), (_, _, b)) in init.iter().zip(out.store.iter()) {
        assert!(a.max_abs_diff(b) > 0.0, "{name} did not move");
    }
}

#[test]
fn training_is_deterministic_and_writes_outputs() {
    let corpus = tiny_corpus(8);
    let dir = tempfile::tempdir().unwrap();
    let cfg = TrainConfig { eval_every: 2, ..tiny_train(2) };
    let a = train(&corpus, &tiny_model(), &cfg, Some(dir.path())).unwrap();
    let b = train(&corpus, &tiny_model(), &cfg, None).unwrap();
    assert_eq!(a.log, b.log);
    assert_eq!(a.store, b.store);
    assert_eq!(a.log.iter().map(|r| r.step).collect::<Vec<_>>(), vec![2, 4, 6, 8, 10, 12]);
    let lines = fs::read_to_string(dir.path().join(LOG_FILE)).unwrap();
    let parsed: Vec<LogRecord> = lines.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(parsed, a.log);
    let (_, eval_split) = split_corpus(&corpus, cfg.eval_fraction).unwrap();
    let (report, _) = evaluate_checkpoint(&dir.path().join(CHECKPOINT_FILE), &eval_split).unwrap();
    assert_eq!(report, a.eval);
    assert_eq!(report.micro.f1, a.best_f1);
}

#[test]
fn nan_loss_aborts_with_dump() {
    let corpus = tiny_corpus(3);
    let dir = tempfile::tempdir().unwrap();
    let cfg = TrainConfig { lr: 1e300, warmup_steps: Some(0), ..tiny_train(3) };
    let err = train(&corpus, &tiny_model(), &cfg, Some(dir.path())).unwrap_err();
    assert!(matches!(err, Error::Numeric(_)), "{err}");
    let dump: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join(NAN_DUMP_FILE)).unwrap()).unwrap();
    assert!(dump["documents"].as_array().is_some_and(|d| !d.is_empty()));
}

#[test]
fn unlabeled_corpus_is_rejected() {
    let mut corpus = tiny_corpus(3);
    let page = &corpus.docs[0].1;
    let bare = Page::new(page.width(), page.height(), page.words().to_vec(), page.segments().to_vec(), None, None).unwrap();
    corpus.docs[0].1 = bare;
    assert!(train(&corpus, &tiny_model(), &tiny_train(1), None).unwrap_err().is_validation());
}

#[test]
fn variants_follow_axis() {
    let base = ModelConfig::default();
    let names: Vec<String> = ablation_variants(&base, AblationAxis::Components).into_iter().map(|v| v.0).collect();
    assert_eq!(names, [FULL_MODEL, WITHOUT_COARSE, WITHOUT_COMMON_SENSE, WITHOUT_AGGREGATION]);
    let radii: Vec<f64> = ablation_variants(&base, AblationAxis::Radius).iter().map(|v| v.1.radius).collect();
    assert_eq!(radii, [5.0, 10.0, 30.0, 50.0, 100.0]);
    let m: Vec<usize> = ablation_variants(&base, AblationAxis::CoarseLayers).iter().map(|v| v.1.coarse_layers).collect();
    assert_eq!(m, [0, 1, 2, 3, 4, 5]);
    let w = without_aggregation(&base);
    assert!(w.bypass_aggregation && w.coarse_layers == 0 && w.common_sense.is_empty());
    assert!("nope".parse::<AblationAxis>().is_err());
}

#[test]
fn ablation_table() {
    let corpus = tiny_corpus(4);
    let rc = RunConfig { model: tiny_model(), train: TrainConfig { total_steps: Some(2), ..tiny_train(1) } };
    let rows = ablate(&corpus, &rc, AblationAxis::Radius, &[0, 1]).unwrap();
    assert_eq!(rows.len(), 10);
    let csv = ablation_csv(&rows);
    assert!(csv.starts_with("run,seed,f1,precision,recall\nr=5,0,"));
    assert_eq!(csv.lines().count(), 11);
    let s = summarize(&rows);
    assert_eq!(s.len(), 5);
    assert!(s.iter().all(|r| r.seeds == 2));
    assert!((s[0].mean_f1 - (rows[0].f1 + rows[1].f1) / 2.0).abs() < 1e-15);
}

#[test]
fn clipping_never_increases_norm() {
    let corpus = tiny_corpus(1);
    let pages: Vec<&Page> = corpus.pages().collect();
    let (model, store) = Model::init(tiny_model(), vocab_for(&pages, 32)).unwrap();
    let doc = model.prepare(pages[0], None).unwrap();
    let mut tape = Tape::new();
    let loss = model.loss(&mut tape, &store, &doc, None).unwrap();
    let mut g = store.zeros_like();
    tape.backward(loss, Some(&mut g)).unwrap();
    let before = g.global_norm();
    for c in [before * 2.0, before, before / 3.0] {
        let mut h = g.clone();
        h.clip_global_norm(c);
        assert!(h.global_norm() <= before * (1.0 + 1e-12));
        assert!(h.global_norm() <= c * (1.0 + 1e-12));
    }
}
