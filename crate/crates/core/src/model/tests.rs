use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::doc::{Segment, Word};
use crate::fixtures::{gradcheck_config, six_word_page, three_segment_page, vocab_for};
use crate::graph::NodeKind;
use crate::numerics::params::uniform;
use crate::numerics::{grad_check, GradCheckOptions};
use crate::tasks::synth::{synth_generate, SynthParams};

fn small(page: &Page, cfg: ModelConfig) -> (Model, ParamStore, Prepared) {
    let (model, store) = Model::init(cfg, vocab_for(&[page], 32)).unwrap();
    let doc = model.prepare(page, None).unwrap();
    (model, store, doc)
}

fn random_rows(rows: usize, cols: usize, seed: u64) -> Tensor {
    uniform(&[rows, cols], -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

#[test]
fn config_validation() {
    assert!(ModelConfig::default().validate().is_ok());
    let bad = [
        ModelConfig { heads: 5, ..ModelConfig::default() },
        ModelConfig { fine_layers: 0, ..ModelConfig::default() },
        ModelConfig { coarse_layers: 6, ..ModelConfig::default() },
        ModelConfig { grid: [0, 3], ..ModelConfig::default() },
        ModelConfig { rel_1d_buckets: 7, ..ModelConfig::default() },
        ModelConfig { dropout: 1.0, ..ModelConfig::default() },
        ModelConfig { common_sense: vec!["NOPE".into()], ..ModelConfig::default() },
        ModelConfig { max_len: 49, ..ModelConfig::default() },
    ];
    for c in bad {
        assert!(c.validate().is_err(), "{c:?}");
    }
    let json = serde_json::to_string(&gradcheck_config(3)).unwrap();
    assert_eq!(ModelConfig::from_json(&json).unwrap(), gradcheck_config(3));
    assert!(ModelConfig::from_json(r#"{"unknown": 1}"#).is_err());
}

#[test]
fn aggregate_sums_children() {
    let page = three_segment_page();
    let (model, store, doc) = small(&page, ModelConfig { grid: [1, 1], ..gradcheck_config(0) });
    // Tokens: "fax", ":", "555", "-", "0100", "notes" → segments 0,0,1,1,1,2
    assert_eq!(doc.token_parent, vec![0, 0, 1, 1, 1, 2]);
    let rows: Vec<Vec<f64>> = vec![vec![1.0, 2.0], vec![3.0, 4.0], vec![0.5; 2], vec![1.0; 2], vec![2.0; 2], vec![7.0, 8.0], vec![9.0, 9.0]];
    let mut tape = Tape::new();
    let h = tape.constant(Tensor::from_rows(&rows, 2).unwrap());
    let (t, v) = aggregate(&mut tape, h, &doc, Aggregation::Sum).unwrap();
    assert_eq!(tape.value(t).row(0), &[4.0, 6.0]);
    assert_eq!(tape.value(t).row(1), &[3.5, 3.5]);
    assert_eq!(tape.value(t).row(2), &[7.0, 8.0]);
    assert_eq!(tape.value(v).shape(), &[doc.num_regions(), 2]);
    let (t, _) = aggregate(&mut tape, h, &doc, Aggregation::Mean).unwrap();
    assert_eq!(tape.value(t).row(0), &[2.0, 3.0]);
    let _ = (model, store);
}

fn synth_doc(seed: u64, cfg: ModelConfig) -> (Model, ParamStore, Prepared) {
    let page = synth_generate(seed, 1, &SynthParams::default()).unwrap().remove(0).page;
    let (model, store) = Model::init(ModelConfig { max_len: 128, ..cfg }, vocab_for(&[&page], 32)).unwrap();
    let doc = model.prepare(&page, None).unwrap();
    (model, store, doc)
}

#[test]
fn aggregate_and_fuse_match_edge_list() {
    let (_, _, doc) = synth_doc(4, ModelConfig { grid: [3, 3], ..gradcheck_config(0) });
    let n = doc.num_tokens() + 9;
    let d = 5;
    let fine = random_rows(n, d, 1);
    // Edge list (fine row, coarse row) serialized from the graph.
    let z = doc.num_segments();
    let mut edges = Vec::new();
    for (i, &s) in doc.token_parent.iter().enumerate() {
        edges.push((i, s));
    }
    for p in 0..9 {
        let parent = doc.graph.parent_of(crate::graph::NodeRef::new(NodeKind::FineVisual, p)).unwrap();
        edges.push((doc.num_tokens() + p, z + parent.index));
    }
    let c = z + doc.num_regions();
    let mut want = Tensor::zeros(&[c, d]);
    for &(f, q) in &edges {
        for j in 0..d {
            want.row_mut(q)[j] += fine.at(f, j);
        }
    }
    let mut tape = Tape::new();
    let h = tape.constant(fine.clone());
    let (t, v) = aggregate(&mut tape, h, &doc, Aggregation::Sum).unwrap();
    let got = tape.concat_rows(&[t, v]).unwrap();
    assert!(tape.value(got).max_abs_diff(&want) < 1e-12);

    let coarse = random_rows(c, d, 2);
    let mut fused = fine.clone();
    for &(f, q) in &edges {
        for j in 0..d {
            fused.row_mut(f)[j] += coarse.at(q, j);
        }
    }
    let cv = tape.constant(coarse.clone());
    let out = fuse(&mut tape, h, cv, &doc).unwrap();
    assert_eq!(tape.value(out), &fused);

    // Zero coarse features leave the fine rows untouched.
    let zero = tape.constant(Tensor::zeros(&[c, d]));
    let same = fuse(&mut tape, h, zero, &doc).unwrap();
    assert_eq!(tape.value(same), &fine);

    // Linearity in the coarse argument.
    let extra = random_rows(c, d, 3);
    let ev = tape.constant(extra);
    let sum = tape.add(cv, ev).unwrap();
    let lhs = fuse(&mut tape, h, sum, &doc).unwrap();
    let a = fuse(&mut tape, h, cv, &doc).unwrap();
    let zf = tape.constant(Tensor::zeros(&[n, d]));
    let b = fuse(&mut tape, zf, ev, &doc).unwrap();
    let rhs = tape.add(a, b).unwrap();
    assert!(tape.value(lhs).max_abs_diff(tape.value(rhs)) < 1e-12);

    let short = tape.constant(Tensor::zeros(&[1, d]));
    assert!(fuse(&mut tape, h, short, &doc).is_err());
}

#[test]
fn single_segment_broadcasts_one_row() {
    let page = crate::fixtures::page_from_lines(
        100,
        100,
        &[&[("a", [10.0, 10.0, 20.0, 20.0], "O"), ("b", [25.0, 10.0, 35.0, 20.0], "O")]],
    )
    .unwrap();
    let (_, _, doc) = small(&page, ModelConfig { grid: [1, 1], ..gradcheck_config(0) });
    let mut tape = Tape::new();
    let fine = tape.constant(Tensor::zeros(&[3, 2]));
    let coarse = tape.constant(Tensor::from_rows(&[vec![1.0, 2.0], vec![5.0, 6.0]], 2).unwrap());
    let out = fuse(&mut tape, fine, coarse, &doc).unwrap();
    assert_eq!(tape.value(out).row(0), &[1.0, 2.0]);
    assert_eq!(tape.value(out).row(1), &[1.0, 2.0]);
    assert_eq!(tape.value(out).row(2), &[5.0, 6.0]);
}

#[test]
fn common_sense_embedding_is_linear() {
    let page = six_word_page();
    let (model, store, _) = small(&page, gradcheck_config(1));
    let (table, proj) = model.params.common_sense.unwrap();
    let run = |bits: Vec<f64>| {
        let mut tape = Tape::new();
        let c = Tensor::new(vec![1, 4], bits).unwrap();
        let v = model.common_sense_embed(&mut tape, &store, &c).unwrap().unwrap();
        tape.value(v).clone()
    };
    assert!(run(vec![0.0; 4]).data().iter().all(|&v| v == 0.0));
    let e1 = run(vec![0.0, 1.0, 0.0, 0.0]);
    let row = Tensor::new(vec![1, 16], store.get(table).row(1).to_vec()).unwrap();
    let want = crate::numerics::matmul(&row, store.get(proj)).unwrap();
    assert!(e1.max_abs_diff(&want) < 1e-15);
    let e3 = run(vec![0.0, 0.0, 0.0, 1.0]);
    let both = run(vec![0.0, 1.0, 0.0, 1.0]);
    let sum = Tensor::new(vec![1, 16], e1.data().iter().zip(e3.data()).map(|(a, b)| a + b).collect()).unwrap();
    assert!(both.max_abs_diff(&sum) < 1e-15);
}

#[test]
fn detected_bits_follow_segment_text() {
    let page = six_word_page();
    let (_, _, doc) = small(&page, gradcheck_config(0));
    // PERSON, DATE, MONEY, CARDINAL
    assert_eq!(doc.common_sense.row(0), &[0.0, 0.0, 0.0, 0.0]);
    assert_eq!(doc.common_sense.row(1), &[0.0, 1.0, 0.0, 1.0]);
    assert_eq!(doc.common_sense.row(3), &[0.0, 0.0, 1.0, 1.0]);
}

#[test]
fn coarse_input_shares_layout_tables() {
    let page = three_segment_page();
    let cfg = ModelConfig { grid: [2, 1], radius: 10.0, ..gradcheck_config(0) };
    let (model, mut store, doc) = small(&page, cfg);
    assert_eq!((doc.num_segments(), doc.num_regions()), (3, 2));
    let d = model.config.d;
    let run = |store: &ParamStore| {
        let mut tape = Tape::new();
        let t = tape.constant(Tensor::filled(&[3, d], 0.25));
        let v = tape.constant(Tensor::filled(&[2, d], -0.5));
        let c = model.coarse_input(&mut tape, store, t, v, &doc).unwrap();
        let f = model.fine_input(&mut tape, store, &doc).unwrap();
        (tape.value(c).clone(), tape.value(f).clone())
    };
    let (c0, f0) = run(&store);
    assert_eq!(c0.shape(), &[5, d]);
    let ex = model.params.embeddings.x;
    store.get_mut(ex).data_mut().iter_mut().for_each(|v| *v += 0.125);
    let (c1, f1) = run(&store);
    assert!(c1.max_abs_diff(&c0) > 0.1 && f1.max_abs_diff(&f0) > 0.1);
    for id in [model.params.embeddings.x, model.params.embeddings.y] {
        store.get_mut(id).data_mut().fill(0.0);
    }
    let (c2, _) = run(&store);
    assert!(c2.data()[..3 * d].iter().all(|&v| v == 0.25));
    assert!(c2.data()[3 * d..].iter().all(|&v| v == -0.5));
}

#[test]
fn coarse_encoder_with_no_layers_is_identity() {
    let page = six_word_page();
    let (model, store, _) = small(&page, ModelConfig { coarse_layers: 0, ..gradcheck_config(0) });
    let mut tape = Tape::new();
    let x = tape.constant(random_rows(5, 16, 9));
    assert_eq!(model.coarse_encode(&mut tape, &store, x, None).unwrap(), x);
}

#[test]
fn forward_shapes_and_summary() {
    let (model, store, doc) = synth_doc(2, ModelConfig { grid: [3, 2], ..gradcheck_config(0) });
    let mut tape = Tape::new();
    let (logits, stages) = model.logits(&mut tape, &store, &doc, None).unwrap();
    let n = doc.num_tokens() + 6;
    assert_eq!(tape.shape(stages.output), &[n, 16]);
    assert_eq!(tape.shape(logits), &[doc.num_tokens(), 7]);
    assert_eq!(tape.shape(stages.coarse_output.unwrap()), &[doc.num_segments() + doc.num_regions(), 16]);
    let s = stages.summary(&tape);
    assert_eq!(s["fine_input"]["shape"], serde_json::json!([n, 16]));
    assert!(s["output"]["norm"].as_f64().unwrap() > 0.0);
    assert_eq!(model.predict(&store, &doc).unwrap().len(), doc.graph.page().words().len());
}

#[test]
fn zero_head_gives_uniform_loss() {
    let page = six_word_page();
    let (model, mut store, doc) = small(&page, gradcheck_config(0));
    store.get_mut(model.params.head_w).data_mut().fill(0.0);
    let mut tape = Tape::new();
    let loss = model.loss(&mut tape, &store, &doc, None).unwrap();
    assert!((tape.value(loss).item() - 7f64.ln()).abs() < 1e-12);
}

#[test]
fn bypass_equals_fine_encoder() {
    let page = six_word_page();
    let cfg = ModelConfig { bypass_aggregation: true, coarse_layers: 0, common_sense: vec![], ..gradcheck_config(0) };
    let (model, store, doc) = small(&page, cfg);
    let mut tape = Tape::new();
    let stages = model.forward(&mut tape, &store, &doc, None).unwrap();
    let x = model.fine_input(&mut tape, &store, &doc).unwrap();
    let h = model.fine_encode(&mut tape, &store, x, &doc, None).unwrap();
    assert_eq!(tape.value(stages.output), tape.value(h));
    assert!(stages.coarse_output.is_none());
}

#[test]
fn every_parameter_group_gets_gradient() {
    let (model, store, doc) = synth_doc(6, ModelConfig { grid: [2, 2], ..gradcheck_config(0) });
    let mut tape = Tape::new();
    let loss = model.loss(&mut tape, &store, &doc, None).unwrap();
    let mut grads = store.zeros_like();
    tape.backward(loss, Some(&mut grads)).unwrap();
    for (id, name, _) in store.iter() {
        assert!(grads.get(id).norm() > 0.0, "{name} has no gradient");
    }
}

fn fine_gradcheck(cfg: ModelConfig, f: impl for<'a> Fn(&Model, &mut Tape<'a>, &'a ParamStore, &Prepared) -> Result<Var>) -> f64 {
    let page = six_word_page();
    let (model, store, doc) = small(&page, cfg);
    let report = grad_check(
        &store,
        &[],
        |tape, s| f(&model, tape, s, &doc),
        &GradCheckOptions { min_magnitude: 1e-5, max_per_param: Some(64), ..Default::default() },
    )
    .unwrap();
    assert!(report.checked > 100);
    report.max_rel_error
}

fn probe<'a>(tape: &mut Tape<'a>, v: Var) -> Result<Var> {
    let w = random_rows(tape.shape(v)[0], tape.shape(v)[1], 77);
    let w = tape.constant(w);
    let m = tape.mul(v, w)?;
    Ok(tape.sum(m))
}

#[test]
fn fine_encoder_gradcheck() {
    let err = fine_gradcheck(ModelConfig { coarse_layers: 0, ..gradcheck_config(3) }, |m, tape, s, doc| {
        let x = m.fine_input(tape, s, doc)?;
        let h = m.fine_encode(tape, s, x, doc, None)?;
        probe(tape, h)
    });
    assert!(err < 1e-4, "{err}");
}

#[test]
fn coarse_encoder_gradcheck() {
    let err = fine_gradcheck(gradcheck_config(4), |m, tape, s, doc| {
        let x = tape.param(s, m.params.embeddings.position);
        let rows: Vec<usize> = (0..doc.num_segments() + doc.num_regions()).collect();
        let x = tape.gather_rows(x, &rows)?;
        let x = tape.scale(x, 30.0);
        let h = m.coarse_encode(tape, s, x, None)?;
        probe(tape, h)
    });
    assert!(err < 1e-4, "{err}");
}

#[test]
fn reduced_config_binds_to_larger_store() {
    let page = six_word_page();
    let (model, store, _) = small(&page, gradcheck_config(0));
    let reduced = ModelConfig { coarse_layers: 0, common_sense: vec![], ..gradcheck_config(0) };
    let r = Model::from_store(reduced, model.vocab.clone(), &store).unwrap();
    assert!(r.params.coarse.is_empty() && r.params.common_sense.is_none());
    assert_eq!(r.params.head_w, model.params.head_w);
    let wider = ModelConfig { d: 32, ..gradcheck_config(0) };
    assert!(Model::from_store(wider, model.vocab.clone(), &store).is_err());
}

#[test]
fn checkpoint_round_trip_reproduces_predictions() {
    let (model, store, doc) = synth_doc(8, ModelConfig { grid: [2, 2], ..gradcheck_config(5) });
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    model.save(&path, &store, serde_json::json!({"note": 1})).unwrap();
    let (loaded, store2, meta) = Model::load(&path).unwrap();
    assert_eq!(store2, store);
    assert_eq!(loaded.config, model.config);
    assert_eq!(meta.extra["note"], 1);
    let doc2 = loaded.prepare(doc.graph.page(), None).unwrap();
    let mut t1 = Tape::inference();
    let mut t2 = Tape::inference();
    let (a, _) = model.logits(&mut t1, &store, &doc, None).unwrap();
    let (b, _) = loaded.logits(&mut t2, &store2, &doc2, None).unwrap();
    assert_eq!(t1.value(a), t2.value(b));
}

/// Reverses segment order, relabeling words and reversing word order within
/// the page is not needed: words keep reading order, only segment ids change.
fn reverse_segments(page: &Page) -> Page {
    let z = page.segments().len();
    let words: Vec<Word> = page
        .words()
        .iter()
        .map(|w| Word { segment_id: z - 1 - w.segment_id, ..w.clone() })
        .collect();
    let segments: Vec<Segment> = page.segments().iter().rev().cloned().collect();
    Page::new(page.width(), page.height(), words, segments, None, page.labels().map(|l| l.to_vec())).unwrap()
}

#[test]
fn segment_order_does_not_change_fused_outputs() {
    let page = synth_generate(9, 1, &SynthParams::default()).unwrap().remove(0).page;
    let flipped = reverse_segments(&page);
    for m in [0, 2] {
        let cfg = ModelConfig { grid: [3, 3], coarse_layers: m, max_len: 128, ..gradcheck_config(2) };
        let (model, store) = Model::init(cfg, vocab_for(&[&page], 32)).unwrap();
        let a = model.prepare(&page, None).unwrap();
        let b = model.prepare(&flipped, None).unwrap();
        assert_eq!(a.num_regions(), b.num_regions());
        let run = |doc: &Prepared| {
            let mut tape = Tape::inference();
            let s = model.forward(&mut tape, &store, doc, None).unwrap();
            (tape.value(s.output).clone(), tape.value(s.coarse_output.unwrap()).clone())
        };
        let ((ha, ca), (hb, cb)) = (run(&a), run(&b));
        assert!(ha.max_abs_diff(&hb) < 1e-9, "M={m}");
        // Segment rows come back in reverse order.
        let z = a.num_segments();
        for s in 0..z {
            let diff: f64 = ca.row(s).iter().zip(cb.row(z - 1 - s)).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
            assert!(diff < 1e-9);
        }
    }
}

#[test]
fn dropout_changes_training_pass_only() {
    let (model, store, doc) = synth_doc(3, ModelConfig { grid: [2, 2], dropout: 0.2, ..gradcheck_config(0) });
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut tape = Tape::new();
    let a = model.forward(&mut tape, &store, &doc, None).unwrap().output;
    let b = model.forward(&mut tape, &store, &doc, None).unwrap().output;
    assert_eq!(tape.value(a), tape.value(b));
    let mut d = Dropout { p: model.config.dropout, rng: &mut rng };
    let c = model.forward(&mut tape, &store, &doc, Some(&mut d)).unwrap().output;
    assert!(tape.value(a).max_abs_diff(tape.value(c)) > 0.0);
    let _: f64 = rng.random();
}

