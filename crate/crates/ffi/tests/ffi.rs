use std::ffi::{c_char, CStr, CString};
use std::path::Path;
use std::process::Command;
use std::ptr;

use mmlayout_ffi::*;

const PAGE: &str = r#"{
  "width": 200, "height": 200,
  "words": [
    {"text": "Fax:", "bbox": [10, 10, 50, 30], "segment_id": 0},
    {"text": "555-0100", "bbox": [55, 10, 120, 30], "segment_id": 1},
    {"text": "Notes", "bbox": [10, 70, 60, 90], "segment_id": 2}
  ],
  "segments": [
    {"text": "Fax:", "bbox": [10, 10, 50, 30], "word_ids": [0]},
    {"text": "555-0100", "bbox": [55, 10, 120, 30], "word_ids": [1]},
    {"text": "Notes", "bbox": [10, 70, 60, 90], "word_ids": [2]}
  ]
}"#;

fn last_error() -> String {
    unsafe { CStr::from_ptr(mml_last_error()) }.to_string_lossy().into_owned()
}

unsafe fn take(s: *mut c_char) -> String {
    let out = CStr::from_ptr(s).to_string_lossy().into_owned();
    mml_string_free(s);
    out
}

fn document() -> *mut MmlDocument {
    let json = CString::new(PAGE).unwrap();
    let mut doc = ptr::null_mut();
    assert_eq!(unsafe { mml_document_from_json(json.as_ptr(), &mut doc) }, MmlStatus::Ok, "{}", last_error());
    doc
}

#[test]
fn graph_round_trip() {
    unsafe {
        let doc = document();
        let mut n = 0;
        assert_eq!(mml_document_num_words(doc, &mut n), MmlStatus::Ok);
        assert_eq!(n, 3);
        assert_eq!(mml_document_num_segments(doc, &mut n), MmlStatus::Ok);
        assert_eq!(n, 3);
        for (radius, regions) in [(10.0, 2), (100.0, 1), (1.0, 3)] {
            let mut g = ptr::null_mut();
            assert_eq!(mml_graph_build(doc, radius, 1, 2, 2, &mut g), MmlStatus::Ok, "{}", last_error());
            assert_eq!(mml_graph_num_regions(g, &mut n), MmlStatus::Ok);
            assert_eq!(n, regions);
            let mut s = ptr::null_mut();
            assert_eq!(mml_graph_to_json(g, &mut s), MmlStatus::Ok);
            let json: serde_json::Value = serde_json::from_str(&take(s)).unwrap();
            assert_eq!(json["regions"].as_array().unwrap().len(), regions);
            assert_eq!(json["text_parent"], serde_json::json!([0, 1, 2]));
            assert_eq!(mml_graph_render_svg(g, &mut s), MmlStatus::Ok);
            assert_eq!(take(s).matches(r#"class="region""#).count(), regions);
            mml_graph_free(g);
        }
        mml_document_free(doc);
    }
}

#[test]
fn errors_map_to_status_codes() {
    unsafe {
        let mut doc = ptr::null_mut();
        assert_eq!(mml_document_from_json(ptr::null(), &mut doc), MmlStatus::NullArgument);
        assert!(last_error().contains("null"));
        let bad = CString::new(r#"{"width": 10}"#).unwrap();
        assert_eq!(mml_document_from_json(bad.as_ptr(), &mut doc), MmlStatus::Parse);
        assert!(!last_error().is_empty());
        let missing = CString::new("/nonexistent/page.json").unwrap();
        assert_ne!(mml_document_load(missing.as_ptr(), &mut doc), MmlStatus::Ok);
        let mut model = ptr::null_mut();
        assert_ne!(mml_model_load(missing.as_ptr(), &mut model), MmlStatus::Ok);
        assert!(model.is_null());

        let doc = document();
        let mut g = ptr::null_mut();
        assert_eq!(mml_graph_build(doc, -1.0, 1, 2, 2, &mut g), MmlStatus::Invalid);
        assert_eq!(mml_graph_build(doc, 10.0, 1, 0, 2, &mut g), MmlStatus::Invalid);
        assert!(g.is_null());
        let mut n = 0;
        assert_eq!(mml_graph_num_regions(ptr::null(), &mut n), MmlStatus::NullArgument);
        mml_document_free(doc);
        mml_document_free(ptr::null_mut());
        mml_graph_free(ptr::null_mut());
        mml_model_free(ptr::null_mut());
        mml_string_free(ptr::null_mut());
    }
}

#[test]
fn boundary_distance_matches_library() {
    let (a, b) = ([0.0, 0.0, 10.0, 10.0], [13.0, 14.0, 20.0, 20.0]);
    let mut d = -1.0;
    assert_eq!(unsafe { mml_boundary_distance(a.as_ptr(), b.as_ptr(), &mut d) }, MmlStatus::Ok);
    assert_eq!(d, 5.0);
    let flipped = [10.0, 0.0, 0.0, 10.0];
    assert_eq!(unsafe { mml_boundary_distance(flipped.as_ptr(), b.as_ptr(), &mut d) }, MmlStatus::Invalid);
}

#[test]
fn model_predicts_one_tag_per_word() {
    use mmlayout::fixtures::{gradcheck_config, three_segment_page, vocab_for};
    use mmlayout::model::Model;

    let page = three_segment_page();
    let (model, store) = Model::init(gradcheck_config(0), vocab_for(&[&page], 32)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    model.save(&path, &store, serde_json::Value::Null).unwrap();
    let expected = model.predict(&store, &model.prepare(&page, None).unwrap()).unwrap();
    unsafe {
        let mut m = ptr::null_mut();
        let cpath = CString::new(path.to_str().unwrap()).unwrap();
        assert_eq!(mml_model_load(cpath.as_ptr(), &mut m), MmlStatus::Ok, "{}", last_error());
        let json = CString::new(page.to_json().unwrap()).unwrap();
        let mut doc = ptr::null_mut();
        assert_eq!(mml_document_from_json(json.as_ptr(), &mut doc), MmlStatus::Ok, "{}", last_error());
        let mut s = ptr::null_mut();
        assert_eq!(mml_model_predict(m, doc, &mut s), MmlStatus::Ok, "{}", last_error());
        let tags: Vec<String> = serde_json::from_str(&take(s)).unwrap();
        assert_eq!(tags, expected);
        mml_document_free(doc);
        mml_model_free(m);
    }
}

#[test]
fn header_declares_every_export_and_compiles() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR"));
    let header = std::fs::read_to_string(dir.join("include/mmlayout.h")).unwrap();
    let source = std::fs::read_to_string(dir.join("src/lib.rs")).unwrap();
    let exports: Vec<&str> = source
        .lines()
        .filter_map(|l| l.split("extern \"C\" fn ").nth(1))
        .map(|rest| rest.split('(').next().unwrap())
        .collect();
    assert!(exports.len() >= 14);
    for name in exports {
        assert!(header.contains(&format!("{name}(")), "{name} missing from the header");
    }
    assert!(header.contains("typedef struct MmlDocument MmlDocument;"));
    assert!(header.contains("MML_STATUS_NULL_ARGUMENT = 1"));
    let Ok(status) = Command::new("cc")
        .args(["-fsyntax-only", "-Wall", "-Werror", "-x", "c"])
        .arg(dir.join("include/mmlayout.h"))
        .status()
    else {
        eprintln!("no C compiler; skipped the syntax check");
        return;
    };
    assert!(status.success());
}
