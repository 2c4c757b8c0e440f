//! Small hand-built documents and configurations shared by the CLI checks and tests.

use crate::doc::{union_box, BBox, Page, Segment, Word};
use crate::embed::Vocab;
use crate::error::Result;
use crate::model::ModelConfig;

/// Builds a page from segments given as `(words with boxes, label per word)`.
pub fn page_from_lines(width: u32, height: u32, lines: &[&[(&str, [f64; 4], &str)]]) -> Result<Page> {
    let mut words = Vec::new();
    let mut segments = Vec::new();
    let mut labels = Vec::new();
    for (sid, line) in lines.iter().enumerate() {
        let mut ids = Vec::new();
        for (text, b, label) in line.iter() {
            ids.push(words.len());
            words.push(Word { text: text.to_string(), bbox: BBox::new(b[0], b[1], b[2], b[3]), segment_id: sid });
            labels.push(label.to_string());
        }
        let boxes: Vec<BBox> = ids.iter().map(|&i| words[i].bbox).collect();
        let text = line.iter().map(|w| w.0).collect::<Vec<_>>().join(" ");
        segments.push(Segment { text, bbox: union_box(&boxes)?, word_ids: ids });
    }
    Page::new(width, height, words, segments, None, Some(labels))
}

/// Six words in four segments: two key/value pairs on a 1000x1000 page.
pub fn six_word_page() -> Page {
    page_from_lines(
        1000,
        1000,
        &[
            &[("Date:", [100.0, 100.0, 150.0, 120.0], "B-QUESTION")],
            &[
                ("January", [170.0, 100.0, 240.0, 120.0], "B-ANSWER"),
                ("5,", [248.0, 100.0, 266.0, 120.0], "I-ANSWER"),
                ("1989", [274.0, 100.0, 310.0, 120.0], "I-ANSWER"),
            ],
            &[("Total:", [100.0, 300.0, 160.0, 320.0], "B-QUESTION")],
            &[("$12.50", [600.0, 300.0, 660.0, 320.0], "B-ANSWER")],
        ],
    )
    .expect("fixture is valid")
}

/// Three one-word segments: the first two are 5 px apart, the third 40 px below.
pub fn three_segment_page() -> Page {
    page_from_lines(
        200,
        200,
        &[
            &[("Fax:", [10.0, 10.0, 50.0, 30.0], "B-QUESTION")],
            &[("555-0100", [55.0, 10.0, 120.0, 30.0], "B-ANSWER")],
            &[("Notes", [10.0, 70.0, 60.0, 90.0], "B-HEADER")],
        ],
    )
    .expect("fixture is valid")
}

/// The end-to-end gradient-check configuration: d=16, N=2, M=1, K=4.
pub fn gradcheck_config(seed: u64) -> ModelConfig {
    ModelConfig {
        d: 16,
        heads: 2,
        fine_layers: 2,
        coarse_layers: 1,
        vocab_size: 32,
        max_len: 32,
        grid: [2, 2],
        common_sense: ["PERSON", "DATE", "MONEY", "CARDINAL"].iter().map(|s| s.to_string()).collect(),
        rel_1d_buckets: 8,
        rel_2d_buckets: 8,
        seed,
        ..ModelConfig::default()
    }
}

pub fn vocab_for(pages: &[&Page], size: usize) -> Vocab {
    Vocab::build(pages.iter().flat_map(|p| p.words().iter().map(|w| w.text.as_str())), size)
}
