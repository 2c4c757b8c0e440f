//! Deterministic synthetic form pages with word-level BIO labels.
//!
//! Two layouts are generated:
//!
//! * [`Variant::Form`]: a header, key/value rows (`Fax:` / `(202) 778-5212`),
//!   occasional multi-line lists and unlabeled footer text.
//! * [`Variant::RegionCue`]: two columns of line blocks drawn from a neutral
//!   vocabulary. Each line is one entity, `ANSWER` when the salient region
//!   containing it (at the reference radius) holds at least three lines and
//!   `QUESTION` otherwise, so the label is only recoverable from layout grouping.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{bio_encode, Entity};
use crate::cluster::{detect_salient_regions, ClusterParams};
use crate::doc::{load_document, union_box, BBox, Page, Segment, Word};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    #[default]
    Form,
    RegionCue,
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "form" => Ok(Self::Form),
            "region_cue" | "region-cue" => Ok(Self::RegionCue),
            _ => Err(Error::Invalid(format!("unknown synthetic variant {s:?} (expected form or region-cue)"))),
        }
    }
}

/// Lines per block that turns a region-cue line into an `ANSWER`.
pub const REGION_CUE_MIN_LINES: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthParams {
    pub variant: Variant,
    pub width: u32,
    pub height: u32,
    /// Upper bound on words per page.
    pub max_words: usize,
    /// Clustering radius the region-cue labels are computed with.
    pub reference_radius: f64,
    pub min_pts: usize,
}

impl Default for SynthParams {
    fn default() -> Self {
        Self { variant: Variant::Form, width: 1000, height: 1000, max_words: 40, reference_radius: 30.0, min_pts: 1 }
    }
}

impl SynthParams {
    pub fn region_cue() -> Self {
        Self { variant: Variant::RegionCue, ..Self::default() }
    }

    fn validate(&self) -> Result<()> {
        if self.width < 600 || self.height < 600 {
            return Err(Error::Invalid(format!("synthetic pages need at least 600x600 pixels, got {}x{}", self.width, self.height)));
        }
        if self.max_words < 8 {
            return Err(Error::Invalid(format!("max_words must be at least 8, got {}", self.max_words)));
        }
        if !(self.reference_radius.is_finite() && self.reference_radius > 0.0) {
            return Err(Error::Invalid(format!("reference_radius must be positive, got {}", self.reference_radius)));
        }
        Ok(())
    }
}

/// What the generator intended to place, for cross-checking the labels.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct DocLedger {
    /// Entities per type.
    pub entities: BTreeMap<String, usize>,
    /// Labeled words per type.
    pub words: BTreeMap<String, usize>,
    pub unlabeled_words: usize,
    /// Region-cue only: lines per block, in generation order.
    pub block_sizes: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthDoc {
    pub page: Page,
    pub ledger: DocLedger,
}

const HEADER_WORDS: &[&str] = &[
    "CONFIDENTIAL", "MEMORANDUM", "FAX", "TRANSMITTAL", "PURCHASE", "ORDER", "INVOICE", "REQUEST", "APPLICATION",
    "REPORT", "SUMMARY", "ACCOUNT", "STATEMENT", "SHIPPING", "NOTICE",
];
const FIRST_NAMES: &[&str] = &["John", "Mary", "Robert", "Linda", "James", "Susan", "David", "Karen", "Paul", "Nancy"];
const LAST_NAMES: &[&str] = &["Smith", "Johnson", "Brown", "Miller", "Davis", "Wilson", "Moore", "Taylor", "Clark", "Lewis"];
const MONTHS: &[&str] = &[
    "January", "February", "March", "April", "May", "June", "July", "August", "September", "October", "November",
    "December",
];
const CITIES: &[&str] = &["Boston", "Chicago", "Denver", "Atlanta", "Seattle", "Richmond", "Dallas", "Phoenix"];
const STREETS: &[&str] = &["Main", "Oak", "Maple", "Park", "Lake", "Hill", "Church", "Market"];
const COMPANY_STEMS: &[&str] = &["Acme", "Globex", "Initech", "Umbrella", "Vandelay", "Stark", "Wayne", "Tyrell"];
const COMPANY_SUFFIXES: &[&str] = &["Inc.", "Corp.", "Company", "Ltd."];
const FREE_WORDS: &[&str] = &[
    "quarterly", "review", "sample", "shipment", "budget", "meeting", "update", "proposal", "results", "schedule",
    "program", "test", "study", "brand", "market", "product",
];
const FOOTERS: &[&[&str]] = &[&["Please", "print", "clearly"], &["Retain", "for", "records"], &["Office", "use", "only"]];
const NEUTRAL_WORDS: &[&str] = &[
    "alpha", "item", "north", "delta", "green", "river", "stone", "field", "light", "cloud", "maple", "point", "silver",
    "harbor", "bridge", "valley", "summit", "amber", "cedar", "echo",
];

#[derive(Clone, Copy)]
enum ValueKind {
    Phone,
    Date,
    Name,
    Amount,
    Number,
    Address,
    Company,
    Free,
}

const KEYS: &[(&[&str], ValueKind)] = &[
    (&["Fax:"], ValueKind::Phone),
    (&["Phone:"], ValueKind::Phone),
    (&["Date:"], ValueKind::Date),
    (&["Name:"], ValueKind::Name),
    (&["To:"], ValueKind::Name),
    (&["From:"], ValueKind::Name),
    (&["Amount:"], ValueKind::Amount),
    (&["Total", "Due:"], ValueKind::Amount),
    (&["Account", "No.:"], ValueKind::Number),
    (&["Address:"], ValueKind::Address),
    (&["Company:"], ValueKind::Company),
    (&["Subject:"], ValueKind::Free),
    (&["Re:"], ValueKind::Free),
];

fn value_words(kind: ValueKind, rng: &mut ChaCha8Rng) -> Vec<String> {
    let pick = |pool: &[&str], rng: &mut ChaCha8Rng| pool.choose(rng).expect("non-empty pool").to_string();
    match kind {
        ValueKind::Phone => vec![
            format!("({})", rng.random_range(200..990)),
            format!("{}-{:04}", rng.random_range(200..990), rng.random_range(0..10000)),
        ],
        ValueKind::Date => vec![
            pick(MONTHS, rng),
            format!("{},", rng.random_range(1..29)),
            rng.random_range(1970..2000).to_string(),
        ],
        ValueKind::Name => vec![pick(FIRST_NAMES, rng), pick(LAST_NAMES, rng)],
        ValueKind::Amount => vec![format!("${}.{:02}", rng.random_range(1..5000), rng.random_range(0..100))],
        ValueKind::Number => vec![rng.random_range(10000..99999).to_string()],
        ValueKind::Address => vec![
            rng.random_range(10..999).to_string(),
            pick(STREETS, rng),
            "Street,".to_string(),
            pick(CITIES, rng),
        ],
        ValueKind::Company => vec![pick(COMPANY_STEMS, rng), pick(COMPANY_SUFFIXES, rng)],
        ValueKind::Free => (0..rng.random_range(2..4)).map(|_| pick(FREE_WORDS, rng)).collect(),
    }
}

struct Builder {
    words: Vec<Word>,
    segments: Vec<Segment>,
    labels: Vec<String>,
    ledger: DocLedger,
    char_w: f64,
    line_h: f64,
}

impl Builder {
    fn new(rng: &mut ChaCha8Rng) -> Self {
        Self {
            words: Vec::new(),
            segments: Vec::new(),
            labels: Vec::new(),
            ledger: DocLedger::default(),
            char_w: rng.random_range(8.0..10.0f64).round(),
            line_h: rng.random_range(16.0..22.0f64).round(),
        }
    }

    fn width_of(&self, words: &[String]) -> f64 {
        let chars: usize = words.iter().map(|w| w.chars().count()).sum();
        chars as f64 * self.char_w + (words.len().saturating_sub(1)) as f64 * self.char_w
    }

    /// Lays the words out left to right as one segment; returns its box.
    fn segment(&mut self, words: Vec<String>, x0: f64, y0: f64, kind: Option<&str>) -> BBox {
        let sid = self.segments.len();
        let mut ids = Vec::with_capacity(words.len());
        let mut x = x0;
        for w in &words {
            let wdt = w.chars().count() as f64 * self.char_w;
            ids.push(self.words.len());
            self.words.push(Word { text: w.clone(), bbox: BBox::new(x, y0, x + wdt, y0 + self.line_h), segment_id: sid });
            x += wdt + self.char_w;
        }
        let boxes: Vec<BBox> = ids.iter().map(|&i| self.words[i].bbox).collect();
        let bbox = union_box(&boxes).expect("segment has words");
        let n = words.len();
        match kind {
            Some(k) => {
                let tags = bio_encode(&[Entity::new(k, 0, n)], n).expect("span fits");
                self.labels.extend(tags);
                *self.ledger.entities.entry(k.to_string()).or_default() += 1;
                *self.ledger.words.entry(k.to_string()).or_default() += n;
            }
            None => {
                self.labels.extend(std::iter::repeat_n(super::OUTSIDE.to_string(), n));
                self.ledger.unlabeled_words += n;
            }
        }
        self.segments.push(Segment { text: words.join(" "), bbox, word_ids: ids });
        bbox
    }

    fn finish(self, params: &SynthParams) -> Result<SynthDoc> {
        let page = Page::new(params.width, params.height, self.words, self.segments, None, Some(self.labels))?;
        Ok(SynthDoc { page, ledger: self.ledger })
    }
}

fn form_page(params: &SynthParams, rng: &mut ChaCha8Rng) -> Result<SynthDoc> {
    let mut b = Builder::new(rng);
    let (w, h) = (f64::from(params.width), f64::from(params.height));
    let header: Vec<String> = (0..rng.random_range(2..4))
        .map(|_| HEADER_WORDS.choose(rng).expect("pool").to_string())
        .collect();
    let hw = b.width_of(&header);
    let hx = ((w - hw) / 2.0 + rng.random_range(-40.0..40.0f64)).round().max(10.0);
    let mut y = rng.random_range(30.0..70.0f64).round();
    b.segment(header, hx, y, Some("HEADER"));
    y += b.line_h + rng.random_range(40.0..80.0f64).round();

    let footer = FOOTERS.choose(rng).expect("pool");
    let budget = params.max_words.saturating_sub(footer.len());
    let left = rng.random_range(40.0..120.0f64).round();
    loop {
        let (key, kind) = KEYS.choose(rng).expect("pool");
        let key: Vec<String> = key.iter().map(|s| s.to_string()).collect();
        let list = matches!(kind, ValueKind::Free | ValueKind::Name) && rng.random_bool(0.25);
        let values: Vec<Vec<String>> = if list {
            (0..rng.random_range(2..4)).map(|_| value_words(*kind, rng)).collect()
        } else if rng.random_bool(0.1) {
            Vec::new()
        } else {
            vec![value_words(*kind, rng)]
        };
        let n_words = key.len() + values.iter().map(Vec::len).sum::<usize>();
        let rows = if list { values.len() } else { 1 };
        let row_h = b.line_h + 12.0;
        if b.words.len() + n_words > budget || y + rows as f64 * row_h + 2.0 * b.line_h > h - 60.0 {
            break;
        }
        let kb = b.segment(key, left, y, Some("QUESTION"));
        if list {
            let indent = left + rng.random_range(20.0..40.0f64).round();
            let mut ly = kb.y1 + rng.random_range(6.0..12.0f64).round();
            for v in values {
                let vb = b.segment(v, indent, ly, Some("ANSWER"));
                ly = vb.y1 + rng.random_range(6.0..12.0f64).round();
            }
            y = ly;
        } else {
            if let Some(v) = values.into_iter().next() {
                let gap = rng.random_range(15.0..60.0f64).round();
                b.segment(v, kb.x1 + gap, y, Some("ANSWER"));
            }
            y = kb.y1;
        }
        y += rng.random_range(18.0..45.0f64).round();
    }
    let fy = (h - 40.0 - b.line_h).max(y);
    b.segment(footer.iter().map(|s| s.to_string()).collect(), left, fy, None);
    b.finish(params)
}

fn region_cue_page(params: &SynthParams, rng: &mut ChaCha8Rng) -> Result<SynthDoc> {
    let mut b = Builder::new(rng);
    let (w, h) = (f64::from(params.width), f64::from(params.height));
    let r = params.reference_radius;
    let columns = [rng.random_range(0.04..0.08) * w, rng.random_range(0.52..0.56) * w];
    // Lines never reach the next column, so column gaps stay far above the radius.
    let max_line_w = columns[1] - columns[0] - 2.0 * r - 20.0;
    let mut blocks: Vec<Vec<usize>> = Vec::new();
    'cols: for &cx in &columns {
        let mut y = rng.random_range(40.0..80.0f64).round();
        loop {
            let lines = rng.random_range(1..=4usize);
            let words: Vec<Vec<String>> = (0..lines)
                .map(|_| {
                    let mut line: Vec<String> = (0..rng.random_range(1..=3))
                        .map(|_| NEUTRAL_WORDS.choose(rng).expect("pool").to_string())
                        .collect();
                    while line.len() > 1 && b.width_of(&line) > max_line_w {
                        line.pop();
                    }
                    line
                })
                .collect();
            let n_words: usize = words.iter().map(Vec::len).sum();
            let block_h = lines as f64 * (b.line_h + r * 0.5);
            if b.words.len() + n_words > params.max_words {
                break 'cols;
            }
            if y + block_h > h - 40.0 {
                break;
            }
            let x = cx.round();
            let mut members = Vec::with_capacity(lines);
            for (i, line) in words.into_iter().enumerate() {
                let jitter = rng.random_range(0.0..8.0f64).round();
                members.push(b.segments.len());
                let placed = b.segment(line, x + jitter, y, None);
                let gap = if i + 1 < lines { (rng.random_range(0.15..0.5) * r).round() } else { 0.0 };
                y = placed.y1 + gap;
            }
            blocks.push(members);
            y += rng.random_range(1.4..3.0) * r;
            y = y.round();
        }
    }
    b.ledger.block_sizes = blocks.iter().map(Vec::len).collect();
    // Labels follow the clustering itself, not the generator's intent.
    let regions = detect_salient_regions(&b.segments, &ClusterParams::new(r, params.min_pts));
    let mut kind_of = vec![""; b.segments.len()];
    for reg in &regions {
        let kind = if reg.member_segment_ids.len() >= REGION_CUE_MIN_LINES { "ANSWER" } else { "QUESTION" };
        for &s in &reg.member_segment_ids {
            kind_of[s] = kind;
        }
    }
    b.labels.clear();
    b.ledger.unlabeled_words = 0;
    for (sid, seg) in b.segments.iter().enumerate() {
        let n = seg.word_ids.len();
        b.labels.extend(bio_encode(&[Entity::new(kind_of[sid], 0, n)], n)?);
        *b.ledger.entities.entry(kind_of[sid].to_string()).or_default() += 1;
        *b.ledger.words.entry(kind_of[sid].to_string()).or_default() += n;
    }
    b.finish(params)
}

/// Document `index` of the corpus generated from `seed`. Each index draws from
/// its own ChaCha stream, so documents can be produced in any order.
pub fn synth_document(seed: u64, index: u64, params: &SynthParams) -> Result<SynthDoc> {
    params.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    match params.variant {
        Variant::Form => form_page(params, &mut rng),
        Variant::RegionCue => region_cue_page(params, &mut rng),
    }
}

pub fn synth_generate(seed: u64, count: usize, params: &SynthParams) -> Result<Vec<SynthDoc>> {
    if count == 0 {
        return Err(Error::Invalid("count must be at least 1".into()));
    }
    (0..count as u64).map(|i| synth_document(seed, i, params)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub seed: u64,
    pub count: usize,
    pub params: SynthParams,
    pub files: Vec<String>,
}

pub const MANIFEST: &str = "manifest.json";

/// Writes one JSON file per document plus `manifest.json`.
pub fn write_corpus(dir: &Path, seed: u64, params: &SynthParams, docs: &[SynthDoc]) -> Result<Manifest> {
    fs::create_dir_all(dir)?;
    let mut files = Vec::with_capacity(docs.len());
    for (i, d) in docs.iter().enumerate() {
        let name = format!("doc_{i:05}.json");
        fs::write(dir.join(&name), d.page.to_json()?)?;
        files.push(name);
    }
    let manifest = Manifest { seed, count: docs.len(), params: params.clone(), files };
    fs::write(dir.join(MANIFEST), serde_json::to_string_pretty(&manifest)?)?;
    Ok(manifest)
}

/// A loaded corpus: documents in manifest order with their source paths.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub dir: PathBuf,
    pub docs: Vec<(String, Page)>,
}

impl Corpus {
    pub fn from_pages(dir: impl Into<PathBuf>, pages: Vec<Page>) -> Self {
        let docs = pages.into_iter().enumerate().map(|(i, p)| (format!("doc_{i:05}.json"), p)).collect();
        Self { dir: dir.into(), docs }
    }

    /// Reads the files listed in `manifest.json`, or every `*.json` file in
    /// name order when there is no manifest.
    pub fn load(dir: &Path) -> Result<Self> {
        let manifest_path = dir.join(MANIFEST);
        let files: Vec<String> = if manifest_path.exists() {
            let m: Manifest = serde_json::from_slice(&fs::read(&manifest_path)?)?;
            m.files
        } else {
            let mut names: Vec<String> = fs::read_dir(dir)?
                .filter_map(|e| e.ok())
                .map(|e| e.file_name().to_string_lossy().into_owned())
                .filter(|n| n.ends_with(".json"))
                .collect();
            names.sort();
            names
        };
        if files.is_empty() {
            return Err(Error::Invalid(format!("corpus {} has no documents", dir.display())));
        }
        let docs = files
            .into_iter()
            .map(|f| {
                let page = load_document(&dir.join(&f)).map_err(|e| match e {
                    Error::Parse(m) => Error::Parse(format!("{f}: {m}")),
                    other => other,
                })?;
                Ok((f, page))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { dir: dir.to_path_buf(), docs })
    }

    pub fn len(&self) -> usize {
        self.docs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.docs.is_empty()
    }

    pub fn pages(&self) -> impl Iterator<Item = &Page> {
        self.docs.iter().map(|(_, p)| p)
    }

    /// First `n` documents and the rest.
    pub fn split(&self, n: usize) -> (Corpus, Corpus) {
        let n = n.min(self.docs.len());
        (
            Corpus { dir: self.dir.clone(), docs: self.docs[..n].to_vec() },
            Corpus { dir: self.dir.clone(), docs: self.docs[n..].to_vec() },
        )
    }
}
