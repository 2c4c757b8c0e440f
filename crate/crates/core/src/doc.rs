//! Geometry primitives and the OCR document model.
//!
//! Coordinates are kept in page pixels. They are quantized onto the
//! 0..=1000 grid by [`normalize_box`] only where the layout embedding
//! tables need integer indices.

use std::path::Path;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

/// Upper bound of the normalized coordinate grid.
pub const NORM_MAX: u16 = 1000;

/// Axis-aligned rectangle `(x0, y0)`-`(x1, y1)` with the origin at the top left.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct BBox {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl BBox {
    pub const fn new(x0: f64, y0: f64, x1: f64, y1: f64) -> Self {
        Self { x0, y0, x1, y1 }
    }

    pub fn is_valid(&self) -> bool {
        [self.x0, self.y0, self.x1, self.y1].iter().all(|v| v.is_finite())
            && self.x0 <= self.x1
            && self.y0 <= self.y1
    }

    pub fn width(&self) -> f64 {
        self.x1 - self.x0
    }

    pub fn height(&self) -> f64 {
        self.y1 - self.y0
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn contains(&self, other: &BBox) -> bool {
        self.x0 <= other.x0 && self.y0 <= other.y0 && self.x1 >= other.x1 && self.y1 >= other.y1
    }

    pub fn translate(&self, dx: f64, dy: f64) -> BBox {
        BBox::new(self.x0 + dx, self.y0 + dy, self.x1 + dx, self.y1 + dy)
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.x0, self.y0, self.x1, self.y1]
    }
}

fn json_number(v: f64) -> serde_json::Value {
    if v.fract() == 0.0 && v.abs() < 9.0e15 {
        serde_json::Value::from(v as i64)
    } else {
        serde_json::Value::from(v)
    }
}

// Boxes travel as `[x0, y0, x1, y1]`; integral coordinates are written as integers.
impl Serialize for BBox {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.to_array().map(json_number).serialize(s)
    }
}

impl<'de> Deserialize<'de> for BBox {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let [x0, y0, x1, y1] = <[f64; 4]>::deserialize(d)?;
        Ok(BBox::new(x0, y0, x1, y1))
    }
}

/// A box quantized onto the `0..=1000` grid used by the layout tables.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct NormBox {
    pub x0: u16,
    pub y0: u16,
    pub x1: u16,
    pub y1: u16,
}

impl NormBox {
    pub fn new(x0: u16, y0: u16, x1: u16, y1: u16) -> Result<Self> {
        let b = NormBox { x0, y0, x1, y1 };
        if [x0, y0, x1, y1].iter().any(|&v| v > NORM_MAX) {
            return Err(Error::Invalid(format!("normalized coordinate out of range: {b:?}")));
        }
        Ok(b)
    }

    pub fn width(&self) -> u16 {
        self.x1.saturating_sub(self.x0)
    }

    pub fn height(&self) -> u16 {
        self.y1.saturating_sub(self.y0)
    }
}

/// Intersection over union. Zero for disjoint boxes and for a zero-area union.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let iw = (a.x1.min(b.x1) - a.x0.max(b.x0)).max(0.0);
    let ih = (a.y1.min(b.y1) - a.y0.max(b.y0)).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Per-axis gaps between box boundaries; zero on an axis where the boxes overlap or touch.
pub fn axis_gaps(a: &BBox, b: &BBox) -> (f64, f64) {
    let dx = (a.x0.max(b.x0) - a.x1.min(b.x1)).max(0.0);
    let dy = (a.y0.max(b.y0) - a.y1.min(b.y1)).max(0.0);
    (dx, dy)
}

/// Euclidean length of the boundary gaps. Not a metric: the triangle inequality fails.
pub fn boundary_distance(a: &BBox, b: &BBox) -> f64 {
    let (dx, dy) = axis_gaps(a, b);
    dx.hypot(dy)
}

/// Smallest box covering every input box.
pub fn union_box(boxes: &[BBox]) -> Result<BBox> {
    let (first, rest) = boxes
        .split_first()
        .ok_or_else(|| Error::Invalid("empty region".into()))?;
    Ok(rest.iter().fold(*first, |acc, b| {
        BBox::new(acc.x0.min(b.x0), acc.y0.min(b.y0), acc.x1.max(b.x1), acc.y1.max(b.y1))
    }))
}

/// Maps page pixels onto the integer grid `floor(v * 1000 / dim)`, clamped to `0..=1000`.
pub fn normalize_box(b: &BBox, page_w: f64, page_h: f64) -> Result<NormBox> {
    if !(page_w > 0.0 && page_h > 0.0) {
        return Err(Error::Invalid(format!(
            "page dimensions must be positive, got {page_w}x{page_h}"
        )));
    }
    let q = |v: f64, dim: f64| -> u16 {
        let scaled = (v * f64::from(NORM_MAX) / dim).floor();
        scaled.clamp(0.0, f64::from(NORM_MAX)) as u16
    };
    Ok(NormBox {
        x0: q(b.x0, page_w),
        y0: q(b.y0, page_h),
        x1: q(b.x1, page_w),
        y1: q(b.y1, page_h),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Word {
    pub text: String,
    pub bbox: BBox,
    pub segment_id: usize,
}

/// An OCR text line (or block) grouping consecutive words.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub text: String,
    pub bbox: BBox,
    pub word_ids: Vec<usize>,
}

/// A validated OCR page. Words are in reading order and every word belongs to
/// exactly one segment.
#[derive(Debug, Clone, PartialEq)]
pub struct Page {
    width: u32,
    height: u32,
    image: Option<String>,
    words: Vec<Word>,
    segments: Vec<Segment>,
    labels: Option<Vec<String>>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PageJson {
    width: u32,
    height: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    image: Option<String>,
    words: Vec<Word>,
    segments: Vec<Segment>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    labels: Option<Vec<String>>,
}

/// Segment boxes may differ from their word envelope by at most this many pixels per edge.
const ENVELOPE_TOLERANCE: f64 = 1.0;

impl Page {
    pub fn new(
        width: u32,
        height: u32,
        words: Vec<Word>,
        segments: Vec<Segment>,
        image: Option<String>,
        labels: Option<Vec<String>>,
    ) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::Parse(format!("page dimensions must be positive, got {width}x{height}")));
        }
        for (i, w) in words.iter().enumerate() {
            if w.text.is_empty() {
                return Err(Error::Parse(format!("empty text at words[{i}]")));
            }
            if !w.bbox.is_valid() {
                return Err(Error::Parse(format!("invalid bbox at words[{i}]: {:?}", w.bbox)));
            }
            if w.segment_id >= segments.len() {
                return Err(Error::Parse(format!("dangling segment_id at words[{i}]")));
            }
        }
        let mut seen = vec![false; words.len()];
        for (j, s) in segments.iter().enumerate() {
            if s.word_ids.is_empty() {
                return Err(Error::Parse(format!("empty segment at segments[{j}]")));
            }
            if !s.bbox.is_valid() {
                return Err(Error::Parse(format!("invalid bbox at segments[{j}]: {:?}", s.bbox)));
            }
            for &wid in &s.word_ids {
                let word = words
                    .get(wid)
                    .ok_or_else(|| Error::Parse(format!("dangling word id {wid} at segments[{j}]")))?;
                if word.segment_id != j {
                    return Err(Error::Parse(format!(
                        "segments[{j}] lists words[{wid}] whose segment_id is {}",
                        word.segment_id
                    )));
                }
                if std::mem::replace(&mut seen[wid], true) {
                    return Err(Error::Parse(format!("words[{wid}] listed twice (at segments[{j}])")));
                }
            }
            let boxes: Vec<BBox> = s.word_ids.iter().map(|&w| words[w].bbox).collect();
            let env = union_box(&boxes)?;
            let off = [
                (env.x0 - s.bbox.x0).abs(),
                (env.y0 - s.bbox.y0).abs(),
                (env.x1 - s.bbox.x1).abs(),
                (env.y1 - s.bbox.y1).abs(),
            ];
            if off.iter().any(|&d| d > ENVELOPE_TOLERANCE) {
                return Err(Error::Parse(format!(
                    "segments[{j}] bbox {:?} does not match its word envelope {env:?}",
                    s.bbox
                )));
            }
        }
        if let Some(i) = seen.iter().position(|s| !s) {
            return Err(Error::Parse(format!("words[{i}] is not listed by its segment")));
        }
        if let Some(l) = &labels {
            if l.len() != words.len() {
                return Err(Error::Parse(format!(
                    "labels has {} entries for {} words",
                    l.len(),
                    words.len()
                )));
            }
        }
        Ok(Page { width, height, image, words, segments, labels })
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn image(&self) -> Option<&str> {
        self.image.as_deref()
    }

    pub fn words(&self) -> &[Word] {
        &self.words
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn labels(&self) -> Option<&[String]> {
        self.labels.as_deref()
    }

    /// Same page with the gold labels replaced (or removed).
    pub fn with_labels(mut self, labels: Option<Vec<String>>) -> Result<Self> {
        if let Some(l) = &labels {
            if l.len() != self.words.len() {
                return Err(Error::Invalid(format!(
                    "labels has {} entries for {} words",
                    l.len(),
                    self.words.len()
                )));
            }
        }
        self.labels = labels;
        Ok(self)
    }

    pub fn segment_boxes(&self) -> Vec<BBox> {
        self.segments.iter().map(|s| s.bbox).collect()
    }

    pub fn normalize(&self, b: &BBox) -> NormBox {
        // width/height are validated non-zero
        normalize_box(b, f64::from(self.width), f64::from(self.height)).expect("page dims validated")
    }

    pub fn to_json(&self) -> Result<String> {
        let raw = PageJson {
            width: self.width,
            height: self.height,
            image: self.image.clone(),
            words: self.words.clone(),
            segments: self.segments.clone(),
            labels: self.labels.clone(),
        };
        Ok(serde_json::to_string(&raw)?)
    }
}

/// Parses and validates a document in the JSON interchange format.
pub fn parse_document(bytes: &[u8]) -> Result<Page> {
    let raw: PageJson =
        serde_json::from_slice(bytes).map_err(|e| Error::Parse(format!("schema violation: {e}")))?;
    Page::new(raw.width, raw.height, raw.words, raw.segments, raw.image, raw.labels)
}

pub fn load_document(path: &Path) -> Result<Page> {
    let bytes = std::fs::read(path)?;
    parse_document(&bytes).map_err(|e| match e {
        Error::Parse(m) => Error::Parse(format!("{}: {m}", path.display())),
        other => other,
    })
}
