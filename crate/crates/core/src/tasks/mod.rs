//! Sequence-labeling tags, entity-level scoring, ANLS and the synthetic form corpus.

pub mod synth;

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const OUTSIDE: &str = "O";

/// `O` plus `B-t` / `I-t` for every entity type, in that order.
#[derive(Debug, Clone, PartialEq)]
pub struct BioTagSet {
    types: Vec<String>,
    tags: Vec<String>,
    index: HashMap<String, usize>,
}

impl Default for BioTagSet {
    fn default() -> Self {
        Self::new(&["HEADER", "QUESTION", "ANSWER"]).expect("default types are valid")
    }
}

impl BioTagSet {
    pub fn new<S: AsRef<str>>(types: &[S]) -> Result<Self> {
        let mut tags = vec![OUTSIDE.to_string()];
        for t in types {
            let t = t.as_ref();
            if t.is_empty() || t.contains(char::is_whitespace) {
                return Err(Error::Config(format!("invalid entity type {t:?}")));
            }
            tags.push(format!("B-{t}"));
            tags.push(format!("I-{t}"));
        }
        let mut index = HashMap::new();
        for (i, t) in tags.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::Config(format!("duplicate tag {t}")));
            }
        }
        Ok(Self { types: types.iter().map(|t| t.as_ref().to_string()).collect(), tags, index })
    }

    pub fn types(&self) -> &[String] {
        &self.types
    }

    pub fn len(&self) -> usize {
        self.tags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tags.is_empty()
    }

    pub fn tag(&self, id: usize) -> &str {
        &self.tags[id]
    }

    pub fn id(&self, tag: &str) -> Result<usize> {
        self.index.get(tag).copied().ok_or_else(|| Error::Invalid(format!("unknown tag {tag:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Entity {
    pub kind: String,
    pub start: usize,
    pub end: usize,
}

impl Entity {
    pub fn new(kind: impl Into<String>, start: usize, end: usize) -> Self {
        Self { kind: kind.into(), start, end }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DecodeMode {
    /// An `I-t` that does not continue a `t` entity starts a new one.
    #[default]
    Lenient,
    /// An `I-t` that does not continue a `t` entity is read as `O`.
    Strict,
}

enum Tag<'a> {
    Outside,
    Begin(&'a str),
    Inside(&'a str),
}

fn parse_tag(tag: &str) -> Result<Tag<'_>> {
    if tag == OUTSIDE {
        return Ok(Tag::Outside);
    }
    match tag.split_once('-') {
        Some(("B", t)) if !t.is_empty() => Ok(Tag::Begin(t)),
        Some(("I", t)) if !t.is_empty() => Ok(Tag::Inside(t)),
        _ => Err(Error::Invalid(format!("unknown tag {tag:?}"))),
    }
}

pub fn bio_decode<S: AsRef<str>>(tags: &[S], mode: DecodeMode) -> Result<Vec<Entity>> {
    let mut out: Vec<Entity> = Vec::new();
    let mut open: Option<usize> = None;
    for (i, tag) in tags.iter().enumerate() {
        match parse_tag(tag.as_ref())? {
            Tag::Outside => open = None,
            Tag::Begin(t) => {
                out.push(Entity::new(t, i, i + 1));
                open = Some(out.len() - 1);
            }
            Tag::Inside(t) => match open {
                Some(k) if out[k].kind == t => out[k].end = i + 1,
                _ if mode == DecodeMode::Lenient => {
                    out.push(Entity::new(t, i, i + 1));
                    open = Some(out.len() - 1);
                }
                _ => open = None,
            },
        }
    }
    Ok(out)
}

/// Tags for `len` positions; entities must be disjoint and in range.
pub fn bio_encode(entities: &[Entity], len: usize) -> Result<Vec<String>> {
    let mut tags = vec![OUTSIDE.to_string(); len];
    let mut used = vec![false; len];
    for e in entities {
        if e.start >= e.end || e.end > len {
            return Err(Error::Invalid(format!("entity span [{}, {}) outside [0, {len})", e.start, e.end)));
        }
        for i in e.start..e.end {
            if std::mem::replace(&mut used[i], true) {
                return Err(Error::Invalid(format!("overlapping entities at position {i}")));
            }
            tags[i] = format!("{}-{}", if i == e.start { "B" } else { "I" }, e.kind);
        }
    }
    Ok(tags)
}

/// Match counts, accumulated over documents for micro averaging.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Counts {
    pub true_positive: usize,
    pub predicted: usize,
    pub gold: usize,
}

impl Counts {
    pub fn add(&mut self, other: Counts) {
        self.true_positive += other.true_positive;
        self.predicted += other.predicted;
        self.gold += other.gold;
    }

    pub fn scores(&self) -> Scores {
        if self.predicted == 0 && self.gold == 0 {
            return Scores { precision: 1.0, recall: 1.0, f1: 1.0 };
        }
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let precision = ratio(self.true_positive, self.predicted);
        let recall = ratio(self.true_positive, self.gold);
        let f1 = if precision + recall == 0.0 { 0.0 } else { 2.0 * precision * recall / (precision + recall) };
        Scores { precision, recall, f1 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Scores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Exact `(type, start, end)` matches.
pub fn match_counts(pred: &[Entity], gold: &[Entity]) -> Counts {
    let mut remaining: BTreeMap<&Entity, usize> = BTreeMap::new();
    for g in gold {
        *remaining.entry(g).or_default() += 1;
    }
    let mut tp = 0;
    for p in pred {
        if let Some(n) = remaining.get_mut(p) {
            if *n > 0 {
                *n -= 1;
                tp += 1;
            }
        }
    }
    Counts { true_positive: tp, predicted: pred.len(), gold: gold.len() }
}

pub fn entity_f1(pred: &[Entity], gold: &[Entity]) -> Scores {
    match_counts(pred, gold).scores()
}

/// Micro counts overall and per entity type.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct EntityTally {
    pub micro: Counts,
    pub per_type: BTreeMap<String, Counts>,
}

impl EntityTally {
    pub fn add(&mut self, pred: &[Entity], gold: &[Entity]) {
        self.micro.add(match_counts(pred, gold));
        let mut kinds: Vec<&str> = pred.iter().chain(gold).map(|e| e.kind.as_str()).collect();
        kinds.sort_unstable();
        kinds.dedup();
        for k in kinds {
            let p: Vec<Entity> = pred.iter().filter(|e| e.kind == k).cloned().collect();
            let g: Vec<Entity> = gold.iter().filter(|e| e.kind == k).cloned().collect();
            self.per_type.entry(k.to_string()).or_default().add(match_counts(&p, &g));
        }
    }
}

pub const ANLS_THRESHOLD: f64 = 0.5;

/// Normalized Levenshtein similarity of lowercased strings, counted in chars.
pub fn nls(a: &str, b: &str) -> f64 {
    let (a, b) = (a.to_lowercase(), b.to_lowercase());
    let longest = a.chars().count().max(b.chars().count());
    if longest == 0 {
        return 1.0;
    }
    1.0 - strsim::levenshtein(&a, &b) as f64 / longest as f64
}

/// Best thresholded similarity against any gold answer.
pub fn anls<S: AsRef<str>>(pred: &str, golds: &[S]) -> Result<f64> {
    if golds.is_empty() {
        return Err(Error::Invalid("anls needs at least one gold answer".into()));
    }
    Ok(golds
        .iter()
        .map(|g| nls(pred, g.as_ref()))
        .map(|s| if s >= ANLS_THRESHOLD { s } else { 0.0 })
        .fold(0.0, f64::max))
}

/// Mean ANLS over questions.
pub fn anls_dataset<S: AsRef<str>>(preds: &[S], golds: &[Vec<String>]) -> Result<f64> {
    if preds.len() != golds.len() || preds.is_empty() {
        return Err(Error::Invalid(format!("{} predictions for {} questions", preds.len(), golds.len())));
    }
    let mut total = 0.0;
    for (p, g) in preds.iter().zip(golds) {
        total += anls(p.as_ref(), g)?;
    }
    Ok(total / preds.len() as f64)
}
