//! Rule-based detectors for generic entity categories, producing a multi-hot
//! vector per text segment.

use regex::Regex;

use crate::error::{Error, Result};

pub const DEFAULT_INVENTORY: [&str; 8] = ["PERSON", "ORG", "GPE", "DATE", "TIME", "MONEY", "PERCENT", "CARDINAL"];

const MONTH: &str = r"(?:jan(?:uary)?|feb(?:ruary)?|mar(?:ch)?|apr(?:il)?|may|june?|july?|aug(?:ust)?|sep(?:t(?:ember)?)?|oct(?:ober)?|nov(?:ember)?|dec(?:ember)?)\.?";

const FIRST_NAMES: &[&str] = &[
    "john", "mary", "robert", "linda", "james", "susan", "david", "karen", "paul", "nancy", "michael", "patricia",
    "william", "barbara", "richard", "elizabeth", "thomas", "jennifer", "charles", "margaret",
];

const PLACES: &[&str] = &[
    "boston", "chicago", "denver", "atlanta", "seattle", "richmond", "dallas", "phoenix", "new york", "washington",
    "london", "paris", "tokyo", "california", "texas", "virginia", "new jersey", "north carolina", "canada", "germany",
    "france", "japan", "china", "usa", "u.s.a.", "united states",
];

fn word_list(words: &[&str]) -> String {
    words.iter().map(|w| regex::escape(w)).collect::<Vec<_>>().join("|")
}

fn builtin_pattern(name: &str) -> Option<String> {
    let p = match name {
        "PERSON" => format!(
            r"(?:\b(?i:mr|mrs|ms|dr|prof)\.?\s+[A-Z][a-z]+)|(?i:\b(?:{})\b)\s+[A-Z][a-z]+",
            word_list(FIRST_NAMES)
        ),
        "ORG" => r"\b[A-Z][A-Za-z&]*(?:\s+[A-Z][A-Za-z&]*)*\s+(?:Inc|Corp|Corporation|Company|Co|LLC|Ltd|University|Institute|Association|Foundation|Bank)\b\.?".to_string(),
        "GPE" => format!(r"(?i)\b(?:{})(?:\b|$)", word_list(PLACES)),
        "DATE" => format!(
            r"(?i)\b{MONTH}\s+\d{{1,2}}(?:st|nd|rd|th)?,?(?:\s+\d{{4}})?\b|\b\d{{1,2}}\s+{MONTH}\s+\d{{4}}\b|\b\d{{1,2}}/\d{{1,2}}/\d{{2,4}}\b|\b\d{{4}}-\d{{2}}-\d{{2}}\b|\b{MONTH}\s+\d{{4}}\b"
        ),
        "TIME" => r"(?i)\b\d{1,2}:\d{2}(?::\d{2})?(?:\s*[ap]\.?m\.?)?|\b\d{1,2}\s*[ap]\.?m\.?(?:\s|$)".to_string(),
        "MONEY" => r"(?i)[$€£]\s?\d[\d,]*(?:\.\d+)?|\b\d[\d,]*(?:\.\d+)?\s?(?:dollars|usd|cents)\b".to_string(),
        "PERCENT" => r"(?i)\b\d+(?:\.\d+)?\s?(?:%|percent\b)".to_string(),
        "CARDINAL" => r"\b\d+(?:[.,]\d+)*\b".to_string(),
        _ => return None,
    };
    Some(p)
}

/// Ordered inventory of named detectors; bit `k` of a vector is detector `k`.
#[derive(Debug, Clone)]
pub struct RulePack {
    names: Vec<String>,
    rules: Vec<Regex>,
}

impl Default for RulePack {
    fn default() -> Self {
        Self::builtin(&DEFAULT_INVENTORY).expect("built-in rules compile")
    }
}

impl RulePack {
    /// Built-in detectors for the given category names, in order.
    pub fn builtin<S: AsRef<str>>(names: &[S]) -> Result<Self> {
        let mut pack = Self { names: Vec::new(), rules: Vec::new() };
        for n in names {
            let n = n.as_ref();
            let p = builtin_pattern(n)
                .ok_or_else(|| Error::Config(format!("no built-in common-sense detector named {n:?}")))?;
            pack.push(n, &p)?;
        }
        Ok(pack)
    }

    /// Appends a detector that fires when `pattern` matches anywhere in the text.
    pub fn push(&mut self, name: &str, pattern: &str) -> Result<()> {
        if self.names.iter().any(|n| n == name) {
            return Err(Error::Config(format!("duplicate common-sense category {name:?}")));
        }
        let re = Regex::new(pattern).map_err(|e| Error::Config(format!("common-sense rule {name}: {e}")))?;
        self.names.push(name.to_string());
        self.rules.push(re);
        Ok(())
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn len(&self) -> usize {
        self.rules.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rules.is_empty()
    }

    /// Multi-hot vector of detectors firing on `text`.
    pub fn detect(&self, text: &str) -> Vec<f64> {
        self.rules.iter().map(|r| if r.is_match(text) { 1.0 } else { 0.0 }).collect()
    }
}
