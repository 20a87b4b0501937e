//! Twin-pair data model and its JSON Lines file format.
//!
//! One pair per line:
//!
//! ```text
//! {"id":"p1","sentences":[{"text":"... _ ...","label":0},{"text":"... _ ...","label":1}],"candidates":["a","b"]}
//! ```
//!
//! Files written by [`save_corpus`] are canonical: compact JSON, fields in the
//! order above, `null` for a missing label, `\n` after every line.

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// The pronoun placeholder inside a sentence.
pub const PLACEHOLDER: char = '_';

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SchemaSentence {
    pub text: String,
    /// Index of the correct candidate. Only used for evaluation.
    pub label: Option<u8>,
}

impl SchemaSentence {
    pub fn new(text: impl Into<String>, label: Option<u8>) -> Self {
        SchemaSentence {
            text: text.into(),
            label,
        }
    }

    /// Text before and after the single placeholder.
    pub fn split_placeholder(&self) -> Option<(&str, &str)> {
        if self.placeholder_count() != 1 {
            return None;
        }
        self.text.split_once(PLACEHOLDER)
    }

    fn placeholder_count(&self) -> usize {
        self.text.matches(PLACEHOLDER).count()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TwinPair {
    pub id: String,
    pub sentences: [SchemaSentence; 2],
    pub candidates: [String; 2],
}

impl TwinPair {
    /// Every invariant this pair breaks, in a fixed order. Empty when well-formed.
    pub fn violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        for (j, s) in self.sentences.iter().enumerate() {
            match s.placeholder_count() {
                0 => out.push(format!("missing placeholder in sentence {j}")),
                1 => {}
                n => out.push(format!("{n} placeholders in sentence {j}")),
            }
            if let Some(l) = s.label {
                if l > 1 {
                    out.push(format!("label {l} out of range in sentence {j}"));
                }
            }
        }
        if self.sentences[0].text == self.sentences[1].text {
            out.push("sentences identical".to_string());
        }
        for (i, c) in self.candidates.iter().enumerate() {
            if c.trim().is_empty() {
                out.push(format!("empty candidate {i}"));
            }
        }
        if self.candidates[0] == self.candidates[1] {
            out.push("duplicate candidates".to_string());
        }
        out
    }

    pub fn is_labeled(&self) -> bool {
        self.sentences.iter().all(|s| s.label.is_some())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Corpus {
    pub name: String,
    pub pairs: Vec<TwinPair>,
}

impl Corpus {
    pub fn new(name: impl Into<String>, pairs: Vec<TwinPair>) -> Self {
        Corpus {
            name: name.into(),
            pairs,
        }
    }

    /// True iff the corpus is non-empty and every sentence carries a label.
    pub fn is_labeled(&self) -> bool {
        !self.pairs.is_empty() && self.pairs.iter().all(TwinPair::is_labeled)
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Copy of the corpus with every label removed.
    pub fn without_labels(&self) -> Corpus {
        let mut out = self.clone();
        for pair in &mut out.pairs {
            for s in &mut pair.sentences {
                s.label = None;
            }
        }
        out
    }

    /// Splits off the last `n` pairs, e.g. for a held-out set.
    pub fn split_tail(mut self, n: usize, tail_name: impl Into<String>) -> (Corpus, Corpus) {
        let at = self.pairs.len().saturating_sub(n);
        let tail = self.pairs.split_off(at);
        (self, Corpus::new(tail_name, tail))
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for pair in &self.pairs {
            out.push_str(&serde_json::to_string(pair).expect("pairs always serialize"));
            out.push('\n');
        }
        out
    }

    /// Parses JSON Lines text. Every pair is checked against its invariants.
    pub fn from_jsonl(name: impl Into<String>, text: &str) -> Result<Corpus> {
        let mut pairs = Vec::new();
        let mut seen = HashSet::new();
        for (idx, line) in text.lines().enumerate() {
            let line_no = idx + 1;
            if line.trim().is_empty() {
                return Err(Error::Line {
                    line: line_no,
                    reason: "empty line".into(),
                });
            }
            let pair: TwinPair = serde_json::from_str(line).map_err(|e| Error::Line {
                line: line_no,
                reason: format!("malformed pair ({e})"),
            })?;
            if let Some(first) = pair.violations().into_iter().next() {
                // "missing placeholder in sentence 0" -> "missing placeholder"
                let reason = first
                    .strip_suffix(" in sentence 0")
                    .or_else(|| first.strip_suffix(" in sentence 1"))
                    .unwrap_or(&first)
                    .to_string();
                return Err(Error::Line {
                    line: line_no,
                    reason,
                });
            }
            if !seen.insert(pair.id.clone()) {
                return Err(Error::Line {
                    line: line_no,
                    reason: format!("duplicate id {:?}", pair.id),
                });
            }
            pairs.push(pair);
        }
        Ok(Corpus::new(name, pairs))
    }
}

/// Loads a corpus; its name is the file stem.
pub fn load_corpus(path: impl AsRef<Path>) -> Result<Corpus> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    Corpus::from_jsonl(name, &text)
}

pub fn save_corpus(corpus: &Corpus, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, corpus.to_jsonl()).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Violation {
    pub pair_id: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ValidationReport {
    pub name: String,
    pub n_pairs: usize,
    pub n_sentences: usize,
    /// Fraction of sentences carrying a label.
    pub labeled_fraction: f64,
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_clean(&self) -> bool {
        self.violations.is_empty()
    }
}

pub fn validate(corpus: &Corpus) -> ValidationReport {
    let mut violations = Vec::new();
    let mut seen = HashSet::new();
    let mut labeled = 0usize;
    for pair in &corpus.pairs {
        if !seen.insert(pair.id.as_str()) {
            violations.push(Violation {
                pair_id: pair.id.clone(),
                reason: "duplicate id".into(),
            });
        }
        for reason in pair.violations() {
            violations.push(Violation {
                pair_id: pair.id.clone(),
                reason,
            });
        }
        labeled += pair.sentences.iter().filter(|s| s.label.is_some()).count();
    }
    let n_sentences = 2 * corpus.pairs.len();
    ValidationReport {
        name: corpus.name.clone(),
        n_pairs: corpus.pairs.len(),
        n_sentences,
        labeled_fraction: if n_sentences == 0 {
            0.0
        } else {
            labeled as f64 / n_sentences as f64
        },
        violations,
    }
}
