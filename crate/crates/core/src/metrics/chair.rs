// SPDX-License-Identifier: MIT OR Apache-2.0

//! Caption-level object hallucination rates (CHAIR) and object-level P/R/F1.
//!
//! A mention is hallucinated when its canonical category is missing from the
//! image's ground-truth set.
//!
//! * `C_I` = hallucinated mentions / all mentions.
//! * `C_S` = captions with at least one hallucinated mention / captions with
//!   at least one mention. Captions without mentions are left out of the
//!   denominator.
//! * Precision and recall are micro-averaged over captions using the set of
//!   distinct mentioned categories per caption.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const COCO_LEXICON: &str = include_str!("../../data/coco_lexicon.json");

/// Synonym to canonical-category map used for mention extraction.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ObjectLexicon {
    map: BTreeMap<String, String>,
    vocabulary: BTreeSet<String>,
    max_words: usize,
}

impl ObjectLexicon {
    /// Builds a lexicon; keys are lowercased and whitespace-normalized.
    pub fn new(entries: impl IntoIterator<Item = (String, String)>) -> Result<Self> {
        let mut map = BTreeMap::new();
        for (syn, cat) in entries {
            let key = words(&syn).join(" ");
            if key.is_empty() {
                return Err(Error::Validation(format!("lexicon key {syn:?} has no words")));
            }
            let cat = cat.trim().to_lowercase();
            if cat.is_empty() {
                return Err(Error::Validation(format!(
                    "lexicon entry {syn:?} maps to an empty category"
                )));
            }
            map.insert(key, cat);
        }
        if map.is_empty() {
            return Err(Error::Validation("lexicon is empty".into()));
        }
        let vocabulary = map.values().cloned().collect();
        let max_words = map.keys().map(|k| k.split(' ').count()).max().unwrap_or(1);
        Ok(Self {
            map,
            vocabulary,
            max_words,
        })
    }

    /// The bundled COCO-80 synonym list.
    pub fn coco() -> Self {
        Self::from_json_str(COCO_LEXICON).expect("bundled lexicon is valid")
    }

    /// Parses `{synonym: category}` JSON.
    pub fn from_json_str(s: &str) -> std::result::Result<Self, LexiconParseError> {
        let raw: BTreeMap<String, String> = serde_json::from_str(s)?;
        Ok(Self::new(raw)?)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json_str(&text).map_err(|e| match e {
            LexiconParseError::Json(source) => Error::json(path, source),
            LexiconParseError::Invalid(err) => err,
        })
    }

    pub fn lookup(&self, phrase: &str) -> Option<&str> {
        self.map.get(phrase).map(String::as_str)
    }

    pub fn vocabulary(&self) -> &BTreeSet<String> {
        &self.vocabulary
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }
}

#[derive(Debug, thiserror::Error)]
pub enum LexiconParseError {
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Invalid(#[from] Error),
}

fn words(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_owned)
        .collect()
}

/// Singular candidates for a possibly plural word, most literal first.
fn singular_forms(word: &str) -> Vec<String> {
    let mut out = vec![word.to_owned()];
    if let Some(stem) = word.strip_suffix("ies") {
        out.push(format!("{stem}y"));
    }
    if let Some(stem) = word.strip_suffix("es") {
        out.push(stem.to_owned());
    }
    if let Some(stem) = word.strip_suffix('s') {
        if !stem.ends_with('s') {
            out.push(stem.to_owned());
        }
    }
    out
}

/// Canonical categories mentioned in `caption`, in order, with multiplicity.
///
/// Matching is longest-first over word n-grams; the last word of an n-gram
/// may be plural.
pub fn extract_mentions(caption: &str, lexicon: &ObjectLexicon) -> Vec<String> {
    let toks = words(caption);
    let mut mentions = Vec::new();
    let mut i = 0;
    'outer: while i < toks.len() {
        let longest = lexicon.max_words.min(toks.len() - i);
        for len in (1..=longest).rev() {
            let head = toks[i..i + len - 1].join(" ");
            for last in singular_forms(&toks[i + len - 1]) {
                let phrase = if head.is_empty() {
                    last
                } else {
                    format!("{head} {last}")
                };
                if let Some(cat) = lexicon.lookup(&phrase) {
                    mentions.push(cat.to_owned());
                    i += len;
                    continue 'outer;
                }
            }
        }
        i += 1;
    }
    mentions
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaptionRecord {
    pub image_id: String,
    pub caption: String,
}

/// Image id to ground-truth category set.
pub type GroundTruth = BTreeMap<String, BTreeSet<String>>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageChair {
    pub image_id: String,
    pub mentions: Vec<String>,
    pub hallucinated: Vec<String>,
    /// Distinct mentioned categories that are in the ground truth.
    pub correct_unique: usize,
    pub mentioned_unique: usize,
    pub ground_truth: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChairResult {
    pub c_s: f64,
    pub c_i: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub n_captions: usize,
    pub n_mentions: usize,
    pub n_hallucinated: usize,
    pub per_image: Vec<ImageChair>,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

pub fn chair(captions: &[CaptionRecord], ground_truth: &GroundTruth, lexicon: &ObjectLexicon) -> Result<ChairResult> {
    let mut per_image = Vec::with_capacity(captions.len());
    for rec in captions {
        let gt = ground_truth
            .get(&rec.image_id)
            .ok_or_else(|| Error::MissingGroundTruth(rec.image_id.clone()))?;
        let mentions = extract_mentions(&rec.caption, lexicon);
        let hallucinated: Vec<String> = mentions.iter().filter(|m| !gt.contains(*m)).cloned().collect();
        let unique: BTreeSet<&String> = mentions.iter().collect();
        per_image.push(ImageChair {
            image_id: rec.image_id.clone(),
            correct_unique: unique.iter().filter(|m| gt.contains(**m)).count(),
            mentioned_unique: unique.len(),
            ground_truth: gt.len(),
            mentions,
            hallucinated,
        });
    }

    let n_mentions: usize = per_image.iter().map(|r| r.mentions.len()).sum();
    let n_hallucinated: usize = per_image.iter().map(|r| r.hallucinated.len()).sum();
    let with_mentions = per_image.iter().filter(|r| !r.mentions.is_empty()).count();
    let with_halluc = per_image.iter().filter(|r| !r.hallucinated.is_empty()).count();
    let correct: usize = per_image.iter().map(|r| r.correct_unique).sum();
    let mentioned: usize = per_image.iter().map(|r| r.mentioned_unique).sum();
    let gt_total: usize = per_image.iter().map(|r| r.ground_truth).sum();

    let precision = ratio(correct, mentioned);
    let recall = ratio(correct, gt_total);
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    Ok(ChairResult {
        c_s: ratio(with_halluc, with_mentions),
        c_i: ratio(n_hallucinated, n_mentions),
        precision,
        recall,
        f1,
        n_captions: captions.len(),
        n_mentions,
        n_hallucinated,
        per_image,
    })
}
