// SPDX-License-Identifier: MIT OR Apache-2.0

//! Per-occurrence detection scores.
//!
//! The reliability of one (layer, head) cell is `R = M * (1 - SAE)`, where `M`
//! is the query row's total attention on visual tokens. An occurrence's score
//! averages `R` over a layer range for each head, then over heads.
//!
//! Baselines, all oriented so that higher means "more likely real":
//!
//! | scorer   | value                                           |
//! |----------|-------------------------------------------------|
//! | `pe`     | `-H(next-token distribution)`                   |
//! | `msp`    | largest next-token probability                  |
//! | `margin` | top-1 minus top-2 probability                   |
//! | `energy` | `logsumexp(next-token logits)` (negated energy) |
//! | `var`    | mean visual mass `M` over the layer range       |

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sae::SaeTensor;
use crate::trace::{AttentionTrace, Label, ObjectOccurrence, StepRecord};

/// Summaries of one step's next-token distribution.
///
/// `pe` is the raw predictive entropy (nats) and `energy` the energy score
/// `-logsumexp(logits)`; neither is oriented here.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NextTokenStats {
    pub pe: f64,
    pub msp: f64,
    pub margin: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub energy: Option<f64>,
}

impl NextTokenStats {
    /// From a probability vector. The energy score needs logits and is left unset.
    pub fn from_probs(probs: &[f64]) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::Validation("empty next-token distribution".into()));
        }
        if probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(Error::OutOfRange(
                "next-token probabilities must be finite and non-negative".into(),
            ));
        }
        let pe = -probs.iter().filter(|&&p| p > 0.0).map(|&p| p * p.ln()).sum::<f64>();
        let (top1, top2) = top_two(probs);
        Ok(Self {
            pe: pe.max(0.0),
            msp: top1,
            margin: top1 - top2,
            energy: None,
        })
    }

    pub fn from_logits(logits: &[f64]) -> Result<Self> {
        if logits.is_empty() || logits.iter().any(|z| !z.is_finite()) {
            return Err(Error::Validation(
                "next-token logits must be non-empty and finite".into(),
            ));
        }
        let lse = logsumexp(logits);
        let probs: Vec<f64> = logits.iter().map(|z| (z - lse).exp()).collect();
        let mut stats = Self::from_probs(&probs)?;
        stats.energy = Some(-lse);
        Ok(stats)
    }
}

fn top_two(values: &[f64]) -> (f64, f64) {
    let mut first = f64::NEG_INFINITY;
    let mut second = f64::NEG_INFINITY;
    for &v in values {
        if v > first {
            second = first;
            first = v;
        } else if v > second {
            second = v;
        }
    }
    if second == f64::NEG_INFINITY {
        second = 0.0;
    }
    (first, second)
}

pub(crate) fn logsumexp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Inclusive range of layers `[start, end]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerRange {
    pub start: usize,
    pub end: usize,
}

impl LayerRange {
    pub fn new(start: usize, end: usize) -> Self {
        Self { start, end }
    }

    /// Middle third of `num_layers`: `[L/3, 2L/3 - 1]`, widened to a single
    /// layer when that is empty.
    pub fn middle_third(num_layers: usize) -> Self {
        let start = num_layers / 3;
        let end = (2 * num_layers / 3).saturating_sub(1).max(start);
        Self { start, end }
    }

    pub fn validate(&self, num_layers: usize) -> Result<()> {
        if self.start > self.end || self.end >= num_layers {
            return Err(Error::OutOfRange(format!(
                "layer range {self} does not fit {num_layers} layers"
            )));
        }
        Ok(())
    }

    pub fn layers(&self) -> std::ops::RangeInclusive<usize> {
        self.start..=self.end
    }

    pub fn len(&self) -> usize {
        self.end + 1 - self.start
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

impl fmt::Display for LayerRange {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}..{}", self.start, self.end)
    }
}

impl FromStr for LayerRange {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        let (a, b) = s
            .split_once("..")
            .ok_or_else(|| format!("layer range must look like A..B, got {s:?}"))?;
        let start = a.trim().parse().map_err(|e| format!("layer range start: {e}"))?;
        let end = b.trim().parse().map_err(|e| format!("layer range end: {e}"))?;
        if start > end {
            return Err(format!("layer range {s:?} is reversed"));
        }
        Ok(Self { start, end })
    }
}

/// `R = M * (1 - SAE)` for one (layer, head) cell.
pub fn reliability_cell(mass: f64, sae: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&mass) {
        return Err(Error::OutOfRange(format!("attention mass {mass} outside [0, 1]")));
    }
    if !(0.0..=1.0).contains(&sae) {
        return Err(Error::OutOfRange(format!("SAE {sae} outside [0, 1]")));
    }
    Ok(mass * (1.0 - sae))
}

fn step_for<'t>(trace: &'t AttentionTrace, occurrence: &ObjectOccurrence) -> Result<&'t StepRecord> {
    trace.step(occurrence.representative_step).ok_or_else(|| {
        Error::Validation(format!(
            "trace {:?} has no step {} (group {})",
            trace.image_id(),
            occurrence.representative_step,
            occurrence.group_id
        ))
    })
}

/// Reliability of an occurrence: mean over `range` per head, then mean over heads.
pub fn reliability_score(
    trace: &AttentionTrace,
    sae: &SaeTensor,
    occurrence: &ObjectOccurrence,
    range: LayerRange,
) -> Result<f64> {
    range.validate(trace.num_layers())?;
    let step = step_for(trace, occurrence)?;
    let k = step.index;
    let mut head_sum = 0.0;
    for h in 0..trace.num_heads() {
        let mut layer_sum = 0.0;
        for l in range.layers() {
            layer_sum += reliability_cell(step.mass(l, h), sae.at_step(k, l, h))?;
        }
        head_sum += layer_sum / range.len() as f64;
    }
    Ok(head_sum / trace.num_heads() as f64)
}

/// Which detection score to compute.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scorer {
    Reliability,
    Pe,
    Msp,
    Margin,
    Energy,
    Var,
}

impl Scorer {
    pub const ALL: [Scorer; 6] = [
        Scorer::Reliability,
        Scorer::Pe,
        Scorer::Msp,
        Scorer::Margin,
        Scorer::Energy,
        Scorer::Var,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Scorer::Reliability => "reliability",
            Scorer::Pe => "pe",
            Scorer::Msp => "msp",
            Scorer::Margin => "margin",
            Scorer::Energy => "energy",
            Scorer::Var => "var",
        }
    }
}

impl fmt::Display for Scorer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Scorer {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        Scorer::ALL
            .into_iter()
            .find(|sc| sc.name() == s)
            .ok_or_else(|| format!("unknown scorer {s:?}"))
    }
}

/// A baseline score for one step, oriented so higher means more reliable.
pub fn baseline_score(scorer: Scorer, step: &StepRecord, range: LayerRange) -> Result<f64> {
    let stats = || {
        step.next_token.ok_or_else(|| {
            Error::BaselineUnavailable(format!("{scorer} needs next-token scalars at step {}", step.index))
        })
    };
    match scorer {
        Scorer::Pe => Ok(-stats()?.pe),
        Scorer::Msp => Ok(stats()?.msp),
        Scorer::Margin => Ok(stats()?.margin),
        Scorer::Energy => stats()?.energy.map(|e| -e).ok_or_else(|| {
            Error::BaselineUnavailable(format!("energy needs next-token logits at step {}", step.index))
        }),
        Scorer::Var => {
            let heads = step.attn.num_heads();
            range.validate(step.attn.num_layers())?;
            let total: f64 = range
                .layers()
                .flat_map(|l| (0..heads).map(move |h| (l, h)))
                .map(|(l, h)| step.mass(l, h))
                .sum();
            Ok(total / (range.len() * heads) as f64)
        }
        Scorer::Reliability => Err(Error::Validation(
            "reliability is not a baseline; use reliability_score".into(),
        )),
    }
}

/// A scored detection unit.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredToken {
    pub occurrence: ObjectOccurrence,
    pub score: f64,
    pub scorer: Scorer,
}

/// One JSONL line of a scores file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRecord {
    pub image_id: String,
    pub group_id: u32,
    pub category: String,
    pub label: Label,
    pub scorer: Scorer,
    pub score: f64,
}

impl From<&ScoredToken> for ScoreRecord {
    fn from(t: &ScoredToken) -> Self {
        Self {
            image_id: t.occurrence.image_id.clone(),
            group_id: t.occurrence.group_id,
            category: t.occurrence.category.clone(),
            label: t.occurrence.label,
            scorer: t.scorer,
            score: t.score,
        }
    }
}

/// Scores every occurrence with one scorer.
pub fn score_occurrences(
    trace: &AttentionTrace,
    sae: &SaeTensor,
    occurrences: &[ObjectOccurrence],
    scorer: Scorer,
    range: LayerRange,
) -> Result<Vec<ScoredToken>> {
    occurrences
        .iter()
        .map(|occ| {
            let score = match scorer {
                Scorer::Reliability => reliability_score(trace, sae, occ, range)?,
                _ => baseline_score(scorer, step_for(trace, occ)?, range)?,
            };
            if !score.is_finite() {
                return Err(Error::Validation(format!(
                    "{scorer} produced a non-finite score for group {} of {:?}",
                    occ.group_id, occ.image_id
                )));
            }
            Ok(ScoredToken {
                occurrence: occ.clone(),
                score,
                scorer,
            })
        })
        .collect()
}
