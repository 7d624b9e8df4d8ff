// SPDX-License-Identifier: MIT OR Apache-2.0

//! ROC / precision-recall evaluation of detection scores.
//!
//! Real occurrences are positives, hallucinated ones negatives; `unknown`
//! occurrences are skipped. The sweep visits distinct scores in descending
//! order, so tied scores form a single operating point and the result does
//! not depend on input order. AUROC equals the Mann-Whitney statistic with
//! half credit for ties; AP is the step sum `sum (R_i - R_{i-1}) * P_i`.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::reliability::ScoredToken;
use crate::trace::Label;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub fpr: f64,
    pub tpr: f64,
    /// Score threshold (`score >= threshold` is predicted real); `None` for the origin.
    pub threshold: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrPoint {
    pub recall: f64,
    pub precision: f64,
    pub threshold: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionResult {
    pub auroc: f64,
    pub ap: f64,
    pub n_pos: usize,
    pub n_neg: usize,
    pub roc_points: Vec<RocPoint>,
    pub pr_points: Vec<PrPoint>,
}

/// Evaluates `(score, is_positive)` pairs.
pub fn evaluate(samples: &[(f64, bool)]) -> Result<DetectionResult> {
    if let Some((s, _)) = samples.iter().find(|(s, _)| !s.is_finite()) {
        return Err(Error::Validation(format!("detection score {s} is not finite")));
    }
    let n_pos = samples.iter().filter(|(_, p)| *p).count();
    let n_neg = samples.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::SingleClass { n_pos, n_neg });
    }

    let mut sorted = samples.to_vec();
    sorted.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap_or(Ordering::Equal));

    let (p, n) = (n_pos as f64, n_neg as f64);
    let mut roc_points = vec![RocPoint {
        fpr: 0.0,
        tpr: 0.0,
        threshold: None,
    }];
    let mut pr_points = vec![PrPoint {
        recall: 0.0,
        precision: 1.0,
        threshold: None,
    }];
    let (mut tp, mut fp) = (0usize, 0usize);
    // twice the Mann-Whitney U, kept integral until the end
    let mut u2: u128 = 0;
    let mut ap_sum = 0.0;

    let mut i = 0;
    while i < sorted.len() {
        let threshold = sorted[i].0;
        let (mut pos_g, mut neg_g) = (0usize, 0usize);
        while i < sorted.len() && sorted[i].0 == threshold {
            if sorted[i].1 {
                pos_g += 1;
            } else {
                neg_g += 1;
            }
            i += 1;
        }
        u2 += neg_g as u128 * (2 * tp as u128 + pos_g as u128);
        tp += pos_g;
        fp += neg_g;
        let precision = tp as f64 / (tp + fp) as f64;
        ap_sum += pos_g as f64 * precision;
        roc_points.push(RocPoint {
            fpr: fp as f64 / n,
            tpr: tp as f64 / p,
            threshold: Some(threshold),
        });
        pr_points.push(PrPoint {
            recall: tp as f64 / p,
            precision,
            threshold: Some(threshold),
        });
    }

    Ok(DetectionResult {
        auroc: u2 as f64 / (2.0 * p * n),
        ap: ap_sum / p,
        n_pos,
        n_neg,
        roc_points,
        pr_points,
    })
}

/// Evaluates scored occurrences, ignoring those labeled unknown.
pub fn auroc(tokens: &[ScoredToken]) -> Result<DetectionResult> {
    let samples: Vec<(f64, bool)> = tokens
        .iter()
        .filter_map(|t| match t.occurrence.label {
            Label::Real => Some((t.score, true)),
            Label::Hallucinated => Some((t.score, false)),
            Label::Unknown => None,
        })
        .collect();
    evaluate(&samples)
}
