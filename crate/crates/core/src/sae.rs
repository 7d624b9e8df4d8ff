// SPDX-License-Identifier: MIT OR Apache-2.0

//! Segmentation-based attention entropy.
//!
//! For one (step, layer, head) the query row's attention over the `n` visual
//! tokens is normalized to a distribution, pooled per segment category, and
//! the Shannon entropy of the pooled distribution is divided by `ln |C|`:
//!
//! ```text
//! p(i)  = a(i) / sum_j a(j)
//! p(c)  = sum_{i in c} p(i)
//! SAE   = -(1 / ln|C|) * sum_c p(c) ln p(c)        in [0, 1]
//! ```
//!
//! Conventions: `0 ln 0 = 0`; `|C| = 1` gives 0; an all-zero attention row
//! gives 1 (no visual evidence). The log base cancels in the ratio.
//!
//! Evaluation goes through the divergence from uniform,
//! `SAE = 1 - KL(p || U) / ln|C|`, which keeps the uniform case exact.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::seg_align::TokenLabeling;
use crate::trace::AttentionTrace;

/// SAE assigned to rows without any visual attention.
pub const DEGENERATE_ROW_SAE: f64 = 1.0;

/// Divergences this close to zero are rounding noise around the uniform case.
const UNIFORM_SNAP: f64 = 8.0 * f64::EPSILON;

/// Attention pooled per segment category, in category-set order.
#[derive(Debug, Clone, PartialEq)]
pub struct CategoryDistribution {
    probs: Vec<f64>,
    categories: Vec<u16>,
}

impl CategoryDistribution {
    pub fn new(probs: Vec<f64>, categories: Vec<u16>) -> Result<Self> {
        if probs.len() != categories.len() {
            return Err(Error::LengthMismatch {
                expected: categories.len(),
                actual: probs.len(),
            });
        }
        if probs.is_empty() {
            return Err(Error::Validation(
                "category distribution needs at least one category".into(),
            ));
        }
        if let Some(p) = probs.iter().find(|p| !p.is_finite() || **p < 0.0) {
            return Err(Error::OutOfRange(format!("category probability {p}")));
        }
        Ok(Self { probs, categories })
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn categories(&self) -> &[u16] {
        &self.categories
    }

    pub fn prob_of(&self, category: u16) -> Option<f64> {
        self.categories
            .iter()
            .position(|&c| c == category)
            .map(|i| self.probs[i])
    }
}

/// Normalizes a non-negative attention row over the visual tokens.
///
/// Returns `None` for a degenerate row (no positive mass).
pub fn normalize_visual(row: &[f64]) -> Option<Vec<f64>> {
    let total: f64 = row.iter().sum();
    if !total.is_finite() || total <= 0.0 {
        return None;
    }
    Some(row.iter().map(|a| a / total).collect())
}

/// Pools token probabilities by segment category.
pub fn aggregate(p_tokens: &[f64], labeling: &TokenLabeling) -> Result<CategoryDistribution> {
    if p_tokens.len() != labeling.len() {
        return Err(Error::LengthMismatch {
            expected: labeling.len(),
            actual: p_tokens.len(),
        });
    }
    let mut probs = vec![0.0; labeling.num_categories()];
    for (&p, &slot) in p_tokens.iter().zip(labeling.slots()) {
        probs[slot] += p;
    }
    CategoryDistribution::new(probs, labeling.category_set().to_vec())
}

/// Normalized entropy of a category distribution, in `[0, 1]`.
pub fn sae(dist: &CategoryDistribution) -> f64 {
    normalized_entropy(dist.probs())
}

/// Normalized entropy of a probability vector over `probs.len()` outcomes.
///
/// The vector is renormalized by its own total, so inputs need only be
/// proportional to a distribution. An all-zero vector yields
/// [`DEGENERATE_ROW_SAE`].
pub fn normalized_entropy(probs: &[f64]) -> f64 {
    let k = probs.len();
    if k <= 1 {
        return 0.0;
    }
    let total: f64 = probs.iter().sum();
    if total.is_nan() || total <= 0.0 {
        return DEGENERATE_ROW_SAE;
    }
    let kf = k as f64;
    let ln_k = kf.ln();
    let mut divergence = 0.0;
    for &p in probs {
        if p <= 0.0 {
            continue;
        }
        let q = p / total;
        let ratio = q * kf;
        divergence += if ratio >= 2.0 {
            q * ratio.ln()
        } else {
            q * q.mul_add(kf, -1.0).ln_1p()
        };
    }
    if divergence <= UNIFORM_SNAP {
        return 1.0;
    }
    (1.0 - divergence / ln_k).clamp(0.0, 1.0)
}

/// SAE of one raw attention row.
///
/// Raw attention is pooled per category before normalizing. This equals
/// normalize-then-pool, but the result depends on token order only through
/// the per-category sums.
pub fn row_sae(row: &[f64], labeling: &TokenLabeling) -> Result<f64> {
    if row.len() != labeling.len() {
        return Err(Error::LengthMismatch {
            expected: labeling.len(),
            actual: row.len(),
        });
    }
    let mut pooled = vec![0.0; labeling.num_categories()];
    for (&a, &slot) in row.iter().zip(labeling.slots()) {
        pooled[slot] += a;
    }
    let total: f64 = pooled.iter().sum();
    if !total.is_finite() || total <= 0.0 {
        return Ok(DEGENERATE_ROW_SAE);
    }
    Ok(normalized_entropy(&pooled))
}

/// SAE values for every (step, layer, head) of a trace.
#[derive(Debug, Clone, PartialEq)]
pub struct SaeTensor {
    num_steps: usize,
    num_layers: usize,
    num_heads: usize,
    num_categories: usize,
    values: Vec<f64>,
}

impl SaeTensor {
    /// Value at step position `pos` (0-based; step `k = pos + 1`).
    pub fn at(&self, pos: usize, layer: usize, head: usize) -> f64 {
        self.values[(pos * self.num_layers + layer) * self.num_heads + head]
    }

    /// Value at 1-based step `k`.
    pub fn at_step(&self, k: usize, layer: usize, head: usize) -> f64 {
        self.at(k - 1, layer, head)
    }

    pub fn shape(&self) -> [usize; 3] {
        [self.num_steps, self.num_layers, self.num_heads]
    }

    pub fn num_categories(&self) -> usize {
        self.num_categories
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }
}

pub fn sae_tensor(trace: &AttentionTrace, labeling: &TokenLabeling) -> Result<SaeTensor> {
    if labeling.len() != trace.n_visual() {
        return Err(Error::LengthMismatch {
            expected: trace.n_visual(),
            actual: labeling.len(),
        });
    }
    let (layers, heads) = (trace.num_layers(), trace.num_heads());
    let per_step: Vec<Vec<f64>> = trace
        .steps()
        .par_iter()
        .map(|step| {
            let mut cells = Vec::with_capacity(layers * heads);
            for l in 0..layers {
                for h in 0..heads {
                    cells.push(row_sae(step.attn.row(l, h), labeling)?);
                }
            }
            Ok(cells)
        })
        .collect::<Result<_>>()?;
    Ok(SaeTensor {
        num_steps: trace.steps().len(),
        num_layers: layers,
        num_heads: heads,
        num_categories: labeling.num_categories(),
        values: per_step.concat(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dist(p: &[f64]) -> CategoryDistribution {
        CategoryDistribution::new(p.to_vec(), (0..p.len() as u16).collect()).unwrap()
    }

    #[test]
    fn normalize_examples() {
        assert_eq!(
            normalize_visual(&[2.0, 2.0, 0.0, 0.0]).unwrap(),
            vec![0.5, 0.5, 0.0, 0.0]
        );
        assert_eq!(
            normalize_visual(&[0.0, 0.0, 5.0, 0.0]).unwrap(),
            vec![0.0, 0.0, 1.0, 0.0]
        );
        assert!(normalize_visual(&[0.0; 4]).is_none());
    }

    #[test]
    fn aggregate_examples() {
        let lab = TokenLabeling::from_labels(vec![0, 0, 1, 1]).unwrap();
        let d = aggregate(&[0.25; 4], &lab).unwrap();
        assert_eq!(d.probs(), &[0.5, 0.5]);

        let lab = TokenLabeling::from_labels(vec![3, 3, 8, 8]).unwrap();
        let d = aggregate(&[1.0, 0.0, 0.0, 0.0], &lab).unwrap();
        assert_eq!(d.prob_of(3), Some(1.0));
        assert_eq!(d.prob_of(8), Some(0.0));

        assert!(matches!(
            aggregate(&[1.0; 3], &lab),
            Err(Error::LengthMismatch { expected: 4, actual: 3 })
        ));
    }

    #[test]
    fn sae_boundaries() {
        assert_eq!(sae(&dist(&[0.5, 0.5])), 1.0);
        assert_eq!(sae(&dist(&[1.0, 0.0, 0.0])), 0.0);
        assert_eq!(sae(&dist(&[0.0, 0.0, 0.0, 1.0, 0.0])), 0.0);
        assert_eq!(sae(&dist(&[1.0])), 0.0);
    }

    #[test]
    fn sae_three_way() {
        // 40-digit reference: H = 0.80181855254333730856..., H / ln 3 below
        let v = sae(&dist(&[0.7, 0.2, 0.1]));
        assert!((v - 0.729_846_699_162_097_5).abs() < 1e-10, "{v}");
    }

    #[test]
    fn uniform_is_exactly_one() {
        for c in 2..=64usize {
            assert_eq!(sae(&dist(&vec![1.0 / c as f64; c])), 1.0, "|C| = {c}");
        }
    }

    #[test]
    fn base_two_gives_same_value() {
        let p = [0.05, 0.4, 0.3, 0.25];
        let h2: f64 = p.iter().map(|q: &f64| -q * q.log2()).sum();
        let v2 = h2 / (p.len() as f64).log2();
        assert!((sae(&dist(&p)) - v2).abs() < 1e-14);
    }

    #[test]
    fn degenerate_row_is_max_uncertainty() {
        let lab = TokenLabeling::from_labels(vec![0, 1, 1, 2]).unwrap();
        assert_eq!(row_sae(&[0.0; 4], &lab).unwrap(), DEGENERATE_ROW_SAE);
        assert!(row_sae(&[0.0; 3], &lab).is_err());
    }
}
