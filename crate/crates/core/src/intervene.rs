// SPDX-License-Identifier: MIT OR Apache-2.0

//! SAE-gated attention-logit modulation.
//!
//! For one (step, layer), take the pre-softmax scores `S[h, i]` from the
//! query row to the `n` visual tokens. The consistency map is the head mean
//! of their magnitudes,
//!
//! ```text
//! C(i) = (1/H) * sum_h |S[h, i]|
//! ```
//!
//! and each head is nudged toward it in proportion to its own SAE:
//!
//! ```text
//! S'[h, i] = S[h, i] + lambda * SAE_h * C(i)
//! ```
//!
//! `SAE_h` comes from the softmax of the head's original visual-slice scores;
//! the update is applied once. Host decoders call this per (step, layer)
//! before their own softmax.

use std::collections::BTreeSet;

use crate::error::{Error, Result};
use crate::sae::row_sae;
use crate::seg_align::TokenLabeling;
use crate::trace::HeadRows;

pub const DEFAULT_LAMBDA: f64 = 0.5;

/// Pre-softmax visual-slice scores for one (step, layer): `[heads, n]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitBlock {
    num_heads: usize,
    width: usize,
    data: Vec<f64>,
}

impl LogitBlock {
    pub fn new(num_heads: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if num_heads == 0 || width == 0 {
            return Err(Error::Validation(
                "logit block needs at least one head and one token".into(),
            ));
        }
        if data.len() != num_heads * width {
            return Err(Error::LengthMismatch {
                expected: num_heads * width,
                actual: data.len(),
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Validation("logit block contains non-finite values".into()));
        }
        Ok(Self { num_heads, width, data })
    }

    pub fn num_heads(&self) -> usize {
        self.num_heads
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn head(&self, h: usize) -> &[f64] {
        &self.data[h * self.width..(h + 1) * self.width]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }
}

/// Head-averaged absolute logits per visual token.
pub fn consistency_map(block: &LogitBlock) -> Vec<f64> {
    let mut c = vec![0.0; block.width()];
    for h in 0..block.num_heads() {
        for (acc, s) in c.iter_mut().zip(block.head(h)) {
            *acc += s.abs();
        }
    }
    let scale = block.num_heads() as f64;
    c.iter_mut().for_each(|v| *v /= scale);
    c
}

/// Numerically stable softmax.
pub fn softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exp: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = exp.iter().sum();
    exp.into_iter().map(|e| e / total).collect()
}

/// SAE of each head's softmax over the visual slice.
pub fn head_sae(block: &LogitBlock, labeling: &TokenLabeling) -> Result<Vec<f64>> {
    (0..block.num_heads())
        .map(|h| row_sae(&softmax(block.head(h)), labeling))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct InterventionConfig {
    lambda: f64,
    /// Layers to modulate; `None` means all.
    layer_set: Option<BTreeSet<usize>>,
    labeling: TokenLabeling,
}

impl InterventionConfig {
    pub fn new(labeling: TokenLabeling) -> Self {
        Self {
            lambda: DEFAULT_LAMBDA,
            layer_set: None,
            labeling,
        }
    }

    pub fn with_lambda(mut self, lambda: f64) -> Result<Self> {
        if !lambda.is_finite() || lambda < 0.0 {
            return Err(Error::OutOfRange(format!(
                "lambda must be finite and >= 0, got {lambda}"
            )));
        }
        self.lambda = lambda;
        Ok(self)
    }

    pub fn with_layers(mut self, layers: impl IntoIterator<Item = usize>) -> Self {
        self.layer_set = Some(layers.into_iter().collect());
        self
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn labeling(&self) -> &TokenLabeling {
        &self.labeling
    }

    pub fn applies_to(&self, layer: usize) -> bool {
        self.layer_set.as_ref().is_none_or(|s| s.contains(&layer))
    }
}

/// Applies the gated update to one block.
pub fn modulate(block: &LogitBlock, cfg: &InterventionConfig) -> Result<LogitBlock> {
    if cfg.labeling.len() != block.width() {
        return Err(Error::LengthMismatch {
            expected: block.width(),
            actual: cfg.labeling.len(),
        });
    }
    if cfg.lambda == 0.0 {
        return Ok(block.clone());
    }
    let c = consistency_map(block);
    let gates = head_sae(block, &cfg.labeling)?;
    let mut out = block.clone();
    for (h, gate) in gates.into_iter().enumerate() {
        let strength = cfg.lambda * gate;
        let row = &mut out.data[h * block.width..(h + 1) * block.width];
        for (s, ci) in row.iter_mut().zip(&c) {
            let inc = strength * ci;
            // skipping exact zeros keeps untouched entries bit-identical (incl. -0.0)
            if inc != 0.0 {
                *s += inc;
            }
        }
    }
    Ok(out)
}

/// Decode-time callback invoked on the query row's visual-slice logits.
pub trait LogitHook: Sync {
    fn adjust(&self, layer: usize, block: &LogitBlock) -> Result<LogitBlock>;
}

/// The SAE-gated modulation as a [`LogitHook`].
#[derive(Debug, Clone)]
pub struct SaeGuidedHook {
    pub config: InterventionConfig,
}

impl LogitHook for SaeGuidedHook {
    fn adjust(&self, layer: usize, block: &LogitBlock) -> Result<LogitBlock> {
        if self.config.applies_to(layer) {
            modulate(block, &self.config)
        } else {
            Ok(block.clone())
        }
    }
}

/// Modulates every layer of a stored `[L, H, n]` logit tensor.
pub fn modulate_rows(logits: &HeadRows, cfg: &InterventionConfig) -> Result<HeadRows> {
    let [layers, heads, width] = logits.shape();
    let mut out = Vec::with_capacity(logits.as_slice().len());
    for l in 0..layers {
        let block = LogitBlock::new(heads, width, logits.layer(l).to_vec())?;
        if cfg.applies_to(l) {
            out.extend(modulate(&block, cfg)?.into_vec());
        } else {
            out.extend(block.into_vec());
        }
    }
    HeadRows::new(layers, heads, width, out)
}
