// SPDX-License-Identifier: MIT OR Apache-2.0

//! Independent reference implementations shared by the integration tests.
//!
//! These are written from the definitions, deliberately differently from
//! the library code: no shared helpers, no clever numerics.

#![allow(dead_code)]

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub const UNLABELED: u16 = 65535;
pub const BACKGROUND: u16 = 65534;

/// Normalized Shannon entropy of category masses pooled from a raw row.
pub fn sae_oracle(row: &[f64], labels: &[u16]) -> f64 {
    let mut pooled: BTreeMap<u16, f64> = BTreeMap::new();
    for (a, c) in row.iter().zip(labels) {
        *pooled.entry(*c).or_insert(0.0) += a;
    }
    let k = pooled.len();
    let total: f64 = row.iter().sum();
    if total <= 0.0 {
        return 1.0;
    }
    if k == 1 {
        return 0.0;
    }
    let h: f64 = pooled
        .values()
        .map(|m| m / total)
        .filter(|q| *q > 0.0)
        .map(|q| -q * q.ln())
        .sum();
    h / (k as f64).ln()
}

/// Majority category of each tile by explicit per-pixel tile assignment.
pub fn align_oracle(width: usize, height: usize, pixels: &[u16], rows: usize, cols: usize) -> Vec<u16> {
    let tile_of = |coord: usize, extent: usize, tiles: usize| (coord / (extent / tiles)).min(tiles - 1);
    let mut hist: Vec<BTreeMap<u16, usize>> = vec![BTreeMap::new(); rows * cols];
    for y in 0..height {
        for x in 0..width {
            let c = pixels[y * width + x];
            if c == UNLABELED {
                continue;
            }
            let t = tile_of(y, height, rows) * cols + tile_of(x, width, cols);
            *hist[t].entry(c).or_insert(0) += 1;
        }
    }
    hist.iter()
        .map(|h| {
            let best = h.values().copied().max();
            match best {
                None => BACKGROUND,
                // BTreeMap iterates ids ascending, so the first hit is the smallest
                Some(b) => *h.iter().find(|(_, n)| **n == b).unwrap().0,
            }
        })
        .collect()
}

/// `P(pos > neg) + 0.5 P(pos == neg)` over every pair.
pub fn auroc_pairwise(samples: &[(f64, bool)]) -> f64 {
    let pos: Vec<f64> = samples.iter().filter(|s| s.1).map(|s| s.0).collect();
    let neg: Vec<f64> = samples.iter().filter(|s| !s.1).map(|s| s.0).collect();
    let mut credit = 0.0;
    for p in &pos {
        for n in &neg {
            if p > n {
                credit += 1.0;
            } else if p == n {
                credit += 0.5;
            }
        }
    }
    credit / (pos.len() * neg.len()) as f64
}

/// AP by recomputing precision/recall from scratch at every distinct threshold.
pub fn ap_sweep(samples: &[(f64, bool)]) -> f64 {
    let mut thresholds: Vec<f64> = samples.iter().map(|s| s.0).collect();
    thresholds.sort_by(|a, b| b.partial_cmp(a).unwrap());
    thresholds.dedup();
    let n_pos = samples.iter().filter(|s| s.1).count() as f64;
    let mut prev_recall = 0.0;
    let mut ap = 0.0;
    for t in thresholds {
        let tp = samples.iter().filter(|s| s.0 >= t && s.1).count() as f64;
        let predicted = samples.iter().filter(|s| s.0 >= t).count() as f64;
        let recall = tp / n_pos;
        ap += (recall - prev_recall) * (tp / predicted);
        prev_recall = recall;
    }
    ap
}

pub fn softmax_oracle(row: &[f64]) -> Vec<f64> {
    let m = row.iter().cloned().fold(f64::MIN, f64::max);
    let z: f64 = row.iter().map(|v| (v - m).exp()).sum();
    row.iter().map(|v| (v - m).exp() / z).collect()
}

/// Random labels drawn from `k` categories, ids spread over `u16`.
pub fn random_labels(rng: &mut ChaCha8Rng, n: usize, k: usize) -> Vec<u16> {
    let ids: Vec<u16> = (0..k).map(|i| (i * 977 % 60000) as u16).collect();
    (0..n).map(|_| ids[rng.random_range(0..k)]).collect()
}

/// Random non-negative row with occasional zeros and a random scale.
pub fn random_row(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let scale = 10f64.powi(rng.random_range(-12..=3));
    (0..n)
        .map(|_| {
            if rng.random_bool(0.2) {
                0.0
            } else {
                scale * rng.random::<f64>()
            }
        })
        .collect()
}
