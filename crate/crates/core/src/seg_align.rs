// SPDX-License-Identifier: MIT OR Apache-2.0

//! Mapping a pixel-level segmentation raster onto visual tokens.
//!
//! The image is tiled into `rows x cols` rectangles, one per visual token in
//! row-major order. Tile bounds use a floor partition of each axis; the
//! remainder pixels go to the last tile on that axis. Each token takes the
//! category with the most labeled pixels inside its tile (ties go to the
//! smallest id). Pixels marked [`UNLABELED`] are ignored; a tile made only of
//! unlabeled pixels gets [`BACKGROUND`].

use crate::error::{Error, Result};
use crate::trace::PatchGrid;

/// Raster value for pixels without a category.
pub const UNLABELED: u16 = u16::MAX;
/// Category assigned to tiles containing only unlabeled pixels.
pub const BACKGROUND: u16 = u16::MAX - 1;

/// A row-major raster of category ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SegmentationMap {
    width: usize,
    height: usize,
    categories: Vec<u16>,
}

impl SegmentationMap {
    pub fn new(width: usize, height: usize, categories: Vec<u16>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::Validation(format!(
                "segmentation raster must be non-empty, got {width}x{height}"
            )));
        }
        if categories.len() != width * height {
            return Err(Error::LengthMismatch {
                expected: width * height,
                actual: categories.len(),
            });
        }
        Ok(Self {
            width,
            height,
            categories,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn get(&self, x: usize, y: usize) -> u16 {
        self.categories[y * self.width + x]
    }

    pub fn as_slice(&self) -> &[u16] {
        &self.categories
    }
}

/// Per-token segment categories plus the category set `C`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenLabeling {
    labels: Vec<u16>,
    category_set: Vec<u16>,
    slots: Vec<usize>,
}

impl TokenLabeling {
    /// Builds a labeling directly from per-token category ids.
    pub fn from_labels(labels: Vec<u16>) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::Validation("token labeling needs at least one token".into()));
        }
        let mut category_set = labels.clone();
        category_set.sort_unstable();
        category_set.dedup();
        let slots = labels
            .iter()
            .map(|c| category_set.binary_search(c).expect("label is in its own set"))
            .collect();
        Ok(Self {
            labels,
            category_set,
            slots,
        })
    }

    /// Number of visual tokens `n`.
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[u16] {
        &self.labels
    }

    /// Sorted distinct category ids.
    pub fn category_set(&self) -> &[u16] {
        &self.category_set
    }

    /// `|C|`.
    pub fn num_categories(&self) -> usize {
        self.category_set.len()
    }

    /// Position of each token's category within [`Self::category_set`].
    pub fn slots(&self) -> &[usize] {
        &self.slots
    }

    /// Number of tokens assigned to each category, in category-set order.
    pub fn token_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_categories()];
        for &s in &self.slots {
            counts[s] += 1;
        }
        counts
    }
}

/// Pixel range `[start, end)` covered by tile `index` of `tiles` along an
/// axis of `extent` pixels.
pub fn tile_bounds(extent: usize, tiles: usize, index: usize) -> (usize, usize) {
    let size = extent / tiles;
    let start = index * size;
    let end = if index + 1 == tiles { extent } else { start + size };
    (start, end)
}

/// Assigns every visual token its majority segment category.
pub fn align(seg: &SegmentationMap, grid: PatchGrid) -> Result<TokenLabeling> {
    if grid.rows == 0 || grid.cols == 0 {
        return Err(Error::Validation(format!("grid {grid} must have positive dimensions")));
    }
    if seg.width() < grid.cols || seg.height() < grid.rows {
        return Err(Error::Validation(format!(
            "segmentation {}x{} is smaller than the token grid {grid}",
            seg.width(),
            seg.height()
        )));
    }
    if seg.as_slice().iter().all(|&c| c == UNLABELED) {
        return Err(Error::EmptySegmentation);
    }

    let mut labels = Vec::with_capacity(grid.len());
    let mut tally: Vec<(u16, usize)> = Vec::new();
    for r in 0..grid.rows {
        let (y0, y1) = tile_bounds(seg.height(), grid.rows, r);
        for c in 0..grid.cols {
            let (x0, x1) = tile_bounds(seg.width(), grid.cols, c);
            tally.clear();
            for y in y0..y1 {
                for &cat in &seg.as_slice()[y * seg.width() + x0..y * seg.width() + x1] {
                    if cat == UNLABELED {
                        continue;
                    }
                    match tally.iter_mut().find(|(id, _)| *id == cat) {
                        Some((_, n)) => *n += 1,
                        None => tally.push((cat, 1)),
                    }
                }
            }
            // max count, then smallest id
            let winner = tally
                .iter()
                .min_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)))
                .map_or(BACKGROUND, |(id, _)| *id);
            labels.push(winner);
        }
    }
    TokenLabeling::from_labels(labels)
}
