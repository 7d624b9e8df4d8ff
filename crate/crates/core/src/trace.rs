// SPDX-License-Identifier: MIT OR Apache-2.0

//! In-memory decode records.
//!
//! An [`AttentionTrace`] holds one image's generation: for every decoding
//! step `k` (1-based), the attention the newly generated token's query row
//! pays to the `n` visual tokens at every (layer, head), the total visual
//! attention mass per (layer, head), optional pre-softmax logits over the
//! same visual slice, and token metadata marking object words.
//!
//! Full prefix attention matrices are never stored; every quantity computed
//! downstream only needs the query row's visual slice and its mass.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::reliability::NextTokenStats;

/// Maximum allowed deviation between a row's summed visual attention and the
/// stored visual mass.
pub const MASS_TOLERANCE: f64 = 1e-6;

/// Tiling of the image into visual tokens, row-major.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchGrid {
    pub rows: usize,
    pub cols: usize,
}

impl PatchGrid {
    pub fn new(rows: usize, cols: usize) -> Self {
        Self { rows, cols }
    }

    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl fmt::Display for PatchGrid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}", self.rows, self.cols)
    }
}

impl std::str::FromStr for PatchGrid {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        let (r, c) = s
            .split_once(['x', 'X'])
            .ok_or_else(|| format!("grid must look like ROWSxCOLS, got {s:?}"))?;
        let rows = r.trim().parse::<usize>().map_err(|e| format!("grid rows: {e}"))?;
        let cols = c.trim().parse::<usize>().map_err(|e| format!("grid cols: {e}"))?;
        if rows == 0 || cols == 0 {
            return Err("grid dimensions must be positive".into());
        }
        Ok(Self { rows, cols })
    }
}

/// Ground-truth status of an object mention.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Real,
    Hallucinated,
    Unknown,
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Label::Real => "real",
            Label::Hallucinated => "hallucinated",
            Label::Unknown => "unknown",
        })
    }
}

/// Marks a step as (part of) an object word.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ObjectFlag {
    /// Shared by every word-piece of one object word.
    pub group_id: u32,
    pub label: Label,
    /// Canonical object category the word names.
    pub category: String,
}

/// A `[layers, heads, width]` block of per-(layer, head) rows.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadRows {
    num_layers: usize,
    num_heads: usize,
    width: usize,
    data: Vec<f64>,
}

impl HeadRows {
    pub fn new(num_layers: usize, num_heads: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        let expected = num_layers * num_heads * width;
        if data.len() != expected {
            return Err(Error::LengthMismatch {
                expected,
                actual: data.len(),
            });
        }
        Ok(Self {
            num_layers,
            num_heads,
            width,
            data,
        })
    }

    pub fn zeros(num_layers: usize, num_heads: usize, width: usize) -> Self {
        Self {
            num_layers,
            num_heads,
            width,
            data: vec![0.0; num_layers * num_heads * width],
        }
    }

    pub fn num_layers(&self) -> usize {
        self.num_layers
    }

    pub fn num_heads(&self) -> usize {
        self.num_heads
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> [usize; 3] {
        [self.num_layers, self.num_heads, self.width]
    }

    pub fn row(&self, layer: usize, head: usize) -> &[f64] {
        let start = (layer * self.num_heads + head) * self.width;
        &self.data[start..start + self.width]
    }

    pub fn row_mut(&mut self, layer: usize, head: usize) -> &mut [f64] {
        let start = (layer * self.num_heads + head) * self.width;
        &mut self.data[start..start + self.width]
    }

    /// All `[heads, width]` rows of one layer, contiguous.
    pub fn layer(&self, layer: usize) -> &[f64] {
        let len = self.num_heads * self.width;
        &self.data[layer * len..(layer + 1) * len]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }
}

/// One decoding step `k`.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    /// 1-based step index `k`.
    pub index: usize,
    pub token: String,
    /// Post-softmax attention from the query row to each visual token, `[L, H, n]`.
    pub attn: HeadRows,
    /// Total attention the query row pays to visual tokens, `[L * H]`.
    pub mass: Vec<f64>,
    /// Pre-softmax scores over the visual slice, `[L, H, n]`.
    pub logits: Option<HeadRows>,
    pub object: Option<ObjectFlag>,
    /// Next-token distribution summaries used by the output-side baselines.
    pub next_token: Option<NextTokenStats>,
}

impl StepRecord {
    pub fn mass(&self, layer: usize, head: usize) -> f64 {
        self.mass[layer * self.attn.num_heads() + head]
    }
}

/// A validated decode record for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionTrace {
    image_id: String,
    n_visual: usize,
    m_text: usize,
    num_layers: usize,
    num_heads: usize,
    grid: PatchGrid,
    steps: Vec<StepRecord>,
}

impl AttentionTrace {
    /// Builds a trace, checking every invariant eagerly.
    pub fn new(
        image_id: impl Into<String>,
        m_text: usize,
        num_layers: usize,
        num_heads: usize,
        grid: PatchGrid,
        steps: Vec<StepRecord>,
    ) -> Result<Self> {
        let trace = Self {
            image_id: image_id.into(),
            n_visual: grid.len(),
            m_text,
            num_layers,
            num_heads,
            grid,
            steps,
        };
        trace.validate()?;
        Ok(trace)
    }

    fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Validation(format!("trace {:?}: {msg}", self.image_id)));
        if self.grid.rows == 0 || self.grid.cols == 0 {
            return fail(format!("grid {} must have positive dimensions", self.grid));
        }
        if self.num_layers == 0 || self.num_heads == 0 {
            return fail("num_layers and num_heads must be positive".into());
        }
        let shape = [self.num_layers, self.num_heads, self.n_visual];
        let with_logits = self.steps.first().is_some_and(|s| s.logits.is_some());
        let with_stats = self.steps.first().is_some_and(|s| s.next_token.is_some());

        for (pos, step) in self.steps.iter().enumerate() {
            let k = step.index;
            if k != pos + 1 {
                return fail(format!(
                    "step indices must be contiguous from 1; position {pos} has index {k}"
                ));
            }
            if step.attn.shape() != shape {
                return fail(format!(
                    "step {k}: attention shape {:?}, expected {shape:?}",
                    step.attn.shape()
                ));
            }
            if step.mass.len() != self.num_layers * self.num_heads {
                return fail(format!(
                    "step {k}: visual_mass has {} entries, expected {}",
                    step.mass.len(),
                    self.num_layers * self.num_heads
                ));
            }
            if step.logits.is_some() != with_logits {
                return fail(format!("step {k}: logits must be present on all steps or none"));
            }
            if step.next_token.is_some() != with_stats {
                return fail(format!(
                    "step {k}: baseline scalars must be present on all steps or none"
                ));
            }
            for l in 0..self.num_layers {
                for h in 0..self.num_heads {
                    let row = step.attn.row(l, h);
                    if let Some(i) = row.iter().position(|v| !v.is_finite() || *v < 0.0) {
                        return fail(format!(
                            "step {k}: attention[{l},{h},{i}] = {} is not a finite non-negative weight",
                            row[i]
                        ));
                    }
                    let mass = step.mass(l, h);
                    if !(0.0..=1.0).contains(&mass) {
                        return fail(format!("step {k}: visual_mass[{l},{h}] = {mass} outside [0, 1]"));
                    }
                    let total: f64 = row.iter().sum();
                    if (total - mass).abs() > MASS_TOLERANCE {
                        return fail(format!(
                            "step {k}: visual_mass[{l},{h}] = {mass} but attention row sums to {total}"
                        ));
                    }
                }
            }
            if let Some(logits) = &step.logits {
                if logits.shape() != shape {
                    return fail(format!(
                        "step {k}: logits shape {:?}, expected {shape:?}",
                        logits.shape()
                    ));
                }
                if logits.as_slice().iter().any(|v| !v.is_finite()) {
                    return fail(format!("step {k}: logits contain non-finite values"));
                }
            }
        }
        Ok(())
    }

    pub fn image_id(&self) -> &str {
        &self.image_id
    }

    pub fn n_visual(&self) -> usize {
        self.n_visual
    }

    pub fn m_text(&self) -> usize {
        self.m_text
    }

    pub fn num_layers(&self) -> usize {
        self.num_layers
    }

    pub fn num_heads(&self) -> usize {
        self.num_heads
    }

    pub fn grid(&self) -> PatchGrid {
        self.grid
    }

    pub fn steps(&self) -> &[StepRecord] {
        &self.steps
    }

    /// Looks up a step by its 1-based index.
    pub fn step(&self, k: usize) -> Option<&StepRecord> {
        k.checked_sub(1).and_then(|pos| self.steps.get(pos))
    }

    pub fn has_logits(&self) -> bool {
        self.steps.first().is_some_and(|s| s.logits.is_some())
    }

    pub fn has_baselines(&self) -> bool {
        self.steps.first().is_some_and(|s| s.next_token.is_some())
    }
}

/// One object word in a generated caption; the detection unit.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ObjectOccurrence {
    pub image_id: String,
    pub group_id: u32,
    /// The step whose attention is scored: the group's first word-piece.
    pub representative_step: usize,
    /// Every step belonging to the group, ascending.
    pub steps: Vec<usize>,
    pub category: String,
    pub label: Label,
}

/// Groups flagged steps into object occurrences.
///
/// Consecutive steps sharing a `group_id` form one occurrence whose
/// representative step is the first of them. A group id that reappears after
/// an interruption is rejected.
pub fn object_occurrences(trace: &AttentionTrace) -> Result<Vec<ObjectOccurrence>> {
    let mut out: Vec<ObjectOccurrence> = Vec::new();
    let mut closed: BTreeSet<u32> = BTreeSet::new();
    let mut open: Option<u32> = None;

    for step in trace.steps() {
        let Some(flag) = &step.object else {
            if let Some(g) = open.take() {
                closed.insert(g);
            }
            continue;
        };
        if open == Some(flag.group_id) {
            let occ = out.last_mut().expect("open group has an occurrence");
            if occ.label != flag.label || occ.category != flag.category {
                return Err(Error::Validation(format!(
                    "trace {:?}: group {} changes label or category at step {}",
                    trace.image_id(),
                    flag.group_id,
                    step.index
                )));
            }
            occ.steps.push(step.index);
            continue;
        }
        if let Some(g) = open.take() {
            closed.insert(g);
        }
        if closed.contains(&flag.group_id) {
            return Err(Error::Validation(format!(
                "trace {:?}: group {} is not contiguous (reappears at step {})",
                trace.image_id(),
                flag.group_id,
                step.index
            )));
        }
        open = Some(flag.group_id);
        out.push(ObjectOccurrence {
            image_id: trace.image_id().to_owned(),
            group_id: flag.group_id,
            representative_step: step.index,
            steps: vec![step.index],
            category: flag.category.clone(),
            label: flag.label,
        });
    }
    Ok(out)
}
