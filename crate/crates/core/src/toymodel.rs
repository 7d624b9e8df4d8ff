// SPDX-License-Identifier: MIT OR Apache-2.0

//! A seeded miniature decoder with a visual prefix, plus a synthetic
//! scenario generator.
//!
//! The decoder is never trained: weights are random projections fixed by the
//! seed. Each block is pre-norm (RMS) causal multi-head attention followed by
//! a pre-norm feed-forward layer. The prefix is `n` visual embeddings, then
//! the prompt tokens; generation is greedy. At every generation step the
//! query row's visual-slice logits can be passed through a [`LogitHook`]
//! before the softmax, and the step is recorded into an [`AttentionTrace`].
//!
//! The scenario generator bypasses the decoder and writes attention rows
//! directly, planting real objects as category-concentrated attention and
//! hallucinated ones as near-uniform attention across categories.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fsutil::write_atomic;
use crate::intervene::{LogitBlock, LogitHook};
use crate::metrics::chair::{CaptionRecord, GroundTruth};
use crate::reliability::{LayerRange, NextTokenStats};
use crate::seg_align::{align, SegmentationMap, TokenLabeling};
use crate::tensorio::{file_stem, save_trace, write_raster_file};
use crate::trace::{AttentionTrace, HeadRows, Label, ObjectFlag, PatchGrid, StepRecord};

/// Token id that ends generation.
pub const EOS: u32 = 0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyConfig {
    pub seed: u64,
    pub num_layers: usize,
    pub num_heads: usize,
    pub d_model: usize,
    pub grid: PatchGrid,
    pub vocab_size: usize,
    pub max_steps: usize,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            num_layers: 4,
            num_heads: 4,
            d_model: 32,
            grid: PatchGrid::new(4, 4),
            vocab_size: 64,
            max_steps: 12,
        }
    }
}

impl ToyConfig {
    pub fn with_seed(seed: u64) -> Self {
        Self {
            seed,
            ..Self::default()
        }
    }

    pub fn n_visual(&self) -> usize {
        self.grid.len()
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            self.num_layers,
            self.num_heads,
            self.d_model,
            self.grid.rows,
            self.grid.cols,
            self.vocab_size,
            self.max_steps,
        ];
        if dims.contains(&0) {
            return Err(Error::Validation(format!("toy config has a zero dimension: {self:?}")));
        }
        if !self.d_model.is_multiple_of(self.num_heads) {
            return Err(Error::Validation(format!(
                "d_model {} is not divisible by num_heads {}",
                self.d_model, self.num_heads
            )));
        }
        if self.vocab_size < 2 {
            return Err(Error::Validation("vocab_size must be at least 2".into()));
        }
        Ok(())
    }
}

/// Dense `x -> x W` with `W` stored row-major as `[inputs, outputs]`.
#[derive(Debug, Clone)]
struct Linear {
    inputs: usize,
    outputs: usize,
    w: Vec<f64>,
}

impl Linear {
    fn random(rng: &mut ChaCha8Rng, inputs: usize, outputs: usize) -> Self {
        let scale = (inputs as f64).sqrt().recip();
        let w = (0..inputs * outputs)
            .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
            .collect();
        Self { inputs, outputs, w }
    }

    fn apply(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.inputs);
        let mut y = vec![0.0; self.outputs];
        for (xi, row) in x.iter().zip(self.w.chunks_exact(self.outputs)) {
            for (yj, wij) in y.iter_mut().zip(row) {
                *yj += xi * wij;
            }
        }
        y
    }
}

#[derive(Debug, Clone)]
struct Block {
    wq: Linear,
    wk: Linear,
    wv: Linear,
    wo: Linear,
    up: Linear,
    down: Linear,
}

fn rms_norm(x: &[f64]) -> Vec<f64> {
    let ms = x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64;
    let inv = (ms + 1e-6).sqrt().recip();
    x.iter().map(|v| v * inv).collect()
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (0.797_884_560_802_865_4 * (x + 0.044_715 * x * x * x)).tanh())
}

fn positional(pos: usize, d: usize) -> Vec<f64> {
    (0..d)
        .map(|i| {
            let freq = 10_000f64.powf(-((i / 2 * 2) as f64) / d as f64);
            let angle = pos as f64 * freq;
            if i % 2 == 0 {
                angle.sin()
            } else {
                angle.cos()
            }
        })
        .collect()
}

#[derive(Debug, Default, Clone)]
struct LayerCache {
    keys: Vec<Vec<f64>>,
    values: Vec<Vec<f64>>,
}

/// What one recorded query row saw at one layer.
struct LayerRecord {
    /// `[H, n]` post-softmax attention on visual tokens.
    attn: Vec<f64>,
    /// `[H]` visual mass.
    mass: Vec<f64>,
    /// `[H, n]` pre-softmax visual logits, before any hook.
    logits: Vec<f64>,
}

/// The decoder.
#[derive(Debug, Clone)]
pub struct ToyModel {
    cfg: ToyConfig,
    embed: Vec<Vec<f64>>,
    blocks: Vec<Block>,
    unembed: Linear,
}

/// Result of one greedy decode.
#[derive(Debug, Clone, PartialEq)]
pub struct DecodeOutput {
    pub tokens: Vec<u32>,
    pub trace: AttentionTrace,
    /// True when `max_steps` ran out before [`EOS`].
    pub truncated: bool,
}

impl ToyModel {
    pub fn new(cfg: ToyConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let d = cfg.d_model;
        let embed = (0..cfg.vocab_size)
            .map(|_| (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect())
            .collect();
        let blocks = (0..cfg.num_layers)
            .map(|_| Block {
                wq: Linear::random(&mut rng, d, d),
                wk: Linear::random(&mut rng, d, d),
                wv: Linear::random(&mut rng, d, d),
                wo: Linear::random(&mut rng, d, d),
                up: Linear::random(&mut rng, d, 2 * d),
                down: Linear::random(&mut rng, 2 * d, d),
            })
            .collect();
        let unembed = Linear::random(&mut rng, d, cfg.vocab_size);
        Ok(Self {
            cfg,
            embed,
            blocks,
            unembed,
        })
    }

    pub fn config(&self) -> &ToyConfig {
        &self.cfg
    }

    /// Runs one position through every block, appending to the caches.
    ///
    /// With `record` set, the position is a generation query: its visual
    /// logits go through `hook` and its attention is recorded.
    fn forward(
        &self,
        mut x: Vec<f64>,
        caches: &mut [LayerCache],
        hook: Option<&dyn LogitHook>,
        record: bool,
    ) -> Result<(Vec<f64>, Vec<LayerRecord>)> {
        let (heads, n) = (self.cfg.num_heads, self.cfg.n_visual());
        let dh = self.cfg.d_model / heads;
        let scale = (dh as f64).sqrt().recip();
        let mut records = Vec::new();

        for (block, cache) in self.blocks.iter().zip(caches.iter_mut()) {
            let layer = records.len();
            let h_in = rms_norm(&x);
            let q = block.wq.apply(&h_in);
            cache.keys.push(block.wk.apply(&h_in));
            cache.values.push(block.wv.apply(&h_in));
            let len = cache.keys.len();

            let mut scores = vec![0.0; heads * len];
            for h in 0..heads {
                let qh = &q[h * dh..(h + 1) * dh];
                for (j, k) in cache.keys.iter().enumerate() {
                    let kh = &k[h * dh..(h + 1) * dh];
                    scores[h * len + j] = scale * qh.iter().zip(kh).map(|(a, b)| a * b).sum::<f64>();
                }
            }

            let mut rec = None;
            if record {
                let visual: Vec<f64> = (0..heads)
                    .flat_map(|h| scores[h * len..h * len + n].iter().copied())
                    .collect();
                if let Some(hook) = hook {
                    let adjusted = hook.adjust(layer, &LogitBlock::new(heads, n, visual.clone())?)?;
                    for h in 0..heads {
                        scores[h * len..h * len + n].copy_from_slice(adjusted.head(h));
                    }
                }
                rec = Some(visual);
            }

            let mut attn_out = vec![0.0; self.cfg.d_model];
            let mut rec_attn = Vec::new();
            let mut rec_mass = Vec::new();
            for h in 0..heads {
                let row = &scores[h * len..(h + 1) * len];
                let probs = crate::intervene::softmax(row);
                for (p, v) in probs.iter().zip(&cache.values) {
                    for (o, vi) in attn_out[h * dh..(h + 1) * dh].iter_mut().zip(&v[h * dh..(h + 1) * dh]) {
                        *o += p * vi;
                    }
                }
                if record {
                    let slice = &probs[..n];
                    rec_attn.extend_from_slice(slice);
                    rec_mass.push(slice.iter().sum::<f64>().min(1.0));
                }
            }
            if let Some(logits) = rec {
                records.push(LayerRecord {
                    attn: rec_attn,
                    mass: rec_mass,
                    logits,
                });
            }

            for (xi, a) in x.iter_mut().zip(block.wo.apply(&attn_out)) {
                *xi += a;
            }
            let hidden: Vec<f64> = block.up.apply(&rms_norm(&x)).into_iter().map(gelu).collect();
            for (xi, f) in x.iter_mut().zip(block.down.apply(&hidden)) {
                *xi += f;
            }
        }
        Ok((self.unembed.apply(&rms_norm(&x)), records))
    }

    fn token_input(&self, token: u32, pos: usize) -> Result<Vec<f64>> {
        let emb = self
            .embed
            .get(token as usize)
            .ok_or_else(|| Error::OutOfRange(format!("token {token} outside vocabulary of {}", self.cfg.vocab_size)))?;
        Ok(emb
            .iter()
            .zip(positional(pos, self.cfg.d_model))
            .map(|(e, p)| e + p)
            .collect())
    }

    /// Greedy decoding from a visual prefix and prompt.
    ///
    /// `image_embedding` is `[n, d_model]` row-major. Generated tokens with
    /// ids in the upper half of the vocabulary are flagged as object words
    /// (label unknown, one group per step).
    pub fn decode(
        &self,
        image_id: &str,
        image_embedding: &[f64],
        prompt: &[u32],
        hook: Option<&dyn LogitHook>,
    ) -> Result<DecodeOutput> {
        let (n, d) = (self.cfg.n_visual(), self.cfg.d_model);
        if image_embedding.len() != n * d {
            return Err(Error::LengthMismatch {
                expected: n * d,
                actual: image_embedding.len(),
            });
        }
        if prompt.is_empty() {
            return Err(Error::Validation("prompt must contain at least one token".into()));
        }
        let (layers, heads) = (self.cfg.num_layers, self.cfg.num_heads);
        let mut caches = vec![LayerCache::default(); layers];

        for row in image_embedding.chunks_exact(d) {
            self.forward(row.to_vec(), &mut caches, None, false)?;
        }
        for (i, &tok) in prompt[..prompt.len() - 1].iter().enumerate() {
            self.forward(self.token_input(tok, n + i)?, &mut caches, None, false)?;
        }

        let mut current = *prompt.last().expect("prompt is non-empty");
        let first_pos = n + prompt.len() - 1;
        let mut tokens = Vec::new();
        let mut steps = Vec::new();
        let mut truncated = true;
        for k in 1..=self.cfg.max_steps {
            let (logits, records) =
                self.forward(self.token_input(current, first_pos + k - 1)?, &mut caches, hook, true)?;
            let next = argmax(&logits);
            let mut attn = Vec::with_capacity(layers * heads * n);
            let mut mass = Vec::with_capacity(layers * heads);
            let mut raw = Vec::with_capacity(layers * heads * n);
            for r in records {
                attn.extend(r.attn);
                mass.extend(r.mass);
                raw.extend(r.logits);
            }
            let object = (next as usize >= self.cfg.vocab_size / 2).then(|| ObjectFlag {
                group_id: k as u32,
                label: Label::Unknown,
                category: format!("tok{next}"),
            });
            steps.push(StepRecord {
                index: k,
                token: format!("tok{next}"),
                attn: HeadRows::new(layers, heads, n, attn)?,
                mass,
                logits: Some(HeadRows::new(layers, heads, n, raw)?),
                object,
                next_token: Some(NextTokenStats::from_logits(&logits)?),
            });
            tokens.push(next);
            if next == EOS {
                truncated = false;
                break;
            }
            current = next;
        }
        let trace = AttentionTrace::new(image_id, prompt.len(), layers, heads, self.cfg.grid, steps)?;
        Ok(DecodeOutput {
            tokens,
            trace,
            truncated,
        })
    }
}

fn argmax(values: &[f64]) -> u32 {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best as u32
}

/// Mean SAE over every (step, layer, head) of a trace.
pub fn mean_sae(trace: &AttentionTrace, labeling: &TokenLabeling) -> Result<f64> {
    let t = crate::sae::sae_tensor(trace, labeling)?;
    Ok(t.values().iter().sum::<f64>() / t.values().len().max(1) as f64)
}

/// Inputs for a decode whose visual attention is spread over several segments.
#[derive(Debug, Clone)]
pub struct DecodeScenario {
    pub image_id: String,
    /// `[n, d_model]` row-major.
    pub image_embedding: Vec<f64>,
    pub prompt: Vec<u32>,
    pub segmentation: SegmentationMap,
    pub labeling: TokenLabeling,
}

/// Pixels per visual token along each axis in generated rasters.
const TILE_PX: usize = 8;

/// Builds the dispersed-attention decode scenario for `cfg`.
///
/// The image is split into four quadrant segments. Tokens of one segment
/// share an embedding direction (plus small noise), so heads attend by
/// segment and spread their mass over several of them.
pub fn dispersed_scenario(cfg: &ToyConfig) -> Result<DecodeScenario> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_d15b);
    let (rows, cols) = (cfg.grid.rows, cfg.grid.cols);
    let (w, h) = (cols * TILE_PX, rows * TILE_PX);
    let quadrant = |x: usize, y: usize| -> u16 { (usize::from(y >= h / 2) * 2 + usize::from(x >= w / 2)) as u16 };
    let raster = (0..h).flat_map(|y| (0..w).map(move |x| quadrant(x, y))).collect();
    let segmentation = SegmentationMap::new(w, h, raster)?;
    let labeling = align(&segmentation, cfg.grid)?;

    let d = cfg.d_model;
    let directions: Vec<Vec<f64>> = (0..labeling.num_categories())
        .map(|_| (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect())
        .collect();
    let mut image_embedding = Vec::with_capacity(cfg.n_visual() * d);
    for &slot in labeling.slots() {
        for v in &directions[slot] {
            image_embedding.push(v + 0.1 * rng.sample::<f64, _>(StandardNormal));
        }
    }
    let prompt = (0..4).map(|_| rng.random_range(1..cfg.vocab_size as u32)).collect();
    Ok(DecodeScenario {
        image_id: format!("dispersed_{}", cfg.seed),
        image_embedding,
        prompt,
        segmentation,
        labeling,
    })
}

/// Object category names used by the scenario generator.
pub const CATEGORY_NAMES: [&str; 20] = [
    "person",
    "dog",
    "cat",
    "car",
    "chair",
    "couch",
    "bed",
    "dining table",
    "tv",
    "bicycle",
    "bus",
    "bird",
    "horse",
    "cup",
    "bottle",
    "laptop",
    "book",
    "clock",
    "bowl",
    "umbrella",
];

const FILLERS: [&str; 6] = ["a", "the", "with", "and", "on", "near"];

/// One synthetic image with planted ground truth.
#[derive(Debug, Clone)]
pub struct ScenarioImage {
    pub trace: AttentionTrace,
    pub segmentation: SegmentationMap,
    pub ground_truth: BTreeSet<String>,
    pub caption: String,
}

/// Objects planted per synthetic image.
const OBJECTS_PER_IMAGE: usize = 8;

fn voronoi_raster(rng: &mut ChaCha8Rng, w: usize, h: usize, ids: &[u16]) -> Result<SegmentationMap> {
    let seeds: Vec<(f64, f64)> = ids
        .iter()
        .map(|_| (rng.random_range(0.0..w as f64), rng.random_range(0.0..h as f64)))
        .collect();
    let mut raster = Vec::with_capacity(w * h);
    for y in 0..h {
        for x in 0..w {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let nearest = seeds
                .iter()
                .enumerate()
                .map(|(i, (sx, sy))| (i, (sx - px).powi(2) + (sy - py).powi(2)))
                .min_by(|a, b| a.1.total_cmp(&b.1))
                .map(|(i, _)| i)
                .expect("at least one seed");
            raster.push(ids[nearest]);
        }
    }
    SegmentationMap::new(w, h, raster)
}

/// Random positive weights summing to one.
fn simplex(rng: &mut ChaCha8Rng, k: usize) -> Vec<f64> {
    let w: Vec<f64> = (0..k).map(|_| rng.random_range(0.05..1.0)).collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

/// Spreads category masses over their tokens and scales by `mass`.
fn token_row(rng: &mut ChaCha8Rng, labeling: &TokenLabeling, category_probs: &[f64], mass: f64) -> Vec<f64> {
    let mut row = vec![0.0; labeling.len()];
    for (slot, &pc) in category_probs.iter().enumerate() {
        let members: Vec<usize> = (0..labeling.len()).filter(|&i| labeling.slots()[i] == slot).collect();
        let split = simplex(rng, members.len());
        for (&i, s) in members.iter().zip(split) {
            row[i] = mass * pc * s;
        }
    }
    row
}

/// Category distribution with at least `floor` mass on `target`.
fn concentrated(rng: &mut ChaCha8Rng, k: usize, target: usize, floor: f64) -> Vec<f64> {
    let inside = if floor >= 1.0 {
        1.0
    } else {
        floor + (1.0 - floor) * rng.random_range(0.0..1.0)
    };
    let mut probs = vec![0.0; k];
    if k > 1 {
        for (slot, w) in (0..k).filter(|&s| s != target).zip(simplex(rng, k - 1)) {
            probs[slot] = (1.0 - inside) * w;
        }
    }
    probs[target] = inside;
    probs
}

/// Near-uniform category distribution; exactly uniform at `separation == 1`.
fn dispersed(rng: &mut ChaCha8Rng, k: usize, separation: f64) -> Vec<f64> {
    let jitter = 1.0 - separation;
    let w: Vec<f64> = (0..k).map(|_| 1.0 + jitter * rng.random_range(-0.5..0.5)).collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

/// Generates synthetic traces with planted real and hallucinated objects.
///
/// In the middle layers, real objects put at least `0.5 + separation / 2`
/// of their attention inside the object's segment, and hallucinated ones
/// spread attention almost uniformly over segments. Real objects also
/// receive more visual mass. Other layers carry uninformative attention.
/// Next-token scalars are drawn independently of the labels.
pub fn generate_scenario(cfg: &ToyConfig, num_images: usize, separation: f64) -> Result<Vec<ScenarioImage>> {
    cfg.validate()?;
    if num_images == 0 {
        return Err(Error::Validation("num_images must be at least 1".into()));
    }
    if !(separation > 0.0 && separation <= 1.0) {
        return Err(Error::OutOfRange(format!(
            "separation must be in (0, 1], got {separation}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (layers, heads, n) = (cfg.num_layers, cfg.num_heads, cfg.n_visual());
    let middle = LayerRange::middle_third(layers);
    let floor = 0.5 + separation / 2.0;
    let (w, h) = (cfg.grid.cols * TILE_PX, cfg.grid.rows * TILE_PX);

    let mut images = Vec::with_capacity(num_images);
    for img in 0..num_images {
        let image_id = format!("img_{img:04}");
        let k_img = rng.random_range(3..=5usize);
        let mut pool: Vec<u16> = (0..CATEGORY_NAMES.len() as u16).collect();
        pool.shuffle(&mut rng);
        let segmentation = voronoi_raster(&mut rng, w, h, &pool[..k_img])?;
        let labeling = align(&segmentation, cfg.grid)?;
        let k = labeling.num_categories();
        let present: BTreeSet<u16> = labeling.category_set().iter().copied().collect();
        let absent: Vec<u16> = pool.iter().copied().filter(|c| !present.contains(c)).collect();

        let mut steps: Vec<StepRecord> = Vec::new();
        let mut mentions = Vec::new();
        let mut push_step = |rng: &mut ChaCha8Rng,
                             token: String,
                             object: Option<ObjectFlag>,
                             plan: Option<(Label, usize)>|
         -> Result<()> {
            let mut attn = Vec::with_capacity(layers * heads * n);
            let mut mass = Vec::with_capacity(layers * heads);
            for l in 0..layers {
                for _ in 0..heads {
                    let (m, probs) = match plan {
                        Some((Label::Real, target)) if middle.layers().contains(&l) => {
                            (rng.random_range(0.35..0.75), concentrated(rng, k, target, floor))
                        }
                        Some((Label::Hallucinated, _)) if middle.layers().contains(&l) => {
                            (rng.random_range(0.2..0.6), dispersed(rng, k, separation))
                        }
                        _ => (rng.random_range(0.1..0.6), simplex(rng, k)),
                    };
                    let row = token_row(rng, &labeling, &probs, m);
                    mass.push(row.iter().sum::<f64>());
                    attn.extend(row);
                }
            }
            let stub: Vec<f64> = (0..cfg.vocab_size)
                .map(|_| 2.0 * rng.sample::<f64, _>(StandardNormal))
                .collect();
            steps.push(StepRecord {
                index: steps.len() + 1,
                token,
                attn: HeadRows::new(layers, heads, n, attn)?,
                mass,
                logits: None,
                object,
                next_token: Some(NextTokenStats::from_logits(&stub)?),
            });
            Ok(())
        };

        for group in 0..OBJECTS_PER_IMAGE as u32 {
            let filler = FILLERS.choose(&mut rng).expect("non-empty");
            push_step(&mut rng, (*filler).to_owned(), None, None)?;
            let real = rng.random_bool(0.5);
            let (label, category, target) = if real {
                let target = rng.random_range(0..k);
                (Label::Real, labeling.category_set()[target], target)
            } else {
                (
                    Label::Hallucinated,
                    *absent.choose(&mut rng).expect("pool exceeds image categories"),
                    0,
                )
            };
            let name = CATEGORY_NAMES[category as usize];
            mentions.push(name);
            let pieces: Vec<String> = if name.len() > 4 && rng.random_bool(0.25) {
                let cut = name.len() / 2;
                vec![name[..cut].to_owned(), name[cut..].to_owned()]
            } else {
                vec![name.to_owned()]
            };
            let flag = ObjectFlag {
                group_id: group + 1,
                label,
                category: name.to_owned(),
            };
            for piece in pieces {
                push_step(&mut rng, piece, Some(flag.clone()), Some((label, target)))?;
            }
        }

        let trace = AttentionTrace::new(image_id, 4, layers, heads, cfg.grid, steps)?;
        let ground_truth = present.iter().map(|&c| CATEGORY_NAMES[c as usize].to_owned()).collect();
        let caption = format!(
            "There is {}.",
            mentions.iter().map(|m| format!("a {m}")).collect::<Vec<_>>().join(", ")
        );
        images.push(ScenarioImage {
            trace,
            segmentation,
            ground_truth,
            caption,
        });
    }
    Ok(images)
}

/// Writes a scenario as files:
///
/// * `traces/<id>.json` + blobs
/// * `segs/<id>.saes`
/// * `captions.jsonl`, `ground_truth.json`
pub fn write_scenario(images: &[ScenarioImage], dir: &Path) -> Result<()> {
    let traces = dir.join("traces");
    let segs = dir.join("segs");
    let mut captions = String::new();
    let mut gt = GroundTruth::new();
    for img in images {
        let id = img.trace.image_id();
        save_trace(&img.trace, &traces)?;
        write_raster_file(&segs.join(format!("{}.saes", file_stem(id))), &img.segmentation)?;
        let rec = CaptionRecord {
            image_id: id.to_owned(),
            caption: img.caption.clone(),
        };
        captions.push_str(&serde_json::to_string(&rec).expect("caption serializes"));
        captions.push('\n');
        gt.insert(id.to_owned(), img.ground_truth.clone());
    }
    write_atomic(&dir.join("captions.jsonl"), captions.as_bytes())?;
    let gt_json: BTreeMap<_, _> = gt.into_iter().collect();
    let text = serde_json::to_string_pretty(&gt_json).expect("ground truth serializes");
    write_atomic(&dir.join("ground_truth.json"), text.as_bytes())
}
