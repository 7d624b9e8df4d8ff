// SPDX-License-Identifier: MIT OR Apache-2.0

//! The `sae` command-line tool.
//!
//! Exit codes: 0 success, 2 input or validation error, 3 internal error.
//! Every output file is written atomically.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fmt;
use std::fs;
use std::panic::{self, AssertUnwindSafe};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::Error;
use crate::fsutil::{read_json_file, write_atomic};
use crate::intervene::{modulate_rows, InterventionConfig, SaeGuidedHook, DEFAULT_LAMBDA};
use crate::metrics::chair::{chair, CaptionRecord, ChairResult, GroundTruth, ObjectLexicon};
use crate::metrics::detection::{evaluate, DetectionResult};
use crate::metrics::svg::{heatmap_svg, pr_svg, roc_svg};
use crate::reliability::{score_occurrences, LayerRange, ScoreRecord, Scorer};
use crate::sae::{sae_tensor, SaeTensor};
use crate::seg_align::{align, TokenLabeling};
use crate::tensorio::{file_stem, load_trace, read_blob_file, read_raster_file, write_blob, ArrayBlob, BlobData};
use crate::toymodel::{dispersed_scenario, generate_scenario, mean_sae, write_scenario, ToyConfig, ToyModel};
use crate::trace::{object_occurrences, AttentionTrace, HeadRows, Label, ObjectOccurrence, PatchGrid};

pub const EXIT_OK: i32 = 0;
pub const EXIT_INPUT: i32 = 2;
pub const EXIT_INTERNAL: i32 = 3;

const FORMATS: &str = include_str!("../FORMATS.md");

/// A failed command with its exit code.
#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    fn input(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_INPUT,
            message: message.into(),
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let mut message = e.to_string();
        let mut source = std::error::Error::source(&e);
        while let Some(s) = source {
            let text = s.to_string();
            if !message.contains(&text) {
                message.push_str(": ");
                message.push_str(&text);
            }
            source = s.source();
        }
        Self::input(message)
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(
    name = "sae",
    version,
    about = "Segmentation-based attention entropy: score, detect and reduce object hallucinations",
    after_long_help = FORMATS
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Score every object occurrence in a directory of traces.
    Compute(ComputeArgs),
    /// AUROC / AP per scorer from a scores file, plus ROC and PR curves.
    Detect(DetectArgs),
    /// CHAIR and object P/R/F1 for a captions file.
    Chair(ChairArgs),
    /// Apply SAE-gated modulation to stored attention-logit blobs.
    Intervene(IntervenArgs),
    /// Run the whole pipeline on a seeded synthetic scenario.
    Demo(DemoArgs),
    /// Render SVG figures from compute and detect outputs.
    Plot(PlotArgs),
}

#[derive(Debug, Args)]
pub struct ComputeArgs {
    /// Directory of trace manifests (*.json).
    #[arg(long)]
    pub traces: PathBuf,
    /// Directory holding <image_id>.saes segmentation rasters.
    #[arg(long)]
    pub segs: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Inclusive layer range A..B; defaults to the middle third.
    #[arg(long)]
    pub layers: Option<LayerRange>,
    /// Scorers to run (repeatable); defaults to every scorer the traces support.
    #[arg(long = "scorer")]
    pub scorers: Vec<Scorer>,
}

#[derive(Debug, Args)]
pub struct DetectArgs {
    /// scores.jsonl written by `compute`.
    #[arg(long)]
    pub scores: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Also print published large-model reference values for context.
    #[arg(long)]
    pub reference: bool,
}

#[derive(Debug, Args)]
pub struct ChairArgs {
    /// JSONL of {"image_id", "caption"}.
    #[arg(long)]
    pub captions: PathBuf,
    /// JSON map of image id to ground-truth categories.
    #[arg(long)]
    pub gt: PathBuf,
    /// Synonym-to-category JSON map; defaults to the bundled COCO-80 list.
    #[arg(long)]
    pub lexicon: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct IntervenArgs {
    /// A logit blob ([L,H,n] or [H,n]) or a directory of *.saet blobs.
    #[arg(long)]
    pub input: PathBuf,
    /// Segmentation raster (.saes) for the image.
    #[arg(long)]
    pub segmentation: PathBuf,
    /// Patch grid ROWSxCOLS; n must equal ROWS*COLS.
    #[arg(long)]
    pub grid: PatchGrid,
    #[arg(long, default_value_t = DEFAULT_LAMBDA)]
    pub lambda: f64,
    /// Inclusive layer range A..B to modulate; defaults to all layers.
    #[arg(long)]
    pub layers: Option<LayerRange>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct DemoArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 50)]
    pub images: usize,
    /// Concentration gap between real and hallucinated objects, in (0, 1].
    #[arg(long, default_value_t = 0.6)]
    pub separation: f64,
    #[arg(long, default_value_t = DEFAULT_LAMBDA)]
    pub lambda: f64,
}

#[derive(Debug, Args)]
pub struct PlotArgs {
    /// sae_summary.json written by `compute`.
    #[arg(long)]
    pub summary: Option<PathBuf>,
    /// metrics.json written by `detect`.
    #[arg(long)]
    pub metrics: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

/// Mean SAE per label, over the scored layer range.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LabelMeans {
    pub real: Option<f64>,
    pub hallucinated: Option<f64>,
    pub unknown: Option<f64>,
}

/// Per-(layer, head) mean SAE, `[layer][head]`, for one label.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LayerHeadMeans {
    pub real: Option<Vec<Vec<f64>>>,
    pub hallucinated: Option<Vec<Vec<f64>>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SaeSummary {
    pub num_traces: usize,
    pub num_occurrences: usize,
    pub num_real: usize,
    pub num_hallucinated: usize,
    pub num_unknown: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub layer_range: String,
    pub scorers: Vec<Scorer>,
    pub mean_sae: LabelMeans,
    pub per_layer_head: LayerHeadMeans,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsFile {
    pub scorers: BTreeMap<Scorer, DetectionResult>,
    /// Occurrences labeled unknown, left out of every evaluation.
    pub unknown_skipped: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterventionReport {
    pub seed: u64,
    pub lambda: f64,
    pub tokens_plain: Vec<u32>,
    pub tokens_hooked: Vec<u32>,
    pub mean_sae_plain: f64,
    pub mean_sae_hooked: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DemoReport {
    pub seed: u64,
    pub images: usize,
    pub separation: f64,
    pub auroc: BTreeMap<Scorer, f64>,
    pub ap: BTreeMap<Scorer, f64>,
    pub mean_sae: LabelMeans,
    pub chair: ChairSummary,
    pub intervention: InterventionReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChairSummary {
    pub c_s: f64,
    pub c_i: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl From<&ChairResult> for ChairSummary {
    fn from(r: &ChairResult) -> Self {
        Self {
            c_s: r.c_s,
            c_i: r.c_i,
            precision: r.precision,
            recall: r.recall,
            f1: r.f1,
        }
    }
}

/// Parses `std::env::args` and runs; returns the process exit code.
pub fn run() -> i32 {
    run_from(std::env::args_os())
}

pub fn run_from<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_INPUT } else { EXIT_OK };
        }
    };
    match panic::catch_unwind(AssertUnwindSafe(|| execute(&cli.command))) {
        Ok(Ok(())) => EXIT_OK,
        Ok(Err(e)) => {
            eprintln!("error: {e}");
            e.code
        }
        Err(_) => {
            eprintln!("error: internal failure (panic); this is a bug");
            EXIT_INTERNAL
        }
    }
}

pub fn execute(command: &Command) -> CliResult<()> {
    match command {
        Command::Compute(a) => {
            let summary = cmd_compute(a)?;
            print_compute(&summary);
        }
        Command::Detect(a) => {
            let metrics = cmd_detect(a)?;
            print_metrics(&metrics);
            if a.reference {
                println!("{REFERENCE_NOTE}");
            }
        }
        Command::Chair(a) => {
            let r = cmd_chair(a)?;
            println!(
                "captions {}  mentions {}  C_S {:.4}  C_I {:.4}  P {:.4}  R {:.4}  F1 {:.4}",
                r.n_captions, r.n_mentions, r.c_s, r.c_i, r.precision, r.recall, r.f1
            );
        }
        Command::Intervene(a) => {
            let written = cmd_intervene(a)?;
            println!("modulated {} blob(s) into {}", written.len(), a.out.display());
        }
        Command::Demo(a) => {
            let r = cmd_demo(a)?;
            print_demo(&r, &a.out);
        }
        Command::Plot(a) => {
            let written = cmd_plot(a)?;
            for p in written {
                println!("wrote {}", p.display());
            }
        }
    }
    Ok(())
}

const REFERENCE_NOTE: &str = "\
Published reference values (LLaVA-1.5 on COCO 2014 val; need the full models,
data and a GPU, so they are NOT reproduced by this tool):
  detection AUROC/AP   7B: reliability 0.766/0.882, VAR 0.749/0.880
                      13B: reliability 0.757/0.889, VAR 0.747/0.887
  CHAIR with SAE-guided intervention
                       7B: C_S 24.2  C_I 5.9  R 68.2  P 87.3  F1 76.6
                      13B: C_S 23.8  C_I 8.5  R 64.8  P 85.9  F1 73.9
Scores above are from your inputs only.";

fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| CliError {
        code: EXIT_INTERNAL,
        message: format!("serializing {}: {e}", path.display()),
    })?;
    text.push('\n');
    Ok(write_atomic(path, text.as_bytes())?)
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> CliResult<T> {
    Ok(read_json_file(path)?)
}

/// Parses line `i` (0-based) of a JSONL file.
fn parse_line<T: for<'de> Deserialize<'de>>(path: &Path, i: usize, line: &str) -> CliResult<T> {
    let de = &mut serde_json::Deserializer::from_str(line);
    serde_path_to_error::deserialize(de).map_err(|e| {
        CliError::input(format!(
            "{}: line {}: field `{}`: {}",
            path.display(),
            i + 1,
            e.path(),
            e.inner()
        ))
    })
}

fn list_files(dir: &Path, ext: &str) -> CliResult<Vec<PathBuf>> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut files = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.is_file() && path.extension().is_some_and(|x| x == ext) {
            files.push(path);
        }
    }
    files.sort();
    Ok(files)
}

struct LoadedImage {
    trace: AttentionTrace,
    sae: SaeTensor,
    occurrences: Vec<ObjectOccurrence>,
}

fn load_image(manifest: &Path, segs: &Path) -> CliResult<LoadedImage> {
    let trace = load_trace(manifest)?;
    let seg_path = segs.join(format!("{}.saes", file_stem(trace.image_id())));
    if !seg_path.is_file() {
        return Err(CliError::input(format!(
            "segmentation file not found: {} (for trace {})",
            seg_path.display(),
            manifest.display()
        )));
    }
    let seg = read_raster_file(&seg_path)?;
    let labeling = align(&seg, trace.grid()).map_err(|e| CliError::input(format!("{}: {e}", seg_path.display())))?;
    let sae = sae_tensor(&trace, &labeling)?;
    let occurrences =
        object_occurrences(&trace).map_err(|e| CliError::input(format!("{}: {e}", manifest.display())))?;
    Ok(LoadedImage {
        trace,
        sae,
        occurrences,
    })
}

fn supports(scorer: Scorer, trace: &AttentionTrace) -> bool {
    match scorer {
        Scorer::Reliability | Scorer::Var => true,
        Scorer::Pe | Scorer::Msp | Scorer::Margin => trace.has_baselines(),
        Scorer::Energy => trace
            .steps()
            .iter()
            .all(|s| s.next_token.is_some_and(|t| t.energy.is_some())),
    }
}

fn mean(values: &[f64]) -> Option<f64> {
    (!values.is_empty()).then(|| values.iter().sum::<f64>() / values.len() as f64)
}

pub fn cmd_compute(a: &ComputeArgs) -> CliResult<SaeSummary> {
    let manifests = list_files(&a.traces, "json")?;
    if manifests.is_empty() {
        return Err(CliError::input(format!("no traces found in {}", a.traces.display())));
    }
    let images: Vec<LoadedImage> = manifests
        .par_iter()
        .map(|m| load_image(m, &a.segs))
        .collect::<CliResult<_>>()?;

    let (layers, heads) = (images[0].trace.num_layers(), images[0].trace.num_heads());
    if let Some(odd) = images
        .iter()
        .find(|im| im.trace.num_layers() != layers || im.trace.num_heads() != heads)
    {
        return Err(CliError::input(format!(
            "trace {:?} has {}x{} layers x heads but {:?} has {layers}x{heads}",
            odd.trace.image_id(),
            odd.trace.num_layers(),
            odd.trace.num_heads(),
            images[0].trace.image_id()
        )));
    }
    let range = a.layers.unwrap_or_else(|| LayerRange::middle_third(layers));
    range.validate(layers)?;

    let scorers: Vec<Scorer> = if a.scorers.is_empty() {
        Scorer::ALL
            .into_iter()
            .filter(|&s| images.iter().all(|im| supports(s, &im.trace)))
            .collect()
    } else {
        let mut s = a.scorers.clone();
        s.sort();
        s.dedup();
        s
    };

    let per_image: Vec<Vec<ScoreRecord>> = images
        .par_iter()
        .map(|im| -> CliResult<Vec<ScoreRecord>> {
            let mut out = Vec::new();
            for &scorer in &scorers {
                let scored = score_occurrences(&im.trace, &im.sae, &im.occurrences, scorer, range)?;
                out.extend(scored.iter().map(ScoreRecord::from));
            }
            Ok(out)
        })
        .collect::<CliResult<_>>()?;
    let mut records: Vec<ScoreRecord> = per_image.into_iter().flatten().collect();
    records.sort_by(|x, y| (&x.image_id, x.group_id, x.scorer).cmp(&(&y.image_id, y.group_id, y.scorer)));
    let mut jsonl = String::new();
    for r in &records {
        jsonl.push_str(&serde_json::to_string(r).expect("score record serializes"));
        jsonl.push('\n');
    }
    write_atomic(&a.out.join("scores.jsonl"), jsonl.as_bytes())?;

    // per-label SAE statistics at each occurrence's representative step
    let mut in_range: BTreeMap<Label, Vec<f64>> = BTreeMap::new();
    let mut grid_sum: BTreeMap<Label, (Vec<f64>, usize)> = BTreeMap::new();
    for im in &images {
        for occ in &im.occurrences {
            let k = occ.representative_step;
            let acc = grid_sum
                .entry(occ.label)
                .or_insert_with(|| (vec![0.0; layers * heads], 0));
            acc.1 += 1;
            for l in 0..layers {
                for h in 0..heads {
                    let v = im.sae.at_step(k, l, h);
                    acc.0[l * heads + h] += v;
                    if range.layers().contains(&l) {
                        in_range.entry(occ.label).or_default().push(v);
                    }
                }
            }
        }
    }
    let heat = |label: Label| {
        grid_sum.get(&label).map(|(sum, count)| {
            sum.chunks(heads)
                .map(|row| row.iter().map(|v| v / *count as f64).collect())
                .collect()
        })
    };
    let count = |label: Label| grid_sum.get(&label).map_or(0, |g| g.1);
    let means = |label: Label| in_range.get(&label).and_then(|v| mean(v));
    let summary = SaeSummary {
        num_traces: images.len(),
        num_occurrences: images.iter().map(|im| im.occurrences.len()).sum(),
        num_real: count(Label::Real),
        num_hallucinated: count(Label::Hallucinated),
        num_unknown: count(Label::Unknown),
        num_layers: layers,
        num_heads: heads,
        layer_range: range.to_string(),
        scorers,
        mean_sae: LabelMeans {
            real: means(Label::Real),
            hallucinated: means(Label::Hallucinated),
            unknown: means(Label::Unknown),
        },
        per_layer_head: LayerHeadMeans {
            real: heat(Label::Real),
            hallucinated: heat(Label::Hallucinated),
        },
    };
    write_json(&a.out.join("sae_summary.json"), &summary)?;
    Ok(summary)
}

fn print_compute(s: &SaeSummary) {
    let fmt = |v: Option<f64>| v.map_or_else(|| "n/a".to_owned(), |v| format!("{v:.4}"));
    println!(
        "{} traces, {} occurrences ({} real, {} hallucinated, {} unknown), layers {}",
        s.num_traces, s.num_occurrences, s.num_real, s.num_hallucinated, s.num_unknown, s.layer_range
    );
    println!(
        "mean SAE: real {}  hallucinated {}",
        fmt(s.mean_sae.real),
        fmt(s.mean_sae.hallucinated)
    );
}

/// `(score, is_real)` samples per scorer.
pub type ScoreGroups = BTreeMap<Scorer, Vec<(f64, bool)>>;

/// Reads a scores file into (scorer -> samples, unknown count).
pub fn read_scores(path: &Path) -> CliResult<(ScoreGroups, usize)> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut groups = ScoreGroups::new();
    let mut unknown = 0;
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: ScoreRecord = parse_line(path, i, line)?;
        match rec.label {
            Label::Real => groups.entry(rec.scorer).or_default().push((rec.score, true)),
            Label::Hallucinated => groups.entry(rec.scorer).or_default().push((rec.score, false)),
            Label::Unknown => unknown += 1,
        }
    }
    if groups.is_empty() {
        return Err(CliError::input(format!(
            "{}: no real or hallucinated occurrences to evaluate",
            path.display()
        )));
    }
    Ok((groups, unknown))
}

pub fn cmd_detect(a: &DetectArgs) -> CliResult<MetricsFile> {
    let (groups, unknown_skipped) = read_scores(&a.scores)?;
    let mut scorers = BTreeMap::new();
    for (scorer, samples) in groups {
        let r =
            evaluate(&samples).map_err(|e| CliError::input(format!("{}: scorer {scorer}: {e}", a.scores.display())))?;
        scorers.insert(scorer, r);
    }
    let metrics = MetricsFile {
        scorers,
        unknown_skipped,
    };
    write_json(&a.out.join("metrics.json"), &metrics)?;
    write_curves(&metrics, &a.out)?;
    Ok(metrics)
}

fn write_curves(metrics: &MetricsFile, out: &Path) -> CliResult<Vec<PathBuf>> {
    let curves: Vec<(&str, &DetectionResult)> = metrics.scorers.iter().map(|(s, r)| (s.name(), r)).collect();
    let roc = out.join("roc.svg");
    let pr = out.join("pr.svg");
    write_atomic(&roc, roc_svg(&curves).as_bytes())?;
    write_atomic(&pr, pr_svg(&curves).as_bytes())?;
    Ok(vec![roc, pr])
}

fn print_metrics(m: &MetricsFile) {
    println!(
        "{:<12} {:>7} {:>7} {:>6} {:>6}",
        "scorer", "AUROC", "AP", "real", "hall."
    );
    for (s, r) in &m.scorers {
        println!(
            "{:<12} {:>7.4} {:>7.4} {:>6} {:>6}",
            s.name(),
            r.auroc,
            r.ap,
            r.n_pos,
            r.n_neg
        );
    }
    if m.unknown_skipped > 0 {
        println!("({} unknown-label occurrences skipped)", m.unknown_skipped);
    }
}

pub fn cmd_chair(a: &ChairArgs) -> CliResult<ChairResult> {
    let text = fs::read_to_string(&a.captions).map_err(|e| Error::io(&a.captions, e))?;
    let captions = text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| parse_line::<CaptionRecord>(&a.captions, i, l))
        .collect::<CliResult<Vec<_>>>()?;
    let gt: GroundTruth = read_json(&a.gt)?;
    let lexicon = match &a.lexicon {
        Some(p) => ObjectLexicon::from_file(p)?,
        None => ObjectLexicon::coco(),
    };
    let result = chair(&captions, &gt, &lexicon).map_err(|e| CliError::input(format!("{}: {e}", a.gt.display())))?;
    write_json(&a.out.join("chair.json"), &result)?;
    Ok(result)
}

fn intervene_blob(path: &Path, cfg: &InterventionConfig, n: usize) -> CliResult<Vec<u8>> {
    let ctx = |msg: String| CliError::input(format!("{}: {msg}", path.display()));
    let blob = read_blob_file(path)?;
    let (layers, heads, width) = match *blob.shape() {
        [l, h, w] => (l, h, w),
        [h, w] => (1, h, w),
        _ => return Err(ctx(format!("expected shape [L,H,n] or [H,n], got {:?}", blob.shape()))),
    };
    if width != n {
        return Err(ctx(format!("blob has {width} visual tokens but the grid has {n}")));
    }
    let values = blob
        .to_f64()
        .ok_or_else(|| ctx(format!("logit blobs must be float, got {:?}", blob.dtype())))?;
    let rows = HeadRows::new(layers, heads, width, values)?;
    let out = modulate_rows(&rows, cfg).map_err(|e| ctx(e.to_string()))?.into_vec();
    let data = match blob.data() {
        // f32 input stays f32; the f64 round trip is exact for unmodified entries
        BlobData::F32(_) => BlobData::F32(out.into_iter().map(|v| v as f32).collect()),
        _ => BlobData::F64(out),
    };
    let result = ArrayBlob::new(blob.shape().to_vec(), data)?;
    let mut bytes = Vec::with_capacity(result.encoded_len());
    write_blob(&result, &mut bytes).map_err(Error::from)?;
    Ok(bytes)
}

pub fn cmd_intervene(a: &IntervenArgs) -> CliResult<Vec<PathBuf>> {
    let seg = read_raster_file(&a.segmentation)?;
    let labeling: TokenLabeling =
        align(&seg, a.grid).map_err(|e| CliError::input(format!("{}: {e}", a.segmentation.display())))?;
    let mut cfg = InterventionConfig::new(labeling).with_lambda(a.lambda)?;
    if let Some(r) = a.layers {
        cfg = cfg.with_layers(r.layers());
    }
    let inputs = if a.input.is_dir() {
        let files = list_files(&a.input, "saet")?;
        if files.is_empty() {
            return Err(CliError::input(format!(
                "no .saet blobs found in {}",
                a.input.display()
            )));
        }
        files
    } else {
        vec![a.input.clone()]
    };
    let encoded: Vec<(PathBuf, Vec<u8>)> = inputs
        .par_iter()
        .map(|p| Ok((p.clone(), intervene_blob(p, &cfg, a.grid.len())?)))
        .collect::<CliResult<_>>()?;
    let mut written = Vec::with_capacity(encoded.len());
    for (src, bytes) in encoded {
        let dest = a.out.join(src.file_name().expect("listed files have names"));
        write_atomic(&dest, &bytes)?;
        written.push(dest);
    }
    Ok(written)
}

pub fn cmd_demo(a: &DemoArgs) -> CliResult<DemoReport> {
    let cfg = ToyConfig::with_seed(a.seed);
    let images = generate_scenario(&cfg, a.images, a.separation)?;
    let scenario = a.out.join("scenario");
    write_scenario(&images, &scenario)?;

    let summary = cmd_compute(&ComputeArgs {
        traces: scenario.join("traces"),
        segs: scenario.join("segs"),
        out: a.out.clone(),
        layers: None,
        scorers: Vec::new(),
    })?;
    let metrics = cmd_detect(&DetectArgs {
        scores: a.out.join("scores.jsonl"),
        out: a.out.clone(),
        reference: false,
    })?;
    let chair_result = cmd_chair(&ChairArgs {
        captions: scenario.join("captions.jsonl"),
        gt: scenario.join("ground_truth.json"),
        lexicon: None,
        out: a.out.clone(),
    })?;
    cmd_plot(&PlotArgs {
        summary: Some(a.out.join("sae_summary.json")),
        metrics: None,
        out: a.out.clone(),
    })?;

    let model = ToyModel::new(cfg.clone())?;
    let sc = dispersed_scenario(&cfg)?;
    let hook = SaeGuidedHook {
        config: InterventionConfig::new(sc.labeling.clone()).with_lambda(a.lambda)?,
    };
    let (plain, hooked) = rayon::join(
        || model.decode(&sc.image_id, &sc.image_embedding, &sc.prompt, None),
        || model.decode(&sc.image_id, &sc.image_embedding, &sc.prompt, Some(&hook)),
    );
    let (plain, hooked) = (plain?, hooked?);
    let intervention = InterventionReport {
        seed: a.seed,
        lambda: a.lambda,
        mean_sae_plain: mean_sae(&plain.trace, &sc.labeling)?,
        mean_sae_hooked: mean_sae(&hooked.trace, &sc.labeling)?,
        tokens_plain: plain.tokens,
        tokens_hooked: hooked.tokens,
    };

    let report = DemoReport {
        seed: a.seed,
        images: a.images,
        separation: a.separation,
        auroc: metrics.scorers.iter().map(|(s, r)| (*s, r.auroc)).collect(),
        ap: metrics.scorers.iter().map(|(s, r)| (*s, r.ap)).collect(),
        mean_sae: summary.mean_sae,
        chair: ChairSummary::from(&chair_result),
        intervention,
    };
    write_json(&a.out.join("report.json"), &report)?;
    Ok(report)
}

fn print_demo(r: &DemoReport, out: &Path) {
    println!(
        "synthetic scenario: seed {}, {} images, separation {}",
        r.seed, r.images, r.separation
    );
    println!("{:<12} {:>7} {:>7}", "scorer", "AUROC", "AP");
    for (s, auroc) in &r.auroc {
        println!("{:<12} {:>7.4} {:>7.4}", s.name(), auroc, r.ap[s]);
    }
    let fmt = |v: Option<f64>| v.map_or_else(|| "n/a".to_owned(), |v| format!("{v:.4}"));
    println!(
        "mean SAE (middle layers): real {}  hallucinated {}",
        fmt(r.mean_sae.real),
        fmt(r.mean_sae.hallucinated)
    );
    println!(
        "CHAIR: C_S {:.4}  C_I {:.4}  P {:.4}  R {:.4}  F1 {:.4}",
        r.chair.c_s, r.chair.c_i, r.chair.precision, r.chair.recall, r.chair.f1
    );
    let iv = &r.intervention;
    println!(
        "toy decoder, lambda {}: mean SAE {:.4} without hook -> {:.4} with hook",
        iv.lambda, iv.mean_sae_plain, iv.mean_sae_hooked
    );
    println!("outputs in {}", out.display());
}

pub fn cmd_plot(a: &PlotArgs) -> CliResult<Vec<PathBuf>> {
    if a.summary.is_none() && a.metrics.is_none() {
        return Err(CliError::input("plot needs --summary and/or --metrics"));
    }
    let mut written = Vec::new();
    if let Some(p) = &a.summary {
        let s: SaeSummary = read_json(p)?;
        for (name, values) in [
            ("real", &s.per_layer_head.real),
            ("hallucinated", &s.per_layer_head.hallucinated),
        ] {
            if let Some(v) = values {
                let path = a.out.join(format!("sae_heatmap_{name}.svg"));
                write_atomic(&path, heatmap_svg(&format!("mean SAE, {name} objects"), v).as_bytes())?;
                written.push(path);
            }
        }
    }
    if let Some(p) = &a.metrics {
        let m: MetricsFile = read_json(p)?;
        written.extend(write_curves(&m, &a.out)?);
    }
    Ok(written)
}
