// SPDX-License-Identifier: MIT OR Apache-2.0

//! End-to-end checks of the `sae` binary.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

use sae_toolkit::seg_align::SegmentationMap;
use sae_toolkit::tensorio::{write_blob_file, write_raster_file, ArrayBlob, BlobData};

fn sae(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sae"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = sae(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

/// Every file under `dir`, keyed by relative path.
fn snapshot(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut files = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                files.insert(p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap());
            }
        }
    }
    files
}

fn score_line(image: &str, group: u32, label: &str, score: f64) -> String {
    format!(
        r#"{{"image_id":"{image}","group_id":{group},"category":"dog","label":"{label}","scorer":"reliability","score":{score}}}"#
    )
}

#[test]
fn demo_is_deterministic() {
    let (a, b) = (TempDir::new().unwrap(), TempDir::new().unwrap());
    ok(&["demo", "--seed", "7", "--images", "12", "--out", s(a.path())]);
    ok(&["demo", "--seed", "7", "--images", "12", "--out", s(b.path())]);
    let (sa, sb) = (snapshot(a.path()), snapshot(b.path()));
    assert!(sa.len() > 20, "demo wrote only {} files", sa.len());
    assert_eq!(sa.keys().collect::<Vec<_>>(), sb.keys().collect::<Vec<_>>());
    for (k, v) in &sa {
        assert!(v == &sb[k], "{} differs between runs", k.display());
    }
    for name in [
        "report.json",
        "metrics.json",
        "scores.jsonl",
        "sae_summary.json",
        "chair.json",
        "roc.svg",
        "pr.svg",
    ] {
        assert!(sa.contains_key(Path::new(name)), "missing {name}");
    }
}

#[test]
fn compute_reproduces_demo_scores() {
    let demo = TempDir::new().unwrap();
    ok(&["demo", "--seed", "3", "--images", "10", "--out", s(demo.path())]);
    let scenario = demo.path().join("scenario");
    let out = TempDir::new().unwrap();
    ok(&[
        "compute",
        "--traces",
        s(&scenario.join("traces")),
        "--segs",
        s(&scenario.join("segs")),
        "--out",
        s(out.path()),
    ]);
    assert_eq!(
        fs::read(out.path().join("scores.jsonl")).unwrap(),
        fs::read(demo.path().join("scores.jsonl")).unwrap()
    );
    let summary = json(&out.path().join("sae_summary.json"));
    let real = summary["mean_sae"]["real"].as_f64().unwrap();
    let hall = summary["mean_sae"]["hallucinated"].as_f64().unwrap();
    assert!(real < hall, "real {real} vs hallucinated {hall}");
    assert_eq!(summary["layer_range"], "1..1");

    // a restricted scorer list and explicit layer range
    let narrow = TempDir::new().unwrap();
    ok(&[
        "compute",
        "--traces",
        s(&scenario.join("traces")),
        "--segs",
        s(&scenario.join("segs")),
        "--out",
        s(narrow.path()),
        "--layers",
        "0..3",
        "--scorer",
        "reliability",
    ]);
    let lines = fs::read_to_string(narrow.path().join("scores.jsonl")).unwrap();
    assert!(lines.lines().all(|l| l.contains(r#""scorer":"reliability""#)));
}

#[test]
fn detect_perfect_separation_and_order_independence() {
    let dir = TempDir::new().unwrap();
    let mut rows: Vec<String> = (0..6)
        .map(|i| {
            score_line(
                "a",
                i,
                if i % 2 == 0 { "real" } else { "hallucinated" },
                if i % 2 == 0 { 0.9 } else { 0.1 } + i as f64 / 100.0,
            )
        })
        .collect();
    rows.push(score_line("a", 9, "unknown", 0.5));
    fs::write(dir.path().join("scores.jsonl"), rows.join("\n") + "\n").unwrap();
    let out1 = dir.path().join("o1");
    ok(&[
        "detect",
        "--scores",
        s(&dir.path().join("scores.jsonl")),
        "--out",
        s(&out1),
    ]);
    let m = json(&out1.join("metrics.json"));
    assert_eq!(m["scorers"]["reliability"]["auroc"].as_f64(), Some(1.0));
    assert_eq!(m["scorers"]["reliability"]["ap"].as_f64(), Some(1.0));
    assert_eq!(m["unknown_skipped"].as_u64(), Some(1));
    assert!(out1.join("roc.svg").exists() && out1.join("pr.svg").exists());

    rows.reverse();
    rows.swap(0, 3);
    fs::write(dir.path().join("shuffled.jsonl"), rows.join("\n") + "\n").unwrap();
    let out2 = dir.path().join("o2");
    ok(&[
        "detect",
        "--scores",
        s(&dir.path().join("shuffled.jsonl")),
        "--out",
        s(&out2),
    ]);
    assert_eq!(
        fs::read(out1.join("metrics.json")).unwrap(),
        fs::read(out2.join("metrics.json")).unwrap()
    );

    let note = ok(&[
        "detect",
        "--scores",
        s(&dir.path().join("scores.jsonl")),
        "--out",
        s(&out2),
        "--reference",
    ]);
    assert!(note.contains("0.766") && note.contains("NOT reproduced"), "{note}");
}

#[test]
fn detect_rejects_single_class_and_bad_lines() {
    let dir = TempDir::new().unwrap();
    let path = dir.path().join("scores.jsonl");
    fs::write(
        &path,
        score_line("a", 1, "real", 0.3) + "\n" + &score_line("a", 2, "real", 0.4) + "\n",
    )
    .unwrap();
    let out = sae(&["detect", "--scores", s(&path), "--out", s(dir.path())]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("both classes"));

    fs::write(
        &path,
        r#"{"image_id":"a","group_id":1,"category":"dog","label":"real","scorer":"reliability","score":"x"}"#,
    )
    .unwrap();
    let out = sae(&["detect", "--scores", s(&path), "--out", s(dir.path())]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("line 1") && err.contains("score"), "{err}");
}

#[test]
fn chair_two_captions() {
    let dir = TempDir::new().unwrap();
    let captions = dir.path().join("captions.jsonl");
    fs::write(
        &captions,
        "{\"image_id\":\"a\",\"caption\":\"A dog sleeps on a couch.\"}\n{\"image_id\":\"b\",\"caption\":\"A cat.\"}\n",
    )
    .unwrap();
    let gt = dir.path().join("gt.json");
    fs::write(&gt, r#"{"a": ["dog"], "b": ["cat"]}"#).unwrap();
    ok(&[
        "chair",
        "--captions",
        s(&captions),
        "--gt",
        s(&gt),
        "--out",
        s(dir.path()),
    ]);
    let r = json(&dir.path().join("chair.json"));
    assert_eq!(r["c_s"].as_f64(), Some(0.5));
    assert!((r["c_i"].as_f64().unwrap() - 1.0 / 3.0).abs() < 1e-15);

    let lexicon = dir.path().join("lex.json");
    fs::write(&lexicon, r#"{"dog": "dog", "sofa": "couch"}"#).unwrap();
    ok(&[
        "chair",
        "--captions",
        s(&captions),
        "--gt",
        s(&gt),
        "--lexicon",
        s(&lexicon),
        "--out",
        s(dir.path()),
    ]);
    // "couch" and "cat" are no longer in the vocabulary
    assert_eq!(json(&dir.path().join("chair.json"))["c_i"].as_f64(), Some(0.0));

    fs::write(&gt, r#"{"a": ["dog"]}"#).unwrap();
    let out = sae(&[
        "chair",
        "--captions",
        s(&captions),
        "--gt",
        s(&gt),
        "--out",
        s(dir.path()),
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn intervene_zero_lambda_is_byte_identical() {
    let dir = TempDir::new().unwrap();
    let seg = dir.path().join("seg.saes");
    let px: Vec<u16> = (0..16).map(|i| if i % 4 < 2 { 1 } else { 2 }).collect();
    write_raster_file(&seg, &SegmentationMap::new(4, 4, px).unwrap()).unwrap();

    let blobs = dir.path().join("blobs");
    fs::create_dir(&blobs).unwrap();
    let vals: Vec<f64> = (0..2 * 3 * 4).map(|i| ((i * 37) % 11) as f64 - 5.5).collect();
    write_blob_file(
        &blobs.join("f32.saet"),
        &ArrayBlob::new(
            vec![2, 3, 4],
            BlobData::F32(vals.iter().map(|&v| v as f32 + 0.1).collect()),
        )
        .unwrap(),
    )
    .unwrap();
    write_blob_file(
        &blobs.join("f64.saet"),
        &ArrayBlob::new(vec![3, 4], BlobData::F64(vals[..12].iter().map(|v| v / 3.0).collect())).unwrap(),
    )
    .unwrap();

    for name in ["f32.saet", "f64.saet"] {
        let out = dir.path().join("single");
        ok(&[
            "intervene",
            "--input",
            s(&blobs.join(name)),
            "--segmentation",
            s(&seg),
            "--grid",
            "2x2",
            "--lambda",
            "0",
            "--out",
            s(&out),
        ]);
        assert_eq!(
            fs::read(out.join(name)).unwrap(),
            fs::read(blobs.join(name)).unwrap(),
            "{name}"
        );
    }

    let out = dir.path().join("all");
    ok(&[
        "intervene",
        "--input",
        s(&blobs),
        "--segmentation",
        s(&seg),
        "--grid",
        "2x2",
        "--lambda",
        "0",
        "--out",
        s(&out),
    ]);
    assert_eq!(snapshot(&out), snapshot(&blobs));

    let boosted = dir.path().join("boosted");
    ok(&[
        "intervene",
        "--input",
        s(&blobs),
        "--segmentation",
        s(&seg),
        "--grid",
        "2x2",
        "--lambda",
        "1",
        "--out",
        s(&boosted),
    ]);
    assert_ne!(snapshot(&boosted), snapshot(&blobs));

    let out = sae(&[
        "intervene",
        "--input",
        s(&blobs),
        "--segmentation",
        s(&seg),
        "--grid",
        "3x3",
        "--out",
        s(&boosted),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("visual tokens"));
}

#[test]
fn plot_renders_svgs() {
    let demo = TempDir::new().unwrap();
    ok(&["demo", "--images", "6", "--out", s(demo.path())]);
    let out = demo.path().join("figs");
    ok(&[
        "plot",
        "--summary",
        s(&demo.path().join("sae_summary.json")),
        "--metrics",
        s(&demo.path().join("metrics.json")),
        "--out",
        s(&out),
    ]);
    for name in [
        "sae_heatmap_real.svg",
        "sae_heatmap_hallucinated.svg",
        "roc.svg",
        "pr.svg",
    ] {
        let text = fs::read_to_string(out.join(name)).unwrap();
        assert!(
            text.starts_with("<svg") && text.trim_end().ends_with("</svg>"),
            "{name}"
        );
    }
    assert_eq!(sae(&["plot", "--out", s(&out)]).status.code(), Some(2));
}

#[test]
fn help_and_usage_errors() {
    let help = ok(&["--help"]);
    assert!(help.contains("SAET") && help.contains("Exit codes"));
    assert_eq!(sae(&[]).status.code(), Some(2));
    assert_eq!(sae(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(
        sae(&["demo", "--out", "/tmp/x", "--separation", "1.5"]).status.code(),
        Some(2)
    );

    let missing = sae(&[
        "compute",
        "--traces",
        "/nonexistent/traces",
        "--segs",
        "/nonexistent",
        "--out",
        "/tmp/x",
    ]);
    assert_eq!(missing.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&missing.stderr).contains("/nonexistent/traces"));
}
