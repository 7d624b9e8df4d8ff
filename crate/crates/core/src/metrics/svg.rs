// SPDX-License-Identifier: MIT OR Apache-2.0

//! Minimal SVG rendering of ROC/PR curves and layer-head heatmaps.
//!
//! Geometry is cosmetic; every figure embeds its exact input values as JSON
//! inside `<metadata>`.

use std::fmt::Write as _;

use serde::Serialize;

use super::detection::DetectionResult;

const SIZE: f64 = 360.0;
const PAD: f64 = 48.0;

const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn header(out: &mut String, width: f64, height: f64, title: &str, metadata: &impl Serialize) {
    let meta = serde_json::to_string(metadata).expect("plot data serializes");
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(out, "<metadata>{}</metadata>", escape(&meta));
    let _ = writeln!(out, r#"<rect width="{width}" height="{height}" fill="white"/>"#);
    let _ = writeln!(
        out,
        r#"<text x="{}" y="20" text-anchor="middle" font-size="13">{}</text>"#,
        width / 2.0,
        escape(title)
    );
}

fn axes(out: &mut String, x_label: &str, y_label: &str) {
    let (x0, y0, x1, y1) = (PAD, SIZE - PAD, SIZE - PAD / 2.0, PAD);
    let _ = writeln!(
        out,
        r#"<path d="M{x0} {y1} L{x0} {y0} L{x1} {y0}" stroke="black" fill="none"/>"#
    );
    for t in 0..=4 {
        let f = t as f64 / 4.0;
        let x = x0 + f * (x1 - x0);
        let y = y0 - f * (y0 - y1);
        let _ = writeln!(
            out,
            r#"<text x="{x}" y="{}" text-anchor="middle">{f}</text>"#,
            y0 + 14.0
        );
        let _ = writeln!(
            out,
            r#"<text x="{}" y="{}" text-anchor="end">{f}</text>"#,
            x0 - 4.0,
            y + 4.0
        );
    }
    let _ = writeln!(
        out,
        r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
        (x0 + x1) / 2.0,
        SIZE - 12.0,
        escape(x_label)
    );
    let _ = writeln!(
        out,
        r#"<text x="14" y="{}" text-anchor="middle" transform="rotate(-90 14 {})">{}</text>"#,
        (y0 + y1) / 2.0,
        (y0 + y1) / 2.0,
        escape(y_label)
    );
}

fn to_px(x: f64, y: f64) -> (f64, f64) {
    let (x0, y0, x1, y1) = (PAD, SIZE - PAD, SIZE - PAD / 2.0, PAD);
    (x0 + x * (x1 - x0), y0 - y * (y0 - y1))
}

fn polyline(out: &mut String, points: impl Iterator<Item = (f64, f64)>, color: &str) {
    let pts: Vec<String> = points
        .map(|(x, y)| {
            let (px, py) = to_px(x, y);
            format!("{px:.2},{py:.2}")
        })
        .collect();
    let _ = writeln!(
        out,
        r#"<polyline points="{}" stroke="{color}" stroke-width="1.5" fill="none"/>"#,
        pts.join(" ")
    );
}

fn legend(out: &mut String, idx: usize, text: &str) {
    let y = SIZE - PAD - 12.0 - 14.0 * idx as f64;
    let color = PALETTE[idx % PALETTE.len()];
    let _ = writeln!(
        out,
        r#"<text x="{}" y="{y}" text-anchor="end" fill="{color}">{}</text>"#,
        SIZE - PAD / 2.0 - 4.0,
        escape(text)
    );
}

#[derive(Serialize)]
struct CurveData<'a> {
    name: &'a str,
    auroc: f64,
    ap: f64,
    x: Vec<f64>,
    y: Vec<f64>,
}

/// ROC curves for one or more named scorers.
pub fn roc_svg(curves: &[(&str, &DetectionResult)]) -> String {
    let data: Vec<CurveData> = curves
        .iter()
        .map(|(name, r)| CurveData {
            name,
            auroc: r.auroc,
            ap: r.ap,
            x: r.roc_points.iter().map(|p| p.fpr).collect(),
            y: r.roc_points.iter().map(|p| p.tpr).collect(),
        })
        .collect();
    let mut out = String::new();
    header(&mut out, SIZE, SIZE, "ROC", &data);
    axes(&mut out, "false positive rate", "true positive rate");
    polyline(&mut out, [(0.0, 0.0), (1.0, 1.0)].into_iter(), "#bbbbbb");
    for (i, d) in data.iter().enumerate() {
        polyline(
            &mut out,
            d.x.iter().copied().zip(d.y.iter().copied()),
            PALETTE[i % PALETTE.len()],
        );
        legend(&mut out, i, &format!("{} (AUROC {:.3})", d.name, d.auroc));
    }
    out.push_str("</svg>\n");
    out
}

/// Precision-recall curves for one or more named scorers.
pub fn pr_svg(curves: &[(&str, &DetectionResult)]) -> String {
    let data: Vec<CurveData> = curves
        .iter()
        .map(|(name, r)| CurveData {
            name,
            auroc: r.auroc,
            ap: r.ap,
            x: r.pr_points.iter().map(|p| p.recall).collect(),
            y: r.pr_points.iter().map(|p| p.precision).collect(),
        })
        .collect();
    let mut out = String::new();
    header(&mut out, SIZE, SIZE, "Precision-recall", &data);
    axes(&mut out, "recall", "precision");
    for (i, d) in data.iter().enumerate() {
        polyline(
            &mut out,
            d.x.iter().copied().zip(d.y.iter().copied()),
            PALETTE[i % PALETTE.len()],
        );
        legend(&mut out, i, &format!("{} (AP {:.3})", d.name, d.ap));
    }
    out.push_str("</svg>\n");
    out
}

#[derive(Serialize)]
struct HeatmapData<'a> {
    title: &'a str,
    /// `values[layer][head]`
    values: &'a [Vec<f64>],
}

/// A layer (rows) by head (columns) heatmap of values in `[0, 1]`.
pub fn heatmap_svg(title: &str, values: &[Vec<f64>]) -> String {
    let cell = 18.0;
    let rows = values.len();
    let cols = values.iter().map(Vec::len).max().unwrap_or(0);
    let width = PAD + cols as f64 * cell + 16.0;
    let height = PAD + rows as f64 * cell + 32.0;
    let mut out = String::new();
    header(&mut out, width, height, title, &HeatmapData { title, values });
    for (l, row) in values.iter().enumerate() {
        let y = PAD + l as f64 * cell;
        let _ = writeln!(
            out,
            r#"<text x="{}" y="{}" text-anchor="end">{l}</text>"#,
            PAD - 4.0,
            y + 13.0
        );
        for (h, &v) in row.iter().enumerate() {
            let x = PAD + h as f64 * cell;
            let shade = (255.0 * (1.0 - v.clamp(0.0, 1.0))).round() as u8;
            let _ = writeln!(
                out,
                r##"<rect x="{x}" y="{y}" width="{cell}" height="{cell}" fill="#ff{shade:02x}{shade:02x}"><title>layer {l} head {h}: {v}</title></rect>"##
            );
        }
    }
    let _ = writeln!(
        out,
        r#"<text x="{}" y="{}" text-anchor="middle">head</text>"#,
        PAD + cols as f64 * cell / 2.0,
        height - 10.0
    );
    let _ = writeln!(out, r#"<text x="12" y="{}">layer</text>"#, PAD - 8.0);
    out.push_str("</svg>\n");
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::detection::evaluate;

    #[test]
    fn roc_embeds_exact_points() {
        let r = evaluate(&[(0.9, true), (0.1, false), (0.4, true)]).unwrap();
        let svg = roc_svg(&[("reliability", &r)]);
        let start = svg.find("<metadata>").unwrap() + "<metadata>".len();
        let end = svg.find("</metadata>").unwrap();
        let parsed: serde_json::Value = serde_json::from_str(&svg[start..end]).unwrap();
        assert_eq!(parsed[0]["auroc"], 1.0);
        assert_eq!(parsed[0]["y"][1], 0.5);
        assert!(svg.ends_with("</svg>\n"));
    }

    #[test]
    fn heatmap_shape() {
        let svg = heatmap_svg("SAE <real>", &[vec![0.0, 1.0], vec![0.5, 0.25]]);
        assert_eq!(svg.matches("<rect x=").count(), 4);
        assert!(svg.contains("SAE &lt;real&gt;"));
    }
}
