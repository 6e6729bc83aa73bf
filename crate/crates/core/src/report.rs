//! Static report for a finished run: a grouped bar chart of deletion and
//! insertion accuracy per (method, backend), and a crop gallery.
//!
//! Everything here reads persisted files only; no model is loaded.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::pipeline::{self, crops_file, pair_name, CropRecord, ImageStatus, PipelineError, Result, Summary};

/// Images shown per (method, backend) pair in the gallery.
pub const GALLERY_IMAGES: usize = 24;
/// Crops shown per image in the gallery.
pub const GALLERY_CROPS: usize = 3;

#[derive(Debug, Clone, PartialEq)]
pub struct ReportOutputs {
    pub plot: PathBuf,
    pub gallery_markdown: PathBuf,
    pub gallery_html: PathBuf,
}

/// One bar of the comparison chart.
#[derive(Debug, Clone, PartialEq)]
pub struct Bar {
    pub group: String,
    pub series: &'static str,
    pub value: f64,
}

const SERIES: [(&str, &str); 5] = [
    ("original", "#7f7f7f"),
    ("guided_deletion", "#d62728"),
    ("random_deletion", "#ff9896"),
    ("guided_insertion", "#1f77b4"),
    ("random_insertion", "#aec7e8"),
];

/// Bars in chart order, straight from the summary numbers.
pub fn bars(summary: &Summary) -> Vec<Bar> {
    let mut out = Vec::new();
    for e in &summary.entries {
        let group = format!("{} / {}", e.method, e.backend);
        let g = e.report.guided.as_ref();
        let r = e.report.random.as_ref();
        let values = [
            g.map(|c| c.accuracy_original),
            g.map(|c| c.accuracy_deletion),
            r.map(|c| c.accuracy_deletion),
            g.map(|c| c.accuracy_insertion),
            r.map(|c| c.accuracy_insertion),
        ];
        for ((series, _), v) in SERIES.iter().zip(values) {
            if let Some(value) = v {
                out.push(Bar {
                    group: group.clone(),
                    series,
                    value,
                });
            }
        }
    }
    out
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

/// Grouped bar chart as SVG. Each bar carries its exact value in
/// `data-value` so the numbers can be checked against the summary.
pub fn render_svg(summary: &Summary) -> String {
    let bars = bars(summary);
    let groups: Vec<String> = summary
        .entries
        .iter()
        .map(|e| format!("{} / {}", e.method, e.backend))
        .collect();
    let (bar_w, gap, left, top, plot_h) = (22.0, 30.0, 50.0, 30.0, 240.0);
    let group_w = bar_w * SERIES.len() as f64 + gap;
    let width = (left + group_w * groups.len().max(1) as f64 + 20.0).max(560.0);
    let height = top + plot_h + 60.0 + 20.0 * SERIES.len() as f64;

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(
        s,
        r#"<text x="{left}" y="18" font-size="13">Top-1 accuracy under deletion and insertion (config {})</text>"#,
        &summary.config_hash[..summary.config_hash.len().min(16)]
    );
    for tick in 0..=4 {
        let v = tick as f64 / 4.0;
        let y = top + plot_h * (1.0 - v);
        let _ = writeln!(
            s,
            r##"<line x1="{left}" y1="{y}" x2="{}" y2="{y}" stroke="#ddd"/><text x="{}" y="{}" text-anchor="end">{v:.2}</text>"##,
            width - 20.0,
            left - 6.0,
            y + 4.0
        );
    }
    for (gi, group) in groups.iter().enumerate() {
        let x0 = left + gap / 2.0 + gi as f64 * group_w;
        for (si, (series, color)) in SERIES.iter().enumerate() {
            let Some(bar) = bars.iter().find(|b| &b.group == group && b.series == *series) else {
                continue;
            };
            let h = plot_h * bar.value.clamp(0.0, 1.0);
            let _ = writeln!(
                s,
                r#"<rect x="{}" y="{:.2}" width="{bar_w}" height="{h:.2}" fill="{color}" data-group="{}" data-series="{series}" data-value="{}"><title>{series}: {}</title></rect>"#,
                x0 + si as f64 * bar_w,
                top + plot_h - h,
                escape(group),
                bar.value,
                bar.value
            );
        }
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
            x0 + bar_w * SERIES.len() as f64 / 2.0,
            top + plot_h + 16.0,
            escape(group)
        );
    }
    for (si, (series, color)) in SERIES.iter().enumerate() {
        let y = top + plot_h + 40.0 + 20.0 * si as f64;
        let _ = writeln!(
            s,
            r#"<rect x="{left}" y="{}" width="12" height="12" fill="{color}"/><text x="{}" y="{}">{}</text>"#,
            y - 10.0,
            left + 18.0,
            y,
            series.replace('_', " ")
        );
    }
    s.push_str("</svg>\n");
    s
}

fn gallery_rows(run_dir: &Path, summary: &Summary) -> Vec<(String, String, Vec<CropRecord>)> {
    summary
        .entries
        .iter()
        .map(|e| {
            let dir = run_dir.join(pair_name(&e.method, &e.backend));
            let rows: Vec<CropRecord> = pipeline::read_jsonl(&crops_file(&dir)).unwrap_or_default();
            let shown = rows
                .into_iter()
                .filter(|r| r.status == ImageStatus::Ok && !r.elements.is_empty())
                .take(GALLERY_IMAGES)
                .collect();
            (e.method.clone(), e.backend.clone(), shown)
        })
        .collect()
}

fn crop_png(run_dir: &Path, method: &str, backend: &str, image_id: &str, rank: usize) -> Option<String> {
    let rel = format!(
        "../{}/crops/{}_{rank}.png",
        pair_name(method, backend),
        pipeline::file_stem(image_id)
    );
    run_dir.join("report").join(&rel).exists().then_some(rel)
}

pub fn render_gallery_markdown(run_dir: &Path, summary: &Summary) -> String {
    let mut s = String::from("# Crop gallery\n");
    for (method, backend, rows) in gallery_rows(run_dir, summary) {
        let _ = writeln!(s, "\n## {method} / {backend}\n");
        s.push_str("| image | label | rank | box (r0,c0,r1,c1) | overlap | mean | central | score | crop |\n");
        s.push_str("|---|---|---|---|---|---|---|---|---|\n");
        for r in rows {
            for e in r.elements.iter().take(GALLERY_CROPS) {
                let f = &e.factors;
                let c = e.crop;
                let img = crop_png(run_dir, &method, &backend, &r.image_id, e.rank)
                    .map(|p| format!("![]({p})"))
                    .unwrap_or_default();
                let _ = writeln!(
                    s,
                    "| {} | {} | {} | {},{},{},{} | {:.4} | {:.4} | {:.4} | {:.4} | {img} |",
                    r.image_id,
                    r.label,
                    e.rank,
                    c.row0,
                    c.col0,
                    c.row1,
                    c.col1,
                    f.overlap_factor,
                    f.mean_importance,
                    f.central_importance,
                    f.score
                );
            }
        }
    }
    s
}

pub fn render_gallery_html(run_dir: &Path, summary: &Summary) -> String {
    let mut s = String::from(
        "<!doctype html>\n<html><head><meta charset=\"utf-8\"><title>Crop gallery</title>\n<style>body{font-family:sans-serif}table{border-collapse:collapse}td,th{border:1px solid #ccc;padding:3px 6px}img{image-rendering:pixelated;height:64px}</style>\n</head><body>\n<h1>Crop gallery</h1>\n<p><img src=\"comparison.svg\" style=\"height:auto\"></p>\n",
    );
    for (method, backend, rows) in gallery_rows(run_dir, summary) {
        let _ = writeln!(s, "<h2>{} / {}</h2>", escape(&method), escape(&backend));
        s.push_str("<table><tr><th>image</th><th>label</th><th>rank</th><th>box</th><th>overlap</th><th>mean</th><th>central</th><th>score</th><th>crop</th></tr>\n");
        for r in rows {
            for e in r.elements.iter().take(GALLERY_CROPS) {
                let f = &e.factors;
                let c = e.crop;
                let img = crop_png(run_dir, &method, &backend, &r.image_id, e.rank)
                    .map(|p| format!("<img src=\"{}\">", escape(&p)))
                    .unwrap_or_default();
                let _ = writeln!(
                    s,
                    "<tr><td>{}</td><td>{}</td><td>{}</td><td>{},{},{},{}</td><td>{:.4}</td><td>{:.4}</td><td>{:.4}</td><td>{:.4}</td><td>{img}</td></tr>",
                    escape(&r.image_id),
                    r.label,
                    e.rank,
                    c.row0,
                    c.col0,
                    c.row1,
                    c.col1,
                    f.overlap_factor,
                    f.mean_importance,
                    f.central_importance,
                    f.score
                );
            }
        }
        s.push_str("</table>\n");
    }
    s.push_str("</body></html>\n");
    s
}

/// Writes `report/comparison.svg`, `report/gallery.md` and
/// `report/gallery.html` under `run_dir`.
pub fn cmd_report(run_dir: &Path) -> Result<ReportOutputs> {
    if !run_dir.is_dir() {
        return Err(PipelineError::MissingResults(format!(
            "{} is not a directory",
            run_dir.display()
        )));
    }
    let summary = Summary::load(run_dir)?;
    let out = run_dir.join("report");
    let outputs = ReportOutputs {
        plot: out.join("comparison.svg"),
        gallery_markdown: out.join("gallery.md"),
        gallery_html: out.join("gallery.html"),
    };
    pipeline::write_file(&outputs.plot, render_svg(&summary).as_bytes())?;
    pipeline::write_file(
        &outputs.gallery_markdown,
        render_gallery_markdown(run_dir, &summary).as_bytes(),
    )?;
    pipeline::write_file(&outputs.gallery_html, render_gallery_html(run_dir, &summary).as_bytes())?;
    tracing::info!(dir = %out.display(), "report written");
    Ok(outputs)
}
