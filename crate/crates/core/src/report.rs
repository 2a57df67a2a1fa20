//! JSON, CSV and SVG artifacts for metric reports, cost reports and training logs.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::accounting::CostReport;
use crate::error::Result;
use crate::metrics::MetricsReport;
use crate::train::EpochLog;

/// Pretty JSON with a trailing newline.
pub fn to_json<T: Serialize>(value: &T) -> Result<String> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    Ok(s)
}

/// `action,frames,mpjpe_mm,p_mpjpe_mm`, one row per action.
pub fn per_action_csv(report: &MetricsReport) -> String {
    let mut s = String::from("action,frames,mpjpe_mm,p_mpjpe_mm\n");
    for (action, m) in &report.per_action {
        let _ = writeln!(s, "{},{},{},{}", csv_field(action), m.frames, m.mpjpe_mm, m.p_mpjpe_mm);
    }
    s
}

/// `joint,name,mpjpe_mm`, one row per joint. Missing names fall back to the index.
pub fn per_joint_csv(report: &MetricsReport, names: &[String]) -> String {
    let mut s = String::from("joint,name,mpjpe_mm\n");
    for (j, e) in report.per_joint.iter().enumerate() {
        let name = names.get(j).map_or_else(|| j.to_string(), |n| csv_field(n));
        let _ = writeln!(s, "{j},{name},{e}");
    }
    s
}

/// `module,params,layer_macs,product_macs`, one row per module.
pub fn cost_csv(report: &CostReport) -> String {
    let mut s = String::from("module,params,layer_macs,product_macs\n");
    for e in &report.breakdown {
        let _ = writeln!(s, "{},{},{},{}", e.module, e.params, e.layer_macs, e.product_macs);
    }
    s
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// Writes `{stem}.json`, `{stem}_per_action.csv` and `{stem}_per_joint.csv`.
pub fn write_metrics(report: &MetricsReport, joint_names: &[String], dir: &Path, stem: &str) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let files = [
        (dir.join(format!("{stem}.json")), to_json(report)?),
        (dir.join(format!("{stem}_per_action.csv")), per_action_csv(report)),
        (dir.join(format!("{stem}_per_joint.csv")), per_joint_csv(report, joint_names)),
    ];
    write_all(files)
}

/// Writes `{stem}.json` and `{stem}_breakdown.csv`.
pub fn write_cost(report: &CostReport, dir: &Path, stem: &str) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let files = [
        (dir.join(format!("{stem}.json")), to_json(report)?),
        (dir.join(format!("{stem}_breakdown.csv")), cost_csv(report)),
    ];
    write_all(files)
}

fn write_all<const N: usize>(files: [(PathBuf, String); N]) -> Result<Vec<PathBuf>> {
    let mut out = Vec::with_capacity(N);
    for (path, body) in files {
        fs::write(&path, body)?;
        out.push(path);
    }
    Ok(out)
}

const WIDTH: f64 = 640.0;
const PANEL: f64 = 220.0;
const MARGIN: f64 = 56.0;

struct Series<'a> {
    label: &'a str,
    color: &'a str,
    values: Vec<f64>,
}

fn panel(svg: &mut String, top: f64, title: &str, series: &[Series<'_>], epochs: &[usize]) {
    let finite = series.iter().flat_map(|s| s.values.iter().copied()).filter(|v| v.is_finite());
    let (lo, hi) = finite.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    let (lo, hi) = if lo.is_finite() { (lo, if hi > lo { hi } else { lo + 1.0 }) } else { (0.0, 1.0) };
    let (x0, x1) = (MARGIN, WIDTH - 16.0);
    let (y0, y1) = (top + 24.0, top + PANEL - 24.0);
    let e_max = epochs.last().copied().unwrap_or(0).max(1) as f64;
    let e_min = epochs.first().copied().unwrap_or(0) as f64;
    let span = (e_max - e_min).max(1.0);
    let px = |e: usize| x0 + (e as f64 - e_min) / span * (x1 - x0);
    let py = |v: f64| y1 - (v - lo) / (hi - lo) * (y1 - y0);

    let _ = writeln!(svg, r#"<text x="{x0}" y="{}" font-size="13" font-weight="bold">{title}</text>"#, top + 14.0);
    let _ = writeln!(
        svg,
        r##"<rect x="{x0}" y="{y0}" width="{}" height="{}" fill="none" stroke="#888"/>"##,
        x1 - x0,
        y1 - y0
    );
    for (v, y) in [(hi, y0), (lo, y1)] {
        let _ = writeln!(
            svg,
            r#"<text x="{}" y="{}" font-size="10" text-anchor="end">{}</text>"#,
            x0 - 4.0,
            y + 3.0,
            tick(v)
        );
    }
    for (e, anchor) in [(e_min as usize, "start"), (e_max as usize, "end")] {
        let _ =
            writeln!(svg, r#"<text x="{}" y="{}" font-size="10" text-anchor="{anchor}">{e}</text>"#, px(e), y1 + 12.0);
    }
    for (i, s) in series.iter().enumerate() {
        let points: Vec<String> = epochs
            .iter()
            .zip(&s.values)
            .filter(|(_, v)| v.is_finite())
            .map(|(&e, &v)| format!("{:.1},{:.1}", px(e), py(v)))
            .collect();
        let _ = writeln!(
            svg,
            r#"<polyline fill="none" stroke="{}" stroke-width="1.5" points="{}"/>"#,
            s.color,
            points.join(" ")
        );
        let lx = x1 - 120.0;
        let ly = y0 + 14.0 + 14.0 * i as f64;
        let _ = writeln!(
            svg,
            r#"<line x1="{lx}" y1="{}" x2="{}" y2="{}" stroke="{}" stroke-width="2"/>"#,
            ly - 4.0,
            lx + 16.0,
            ly - 4.0,
            s.color
        );
        let _ = writeln!(svg, r#"<text x="{}" y="{ly}" font-size="11">{}</text>"#, lx + 20.0, s.label);
    }
}

fn tick(v: f64) -> String {
    if v.abs() >= 1000.0 {
        format!("{v:.0}")
    } else {
        format!("{v:.2}")
    }
}

/// Static line plot of the training loss and the evaluation errors per epoch.
pub fn epoch_plot_svg(log: &[EpochLog]) -> String {
    let epochs: Vec<usize> = log.iter().map(|r| r.epoch).collect();
    let height = 2.0 * PANEL + 8.0;
    let mut svg = format!(
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{height}" viewBox="0 0 {WIDTH} {height}" font-family="sans-serif">"#
    );
    svg.push('\n');
    let loss = [Series { label: "train loss", color: "#1f77b4", values: log.iter().map(|r| r.train_loss).collect() }];
    panel(&mut svg, 0.0, "Training loss", &loss, &epochs);
    let errors = [
        Series { label: "P1 (mm)", color: "#d62728", values: log.iter().map(|r| r.eval_p1).collect() },
        Series { label: "P2 (mm)", color: "#2ca02c", values: log.iter().map(|r| r.eval_p2).collect() },
        Series { label: "accel (mm)", color: "#9467bd", values: log.iter().map(|r| r.eval_accel).collect() },
    ];
    panel(&mut svg, PANEL, "Evaluation error", &errors, &epochs);
    svg.push_str("</svg>\n");
    svg
}
