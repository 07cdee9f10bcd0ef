//! Result files: one CSV row per run, a JSON sidecar with the full config
//! echo, the per-step objective log, and dependency-free SVG charts.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::Serialize;

use super::{HarnessError, LayerSparsity, RunResult, StepLog};

/// The flat CSV form of a [`RunResult`]. Per-layer values are joined with
/// `;`, and absent values are empty.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ResultRow {
    pub task: String,
    pub condition: String,
    pub mode: String,
    pub setting: String,
    pub lambda_max: f64,
    pub seed: u64,
    pub epochs: usize,
    pub eval_split: String,
    pub metric: String,
    pub final_metric: f64,
    pub bits_lower: f64,
    pub bits_upper: f64,
    pub parameter_count: usize,
    pub final_expected_l0: Option<f64>,
    pub sparsity_all: String,
    pub sparsity_attention: String,
}

fn join(values: &[f64]) -> String {
    values.iter().map(f64::to_string).collect::<Vec<_>>().join(";")
}

impl From<&RunResult> for ResultRow {
    fn from(r: &RunResult) -> Self {
        let c = &r.config;
        let (all, attention) = r.sparsity.as_ref().map_or((String::new(), String::new()), |s| (join(&s.all), join(&s.attention)));
        Self {
            task: c.task.to_string(),
            condition: c.condition.to_string(),
            mode: c.mode.to_string(),
            setting: c.setting(),
            lambda_max: c.lambda_max,
            seed: c.seed,
            epochs: c.epochs,
            eval_split: c.eval_split.to_string(),
            metric: r.metadata.metric.clone(),
            final_metric: r.final_metric,
            bits_lower: r.bits_lower,
            bits_upper: r.bits_upper,
            parameter_count: r.parameter_count,
            final_expected_l0: r.final_expected_l0(),
            sparsity_all: all,
            sparsity_attention: attention,
        }
    }
}

/// One CSV row per serialized item, with a header from the field names.
pub fn write_rows_csv<T: Serialize>(path: &Path, rows: impl IntoIterator<Item = T>) -> Result<(), HarnessError> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| HarnessError::io(path, e))
}

pub fn write_results_csv(path: &Path, results: &[RunResult]) -> Result<(), HarnessError> {
    write_rows_csv(path, results.iter().map(ResultRow::from))
}

/// Pretty-printed JSON array of full results.
pub fn write_results_json(path: &Path, results: &[RunResult]) -> Result<(), HarnessError> {
    let mut text = serde_json::to_string_pretty(results)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| HarnessError::io(path, e))
}

pub fn write_step_log_csv(path: &Path, steps: &[StepLog]) -> Result<(), HarnessError> {
    write_rows_csv(path, steps)
}

#[derive(Serialize)]
struct SparsityRow {
    layer: usize,
    all_matrices: f64,
    attention_only: f64,
}

pub fn write_sparsity_csv(path: &Path, s: &LayerSparsity) -> Result<(), HarnessError> {
    write_rows_csv(
        path,
        s.all.iter().zip(&s.attention).enumerate().map(|(layer, (&a, &t))| SparsityRow { layer, all_matrices: a, attention_only: t }),
    )
}

/// A named sequence of `(x, y)` points.
#[derive(Clone, Debug, PartialEq)]
pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 400.0;
const MARGIN: f64 = 60.0;
const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

fn header(out: &mut String, title: &str, x_label: &str, y_label: &str) {
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(out, r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#);
    let _ = writeln!(out, r#"<text x="{}" y="24" text-anchor="middle" font-size="15">{}</text>"#, WIDTH / 2.0, escape(title));
    let _ = writeln!(out, r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#, WIDTH / 2.0, HEIGHT - 12.0, escape(x_label));
    let _ = writeln!(
        out,
        r#"<text x="16" y="{y}" text-anchor="middle" transform="rotate(-90 16 {y})">{}</text>"#,
        escape(y_label),
        y = HEIGHT / 2.0
    );
    let (x0, y0, x1) = (MARGIN, HEIGHT - MARGIN, WIDTH - MARGIN);
    let _ = writeln!(out, r#"<line x1="{x0}" y1="{y0}" x2="{x1}" y2="{y0}" stroke="black"/>"#);
    let _ = writeln!(out, r#"<line x1="{x0}" y1="{y0}" x2="{x0}" y2="{MARGIN}" stroke="black"/>"#);
}

fn y_ticks(out: &mut String, lo: f64, hi: f64) {
    for i in 0..=4 {
        let v = lo + (hi - lo) * i as f64 / 4.0;
        let y = HEIGHT - MARGIN - (HEIGHT - 2.0 * MARGIN) * i as f64 / 4.0;
        let _ = writeln!(out, r#"<text x="{}" y="{}" text-anchor="end">{v:.3}</text>"#, MARGIN - 6.0, y + 4.0);
    }
}

fn legend(out: &mut String, names: &[&str]) {
    for (i, name) in names.iter().enumerate() {
        let y = MARGIN + 16.0 * i as f64;
        let x = WIDTH - MARGIN - 120.0;
        let _ = writeln!(out, r#"<rect x="{x}" y="{}" width="10" height="10" fill="{}"/>"#, y - 9.0, COLORS[i % COLORS.len()]);
        let _ = writeln!(out, r#"<text x="{}" y="{y}">{}</text>"#, x + 14.0, escape(name));
    }
}

fn bounds(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
    if !lo.is_finite() {
        (0.0, 1.0)
    } else if hi > lo {
        (lo, hi)
    } else {
        (lo - 0.5, hi + 0.5)
    }
}

/// Line chart; `log_x` plots the x axis in log2 (for bit budgets).
pub fn line_chart_svg(title: &str, x_label: &str, y_label: &str, series: &[Series], log_x: bool) -> String {
    let tx = |x: f64| if log_x { x.max(f64::MIN_POSITIVE).log2() } else { x };
    let (xlo, xhi) = bounds(series.iter().flat_map(|s| s.points.iter().map(|p| tx(p.0))));
    let (ylo, yhi) = bounds(series.iter().flat_map(|s| s.points.iter().map(|p| p.1)));
    let px = |x: f64| MARGIN + (tx(x) - xlo) / (xhi - xlo) * (WIDTH - 2.0 * MARGIN);
    let py = |y: f64| HEIGHT - MARGIN - (y - ylo) / (yhi - ylo) * (HEIGHT - 2.0 * MARGIN);
    let mut out = String::new();
    header(&mut out, title, x_label, y_label);
    y_ticks(&mut out, ylo, yhi);
    for (i, s) in series.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        let pts: Vec<String> = s.points.iter().map(|&(x, y)| format!("{:.2},{:.2}", px(x), py(y))).collect();
        let _ = writeln!(out, r#"<polyline fill="none" stroke="{color}" stroke-width="2" points="{}"/>"#, pts.join(" "));
        for &(x, y) in &s.points {
            let _ = writeln!(out, r#"<circle cx="{:.2}" cy="{:.2}" r="3" fill="{color}"/>"#, px(x), py(y));
        }
    }
    legend(&mut out, &series.iter().map(|s| s.name.as_str()).collect::<Vec<_>>());
    out.push_str("</svg>\n");
    out
}

/// Grouped bar chart: one group per category, one bar per series. Values
/// are plotted on a fixed `[0, 1]` axis.
pub fn bar_chart_svg(title: &str, x_label: &str, y_label: &str, categories: &[String], series: &[(String, Vec<f64>)]) -> String {
    let mut out = String::new();
    header(&mut out, title, x_label, y_label);
    y_ticks(&mut out, 0.0, 1.0);
    let group_w = (WIDTH - 2.0 * MARGIN) / categories.len().max(1) as f64;
    let bar_w = group_w * 0.8 / series.len().max(1) as f64;
    for (c, cat) in categories.iter().enumerate() {
        let gx = MARGIN + group_w * c as f64;
        let _ = writeln!(out, r#"<text x="{:.2}" y="{}" text-anchor="middle">{}</text>"#, gx + group_w / 2.0, HEIGHT - MARGIN + 16.0, escape(cat));
        for (i, (_, values)) in series.iter().enumerate() {
            let v = values.get(c).copied().unwrap_or(0.0).clamp(0.0, 1.0);
            let h = v * (HEIGHT - 2.0 * MARGIN);
            let _ = writeln!(
                out,
                r#"<rect x="{:.2}" y="{:.2}" width="{:.2}" height="{:.2}" fill="{}"/>"#,
                gx + group_w * 0.1 + bar_w * i as f64,
                HEIGHT - MARGIN - h,
                bar_w,
                h,
                COLORS[i % COLORS.len()]
            );
        }
    }
    legend(&mut out, &series.iter().map(|s| s.0.as_str()).collect::<Vec<_>>());
    out.push_str("</svg>\n");
    out
}
