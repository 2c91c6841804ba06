//! Per-seed reports and aggregates: JSON with full per-class detail, CSV
//! with one row per step and group, an optional SVG chart, and the
//! cross-seed aggregate with median rows.
//!
//! All numbers are printed with fixed six-decimal precision so identical
//! runs produce identical bytes. Absent values (a group with no classes
//! yet, or nothing of a group in the test set) stay empty rather than
//! becoming 0.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use seglab_core::metrics::StepMetrics;
use seglab_core::Result;

use crate::manifest::{read_json, write_json};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedReport {
    pub seed: u64,
    pub scenario_sha256: String,
    pub method: String,
    pub steps: Vec<StepMetrics>,
}

pub fn write_report(path: &Path, report: &SeedReport) -> Result<()> {
    write_json(path, report)
}

pub fn read_report(path: &Path) -> Result<SeedReport> {
    read_json(path)
}

pub fn fmt_opt(v: Option<f64>) -> String {
    match v {
        Some(v) => format!("{v:.6}"),
        None => String::new(),
    }
}

/// One row per step and group, in step order: old, new, all.
pub fn report_csv(steps: &[StepMetrics]) -> String {
    let mut out = String::from("step,group,miou\n");
    for m in steps {
        for (group, v) in [
            ("old", m.miou_old),
            ("new", m.miou_new),
            ("all", m.miou_all),
        ] {
            let _ = writeln!(out, "{},{group},{}", m.step, fmt_opt(v));
        }
    }
    out
}

/// Median of the present values; absent if none are present.
pub fn median(values: &[Option<f64>]) -> Option<f64> {
    let mut xs: Vec<f64> = values.iter().filter_map(|v| *v).collect();
    if xs.is_empty() {
        return None;
    }
    xs.sort_by(|a, b| a.partial_cmp(b).expect("scores are finite"));
    let n = xs.len();
    Some(if n % 2 == 1 {
        xs[n / 2]
    } else {
        (xs[n / 2 - 1] + xs[n / 2]) / 2.0
    })
}

/// Per-seed rows followed by cross-seed median rows (`seed` column
/// `median`), one row per (seed, step).
pub fn aggregate_csv(reports: &[SeedReport]) -> String {
    let mut out = String::from("seed,step,miou_old,miou_new,miou_all\n");
    for r in reports {
        for m in &r.steps {
            let _ = writeln!(
                out,
                "{},{},{},{},{}",
                r.seed,
                m.step,
                fmt_opt(m.miou_old),
                fmt_opt(m.miou_new),
                fmt_opt(m.miou_all)
            );
        }
    }
    let n_steps = reports.iter().map(|r| r.steps.len()).min().unwrap_or(0);
    for t in 0..n_steps {
        let old = median(
            &reports
                .iter()
                .map(|r| r.steps[t].miou_old)
                .collect::<Vec<_>>(),
        );
        let new = median(
            &reports
                .iter()
                .map(|r| r.steps[t].miou_new)
                .collect::<Vec<_>>(),
        );
        let all = median(
            &reports
                .iter()
                .map(|r| r.steps[t].miou_all)
                .collect::<Vec<_>>(),
        );
        let _ = writeln!(
            out,
            "median,{t},{},{},{}",
            fmt_opt(old),
            fmt_opt(new),
            fmt_opt(all)
        );
    }
    out
}

const SVG_W: f64 = 480.0;
const SVG_H: f64 = 320.0;
const MARGIN_L: f64 = 48.0;
const MARGIN_R: f64 = 16.0;
const MARGIN_T: f64 = 24.0;
const MARGIN_B: f64 = 40.0;

fn x_pos(step: usize, n_steps: usize) -> f64 {
    let span = SVG_W - MARGIN_L - MARGIN_R;
    if n_steps <= 1 {
        MARGIN_L + span / 2.0
    } else {
        MARGIN_L + span * step as f64 / (n_steps - 1) as f64
    }
}

fn y_pos(miou: f64) -> f64 {
    let span = SVG_H - MARGIN_T - MARGIN_B;
    MARGIN_T + span * (1.0 - miou)
}

/// Line chart of group mIoU against step.
pub fn svg_chart(steps: &[StepMetrics]) -> String {
    let n = steps.len();
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" viewBox="0 0 {SVG_W} {SVG_H}" font-family="monospace" font-size="11">"#
    );
    let _ = writeln!(
        s,
        r#"<rect width="{SVG_W}" height="{SVG_H}" fill="white"/>"#
    );
    for i in 0..=4 {
        let v = i as f64 / 4.0;
        let y = y_pos(v);
        let _ = writeln!(
            s,
            r##"<line x1="{MARGIN_L}" y1="{y:.1}" x2="{:.1}" y2="{y:.1}" stroke="#ddd"/>"##,
            SVG_W - MARGIN_R
        );
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{v:.2}</text>"#,
            MARGIN_L - 6.0,
            y + 4.0
        );
    }
    for (i, m) in steps.iter().enumerate() {
        let x = x_pos(i, n);
        let _ = writeln!(
            s,
            r#"<text x="{x:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
            SVG_H - MARGIN_B + 16.0,
            m.step
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">step</text>"#,
        (MARGIN_L + SVG_W - MARGIN_R) / 2.0,
        SVG_H - 8.0
    );
    let series = [
        (
            "old",
            "#d62728",
            steps.iter().map(|m| m.miou_old).collect::<Vec<_>>(),
        ),
        (
            "new",
            "#2ca02c",
            steps.iter().map(|m| m.miou_new).collect::<Vec<_>>(),
        ),
        (
            "all",
            "#1f77b4",
            steps.iter().map(|m| m.miou_all).collect::<Vec<_>>(),
        ),
    ];
    for (li, (label, color, values)) in series.iter().enumerate() {
        let points: Vec<String> = values
            .iter()
            .enumerate()
            .filter_map(|(i, v)| v.map(|v| format!("{:.1},{:.1}", x_pos(i, n), y_pos(v))))
            .collect();
        if !points.is_empty() {
            let _ = writeln!(
                s,
                r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="2"/>"#,
                points.join(" ")
            );
        }
        for (i, v) in values.iter().enumerate() {
            if let Some(v) = v {
                let _ = writeln!(
                    s,
                    r#"<circle cx="{:.1}" cy="{:.1}" r="3" fill="{color}"/>"#,
                    x_pos(i, n),
                    y_pos(*v)
                );
            }
        }
        let lx = MARGIN_L + 8.0 + 60.0 * li as f64;
        let _ = writeln!(
            s,
            r#"<rect x="{lx:.1}" y="{:.1}" width="10" height="10" fill="{color}"/>"#,
            MARGIN_T - 16.0
        );
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}">{label}</text>"#,
            lx + 14.0,
            MARGIN_T - 7.0
        );
    }
    s.push_str("</svg>\n");
    s
}
