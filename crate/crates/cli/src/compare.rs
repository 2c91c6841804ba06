//! Cross-run comparison: aligned per-step group scores for several run
//! directories, with deltas against the first (baseline) run.

use std::fmt::Write as _;
use std::path::Path;

use seglab_core::{Error, Result};

use crate::manifest::{read_json, RunManifest};
use crate::report::{fmt_opt, median, read_report};

#[derive(Debug, Clone)]
pub struct MethodSummary {
    pub label: String,
    pub scenario_sha256: String,
    /// Cross-seed median (old, new, all) per step.
    pub per_step: Vec<(Option<f64>, Option<f64>, Option<f64>)>,
}

/// Load a run directory written by `run`: its manifest plus every seed's
/// report, reduced to cross-seed medians.
pub fn load_run_dir(dir: &Path) -> Result<MethodSummary> {
    let manifest: RunManifest = read_json(&dir.join("manifest.json"))
        .map_err(|e| Error::config(format!("{}: not a run directory: {e}", dir.display())))?;
    let mut reports = Vec::with_capacity(manifest.seeds.len());
    for &seed in &manifest.seeds {
        let path = dir.join(format!("seed_{seed}")).join("report.json");
        reports.push(read_report(&path)?);
    }
    let n_steps = reports
        .iter()
        .map(|r| r.steps.len())
        .min()
        .ok_or_else(|| Error::config(format!("{}: run has no seeds", dir.display())))?;
    let per_step = (0..n_steps)
        .map(|t| {
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
            (old, new, all)
        })
        .collect();
    Ok(MethodSummary {
        label: manifest.method.label,
        scenario_sha256: manifest.scenario.sha256,
        per_step,
    })
}

fn delta(v: Option<f64>, base: Option<f64>) -> Option<f64> {
    match (v, base) {
        (Some(v), Some(b)) => Some(v - b),
        _ => None,
    }
}

/// CSV comparison table. The first summary is the baseline; delta columns
/// are each method's score minus the baseline's at the same step.
pub fn compare_csv(summaries: &[MethodSummary]) -> String {
    let mut out =
        String::from("step,method,miou_old,miou_new,miou_all,delta_old,delta_new,delta_all\n");
    let base = &summaries[0];
    let n_steps = summaries
        .iter()
        .map(|s| s.per_step.len())
        .min()
        .unwrap_or(0);
    for t in 0..n_steps {
        for s in summaries {
            let (old, new, all) = s.per_step[t];
            let (b_old, b_new, b_all) = base.per_step[t];
            let _ = writeln!(
                out,
                "{t},{},{},{},{},{},{},{}",
                s.label,
                fmt_opt(old),
                fmt_opt(new),
                fmt_opt(all),
                fmt_opt(delta(old, b_old)),
                fmt_opt(delta(new, b_new)),
                fmt_opt(delta(all, b_all)),
            );
        }
    }
    out
}

fn cell(v: Option<f64>) -> String {
    match v {
        Some(v) => format!("{v:.4}"),
        None => "-".into(),
    }
}

/// Human-readable rendering of the same table.
pub fn compare_console(summaries: &[MethodSummary]) -> String {
    let label_w = summaries
        .iter()
        .map(|s| s.label.len())
        .max()
        .unwrap_or(6)
        .max("method".len());
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<label_w$}  {:>6}  {:>8} {:>8} {:>8}  {:>8} {:>8} {:>8}",
        "method", "step", "old", "new", "all", "d_old", "d_new", "d_all"
    );
    let base = &summaries[0];
    let n_steps = summaries
        .iter()
        .map(|s| s.per_step.len())
        .min()
        .unwrap_or(0);
    for t in 0..n_steps {
        for s in summaries {
            let (old, new, all) = s.per_step[t];
            let (b_old, b_new, b_all) = base.per_step[t];
            let _ = writeln!(
                out,
                "{:<label_w$}  {:>6}  {:>8} {:>8} {:>8}  {:>8} {:>8} {:>8}",
                s.label,
                t,
                cell(old),
                cell(new),
                cell(all),
                cell(delta(old, b_old)),
                cell(delta(new, b_new)),
                cell(delta(all, b_all)),
            );
        }
    }
    out
}

/// All compared runs must describe the same scenario bytes.
pub fn check_same_scenario(summaries: &[MethodSummary]) -> Result<()> {
    let first = &summaries[0].scenario_sha256;
    for s in &summaries[1..] {
        if &s.scenario_sha256 != first {
            return Err(Error::config(format!(
                "run '{}' used a different scenario than '{}'",
                s.label, summaries[0].label
            )));
        }
    }
    Ok(())
}
