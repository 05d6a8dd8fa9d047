use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Result;
use reprosv_core::train::{read_results_csv, EvalReport};

use crate::commands::Outcome;
use crate::manifest::RunManifest;
use crate::UsageError;

/// Rows in report order: by mode, then total padding length, segment count
/// and segment length; remaining fields only break exact ties.
pub fn sorted(mut rows: Vec<EvalReport>) -> Vec<EvalReport> {
    rows.sort_by(|a, b| {
        (a.mode.as_str(), a.l, a.k, a.n, a.score_mode.as_str(), a.seed)
            .cmp(&(b.mode.as_str(), b.l, b.k, b.n, b.score_mode.as_str(), b.seed))
            .then(a.eer_percent.total_cmp(&b.eer_percent))
    });
    rows
}

pub fn markdown(rows: &[EvalReport]) -> String {
    let mut s = String::from(
        "| mode | l | k | n | score_mode | EER (%) | threshold | trials | seed |\n\
         |---|---:|---:|---:|---|---:|---:|---:|---:|\n",
    );
    for r in rows {
        let _ = writeln!(
            s,
            "| {} | {} | {} | {} | {} | {:.2} | {:.4} | {} | {} |",
            r.mode, r.l, r.k, r.n, r.score_mode, r.eer_percent, r.threshold, r.num_trials, r.seed
        );
    }
    s
}

/// One `n eer_percent` table per mode, rows ordered by `n`.
pub fn plot_data(rows: &[EvalReport]) -> Vec<(String, String)> {
    let mut modes: Vec<&str> = rows.iter().map(|r| r.mode.as_str()).collect();
    modes.dedup();
    modes
        .into_iter()
        .map(|mode| {
            let mut points: Vec<&EvalReport> = rows.iter().filter(|r| r.mode.as_str() == mode).collect();
            points.sort_by_key(|r| r.n);
            let mut text = String::from("n eer_percent\n");
            for r in points {
                let _ = writeln!(text, "{} {}", r.n, r.eer_percent);
            }
            (mode.to_owned(), text)
        })
        .collect()
}

pub fn run(inputs: &[PathBuf], out: &Path, manifest: &mut RunManifest) -> Result<Outcome> {
    if inputs.is_empty() {
        return Err(UsageError("report needs at least one results CSV".into()).into());
    }
    let mut rows = Vec::new();
    for path in inputs {
        rows.extend(read_results_csv(path).map_err(|e| UsageError(e.to_string()))?);
    }
    let rows = sorted(rows);
    let md = out.join("report.md");
    fs::write(&md, markdown(&rows))?;
    manifest.outputs.insert("report".into(), md);
    for (mode, text) in plot_data(&rows) {
        let path = out.join(format!("plot_{mode}.dat"));
        fs::write(&path, text)?;
        manifest.outputs.insert(format!("plot_{mode}"), path);
    }
    println!("{} rows", rows.len());
    Ok(Outcome::Done)
}
