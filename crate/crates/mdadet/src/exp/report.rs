//! Side-by-side comparison of finished runs.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::Result;

use super::pipeline::{RunKind, RunManifest, RunStatus};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReportRow {
    pub name: String,
    pub kind: RunKind,
    /// Which eval the numbers come from (`stage2`, `round_3`, ...).
    pub eval_key: String,
    pub per_domain: BTreeMap<String, f64>,
    pub mean_target_map: Option<f64>,
    pub iou: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReportDoc {
    pub rows: Vec<ReportRow>,
    pub warnings: Vec<String>,
}

pub fn kind_label(kind: RunKind) -> &'static str {
    match kind {
        RunKind::Baseline => "baseline",
        RunKind::Oracle => "oracle",
        RunKind::Mda => "mda",
        RunKind::MdaSt => "mda+st",
    }
}

pub fn build_report(manifests: &[RunManifest]) -> ReportDoc {
    let mut rows = Vec::new();
    let mut warnings = Vec::new();
    for m in manifests {
        if let RunStatus::Partial { stage, error } = &m.status {
            warnings.push(format!(
                "run {} is partial (failed during {stage}: {error}); showing its last eval",
                m.name
            ));
        }
        let Some(key) = m.final_eval.clone() else {
            warnings.push(format!("run {} has no evaluation; skipped", m.name));
            continue;
        };
        let Some(report) = m.evals.get(&key) else {
            warnings.push(format!("run {} lacks eval '{key}'; skipped", m.name));
            continue;
        };
        rows.push(ReportRow {
            name: m.name.clone(),
            kind: m.kind,
            eval_key: key,
            per_domain: report.domains.iter().map(|(k, d)| (k.clone(), d.map)).collect(),
            mean_target_map: m.mean_target_map(),
            iou: report.iou_thr,
        });
    }
    rows.sort_by(|a, b| a.kind.cmp(&b.kind).then_with(|| a.name.cmp(&b.name)));
    let ious: BTreeSet<String> = rows.iter().map(|r| format!("{:.4}", r.iou)).collect();
    if ious.len() > 1 {
        warnings.push(format!(
            "rows were evaluated at different IoU thresholds ({}); numbers are not comparable",
            ious.into_iter().collect::<Vec<_>>().join(", ")
        ));
    }
    ReportDoc { rows, warnings }
}

/// Plain-text table: one row per run, one column per domain, target mean last.
pub fn render_text(doc: &ReportDoc) -> String {
    let domains: BTreeSet<&str> =
        doc.rows.iter().flat_map(|r| r.per_domain.keys().map(|s| s.as_str())).collect();
    let domains: Vec<&str> = domains.into_iter().collect();

    let mut header: Vec<String> = vec!["run".into(), "kind".into(), "eval".into()];
    header.extend(domains.iter().map(|d| format!("mAP[{d}]")));
    header.push("target-mean".into());

    let mut table: Vec<Vec<String>> = vec![header];
    for r in &doc.rows {
        let mut row = vec![r.name.clone(), kind_label(r.kind).into(), r.eval_key.clone()];
        for d in &domains {
            row.push(match r.per_domain.get(*d) {
                Some(v) => format!("{v:.4}"),
                None => "-".into(),
            });
        }
        row.push(match r.mean_target_map {
            Some(v) => format!("{v:.4}"),
            None => "-".into(),
        });
        table.push(row);
    }

    let cols = table[0].len();
    let widths: Vec<usize> = (0..cols)
        .map(|c| table.iter().map(|r| r[c].len()).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    for (i, row) in table.iter().enumerate() {
        let line: Vec<String> =
            row.iter().zip(&widths).map(|(cell, w)| format!("{cell:<w$}")).collect();
        out.push_str(line.join("  ").trim_end());
        out.push('\n');
        if i == 0 {
            let total: usize = widths.iter().sum::<usize>() + 2 * (cols - 1);
            out.push_str(&"-".repeat(total));
            out.push('\n');
        }
    }
    for w in &doc.warnings {
        out.push_str(&format!("warning: {w}\n"));
    }
    out
}

/// Writes `report.txt` and `report.json` into `dir`.
pub fn write_report(dir: &Path, doc: &ReportDoc) -> Result<(PathBuf, PathBuf)> {
    fs::create_dir_all(dir)?;
    let txt = dir.join("report.txt");
    let json = dir.join("report.json");
    fs::write(&txt, render_text(doc))?;
    fs::write(&json, serde_json::to_string_pretty(doc)?)?;
    Ok((txt, json))
}
