//! Cross-run comparison tables. Takes two or more evaluated run
//! directories, lines their tasks up, and emits:
//!
//! - `report.csv` — schema `report-v1`, one row per (task, policy):
//!   `task, policy, success_mean_pct, success_std_pct, delta_success_pts,
//!   smooth_mean, smooth_ratio, smooth_reduction_pct`. Deltas and ratios
//!   are against the raw-flow reference rows. Fully deterministic.
//! - `report_latency.csv` — schema `report-latency-v1`, wall-clock planning
//!   latency per (task, policy) plus the ratio to the reference. Kept out
//!   of `report.csv` so that file is byte-stable across reruns.
//! - `success_by_task.csv` / `smoothness_by_task.csv` — plot-ready pivots,
//!   one row per task and one column per policy.

use std::fs;
use std::path::{Path, PathBuf};

use crate::config::PolicyKind;
use crate::error::{Error, Result};
use crate::metrics::LatencyStats;

use super::eval::{EvalRecord, EVAL_VERSION};

pub const REPORT_SCHEMA: &str = "report-v1";
pub const LATENCY_SCHEMA: &str = "report-latency-v1";

/// One line of the comparison table.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub task: String,
    pub policy: String,
    pub success_mean_pct: f64,
    pub success_std_pct: f64,
    pub delta_success_pts: f64,
    pub smooth_mean: f64,
    pub smooth_ratio: f64,
    pub smooth_reduction_pct: f64,
}

#[derive(Debug, Clone)]
pub struct Report {
    pub rows: Vec<ReportRow>,
    pub tasks: Vec<String>,
    pub policies: Vec<String>,
}

fn read_record(dir: &Path) -> Result<EvalRecord> {
    let path = dir.join("eval.json");
    let text = fs::read_to_string(&path).map_err(|e| {
        Error::InvalidArgument(format!("no evaluation record at {} ({e})", path.display()))
    })?;
    let record: EvalRecord = serde_json::from_str(&text)?;
    if record.version != EVAL_VERSION {
        return Err(Error::InvalidArgument(format!(
            "evaluation record {} has version {} (expected {EVAL_VERSION})",
            path.display(),
            record.version
        )));
    }
    Ok(record)
}

/// Build the comparison across evaluated runs and write the table plus the
/// plot pivots under `out_dir`.
pub fn cmd_report(run_dirs: &[PathBuf], out_dir: &Path) -> Result<Report> {
    if run_dirs.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "a comparison needs at least two evaluated runs, got {}",
            run_dirs.len()
        )));
    }
    let mut records = Vec::with_capacity(run_dirs.len());
    for dir in run_dirs {
        let record = read_record(dir)?;
        let latency: Option<LatencyStats> = fs::read_to_string(dir.join("latency.json"))
            .ok()
            .and_then(|t| serde_json::from_str(&t).ok());
        records.push((record, latency));
    }

    let mut policies: Vec<String> = records.iter().map(|(r, _)| r.policy.clone()).collect();
    policies.sort();
    policies.dedup();
    if policies.len() < 2 {
        return Err(Error::InvalidArgument(
            "all runs evaluate the same policy; nothing to compare".into(),
        ));
    }
    let reference = PolicyKind::RawFlow.name();
    if !policies.iter().any(|p| p == reference) {
        return Err(Error::InvalidArgument(format!(
            "deltas are defined against the {reference} policy, which none of the runs evaluate"
        )));
    }

    // Every policy must cover the identical task set, and no (task, policy)
    // pair may appear twice.
    let mut seen: Vec<(String, String)> = Vec::new();
    for (r, _) in &records {
        let key = (r.task.clone(), r.policy.clone());
        if seen.contains(&key) {
            return Err(Error::InvalidArgument(format!(
                "duplicate evaluation for task {} / policy {}",
                key.0, key.1
            )));
        }
        seen.push(key);
    }
    let mut tasks: Vec<String> = records
        .iter()
        .filter(|(r, _)| r.policy == reference)
        .map(|(r, _)| r.task.clone())
        .collect();
    tasks.sort();
    for p in &policies {
        let mut theirs: Vec<String> = records
            .iter()
            .filter(|(r, _)| &r.policy == p)
            .map(|(r, _)| r.task.clone())
            .collect();
        theirs.sort();
        if theirs != tasks {
            return Err(Error::InvalidArgument(format!(
                "mismatched task sets: policy {p} covers [{}] but {reference} covers [{}]",
                theirs.join(" "),
                tasks.join(" ")
            )));
        }
    }

    let find = |task: &str, policy: &str| {
        records
            .iter()
            .find(|(r, _)| r.task == task && r.policy == policy)
            .expect("coverage checked above")
    };

    let mut rows = Vec::new();
    for task in &tasks {
        let (base, _) = find(task, reference);
        for policy in &policies {
            let (r, _) = find(task, policy);
            rows.push(ReportRow {
                task: task.clone(),
                policy: policy.clone(),
                success_mean_pct: r.summary.mean_pct,
                success_std_pct: r.summary.std_pct,
                delta_success_pts: r.summary.mean_pct - base.summary.mean_pct,
                smooth_mean: r.smooth_mean,
                smooth_ratio: r.smooth_mean / base.smooth_mean,
                smooth_reduction_pct: 100.0 * (1.0 - r.smooth_mean / base.smooth_mean),
            });
        }
    }

    fs::create_dir_all(out_dir)?;
    let mut table = format!(
        "# schema: {REPORT_SCHEMA}; deltas vs reference policy: {reference}\n\
         task,policy,success_mean_pct,success_std_pct,delta_success_pts,smooth_mean,smooth_ratio,smooth_reduction_pct\n"
    );
    for r in &rows {
        table.push_str(&format!(
            "{},{},{:.4},{:.4},{:.4},{:.6e},{:.6e},{:.4}\n",
            r.task,
            r.policy,
            r.success_mean_pct,
            r.success_std_pct,
            r.delta_success_pts,
            r.smooth_mean,
            r.smooth_ratio,
            r.smooth_reduction_pct
        ));
    }
    fs::write(out_dir.join("report.csv"), &table)?;

    for (name, pick) in [
        ("success_by_task.csv", 0usize),
        ("smoothness_by_task.csv", 1usize),
    ] {
        let mut csv = String::from("task");
        for p in &policies {
            csv.push(',');
            csv.push_str(p);
        }
        csv.push('\n');
        for task in &tasks {
            csv.push_str(task);
            for p in &policies {
                let row = rows.iter().find(|r| &r.task == task && &r.policy == p).unwrap();
                let v = if pick == 0 { row.success_mean_pct } else { row.smooth_mean };
                csv.push_str(&format!(",{v:.6e}"));
            }
            csv.push('\n');
        }
        fs::write(out_dir.join(name), &csv)?;
    }

    // Wall-clock side table, only for runs that measured it.
    let with_latency: Vec<(&EvalRecord, &LatencyStats)> = records
        .iter()
        .filter_map(|(r, l)| l.as_ref().map(|l| (r, l)))
        .collect();
    if !with_latency.is_empty() {
        let mut csv = format!(
            "# schema: {LATENCY_SCHEMA}; planning latency only (no environment stepping)\n\
             task,policy,mean_ms,p50_ms,p95_ms,p50_ratio_vs_reference\n"
        );
        for task in &tasks {
            let base_p50 = with_latency
                .iter()
                .find(|(r, _)| &r.task == task && r.policy == reference)
                .map(|(_, l)| l.p50_ms);
            for policy in &policies {
                if let Some((_, l)) =
                    with_latency.iter().find(|(r, _)| &r.task == task && &r.policy == policy)
                {
                    let ratio = base_p50
                        .map(|b| format!("{:.4}", l.p50_ms / b))
                        .unwrap_or_default();
                    csv.push_str(&format!(
                        "{task},{policy},{:.4},{:.4},{:.4},{ratio}\n",
                        l.mean_ms, l.p50_ms, l.p95_ms
                    ));
                }
            }
        }
        fs::write(out_dir.join("report_latency.csv"), &csv)?;
    }

    Ok(Report { rows, tasks, policies })
}
