//! Evaluation records and the aggregate report files built from them.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use ctmoco_core::metrics::{CaseMetrics, EvalReport, Quantiles};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result, StageExt};
use crate::io;

/// Metrics of one reconstruction, tagged with what it is (`init`, `final`, ...).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalRecord {
    pub label: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub case: Option<usize>,
    pub metrics: CaseMetrics,
}

pub const METRIC_NAMES: [&str; 6] = ["rmse", "ssim", "rpe_mm", "mae_tx_mm", "mae_ty_mm", "mae_r_deg"];

fn fields(m: &CaseMetrics) -> [f64; 6] {
    [m.rmse, m.ssim, m.rpe_mm, m.mae_tx_mm, m.mae_ty_mm, m.mae_r_deg]
}

/// Per-label reports, labels in sorted order.
pub fn aggregate(records: &[EvalRecord]) -> Result<BTreeMap<String, EvalReport>> {
    let mut groups: BTreeMap<String, Vec<CaseMetrics>> = BTreeMap::new();
    for r in records {
        groups.entry(r.label.clone()).or_default().push(r.metrics);
    }
    groups
        .into_iter()
        .map(|(label, cases)| Ok((label, EvalReport::new(cases).stage("report")?)))
        .collect()
}

/// One row per label: case count and metric means.
pub fn summary_csv(reports: &BTreeMap<String, EvalReport>) -> String {
    let mut out = format!("label,cases,{}\n", METRIC_NAMES.join(","));
    for (label, rep) in reports {
        let _ = write!(out, "{label},{}", rep.cases.len());
        for v in fields(&rep.mean) {
            let _ = write!(out, ",{v}");
        }
        out.push('\n');
    }
    out
}

/// `label → metric → box-plot quantiles`.
pub fn quantiles(reports: &BTreeMap<String, EvalReport>) -> BTreeMap<String, BTreeMap<&'static str, Quantiles>> {
    reports
        .iter()
        .map(|(label, r)| {
            let q = [
                r.rmse_quantiles,
                r.ssim_quantiles,
                r.rpe_quantiles,
                r.mae_tx_quantiles,
                r.mae_ty_quantiles,
                r.mae_r_quantiles,
            ];
            (label.clone(), METRIC_NAMES.into_iter().zip(q).collect())
        })
        .collect()
}

/// Writes `report.json`, `summary.csv` and `quantiles.json` into `dir`.
pub fn write_reports(records: &[EvalRecord], dir: &Path) -> Result<BTreeMap<String, EvalReport>> {
    if records.is_empty() {
        return Err(Error::Config("no evaluation records to report".into()));
    }
    let reports = aggregate(records)?;
    io::write_json(&dir.join("report.json"), &reports)?;
    io::write_bytes(&dir.join("summary.csv"), summary_csv(&reports).as_bytes())?;
    io::write_json(&dir.join("quantiles.json"), &quantiles(&reports))?;
    Ok(reports)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn metrics(v: f64) -> CaseMetrics {
        CaseMetrics {
            rmse: v,
            ssim: 1.0 - v,
            rpe_mm: 2.0 * v,
            mae_tx_mm: v,
            mae_ty_mm: v,
            mae_r_deg: v,
        }
    }

    #[test]
    fn groups_by_label() {
        let records: Vec<EvalRecord> = [("init", 0.4), ("final", 0.1), ("init", 0.2), ("final", 0.3)]
            .iter()
            .enumerate()
            .map(|(i, &(l, v))| EvalRecord {
                label: l.into(),
                case: Some(i / 2),
                metrics: metrics(v),
            })
            .collect();
        let reports = aggregate(&records).unwrap();
        assert_eq!(reports.keys().collect::<Vec<_>>(), ["final", "init"]);
        assert!((reports["init"].mean.rmse - 0.3).abs() < 1e-15);
        let csv = summary_csv(&reports);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "label,cases,rmse,ssim,rpe_mm,mae_tx_mm,mae_ty_mm,mae_r_deg");
        assert!(lines[2].starts_with("init,2,0.3"));
        assert_eq!(quantiles(&reports)["final"]["rpe_mm"].max, 0.6);
    }
}
