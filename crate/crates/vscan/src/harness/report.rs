//! Result emission: the fixed CSV schemas and the human-readable
//! comparison report.
//!
//! `metrics.csv` columns: `experiment,variant,fold,metric,value`.
//! `pvalues.csv` columns: `experiment,metric,variant_a,variant_b,p_value`.
//! `sweep.csv`  columns: `experiment,series,ratio,gmean`.
//! Undefined values are written as `NA`. Floats use shortest-round-trip
//! formatting, so identical runs produce byte-identical files.

use std::path::Path;

use super::{ExperimentResult, HarnessError, MetricRow, PairwiseP, METRIC_NAMES};
use crate::harness::sweep::SweepRow;

fn fmt_opt(v: Option<f64>) -> String {
    match v {
        Some(x) if x.is_finite() => format!("{x}"),
        Some(x) if x.is_infinite() && x > 0.0 => "inf".to_string(),
        Some(x) if x.is_infinite() => "-inf".to_string(),
        _ => "NA".to_string(),
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> HarnessError + '_ {
    move |source| {
        HarnessError::Volume(crate::volume::VolumeError::Io {
            path: path.display().to_string(),
            source,
        })
    }
}

pub fn metrics_csv_string(experiment: &str, rows: &[MetricRow]) -> String {
    let mut out = String::from("experiment,variant,fold,metric,value\n");
    for row in rows {
        for metric in METRIC_NAMES {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                experiment,
                row.entry,
                row.fold,
                metric,
                fmt_opt(row.get(metric))
            ));
        }
    }
    out
}

pub fn write_metrics_csv(
    experiment: &str,
    rows: &[MetricRow],
    path: &Path,
) -> Result<(), HarnessError> {
    std::fs::write(path, metrics_csv_string(experiment, rows)).map_err(io_err(path))
}

pub fn pvalues_csv_string(experiment: &str, pvalues: &[PairwiseP]) -> String {
    let mut out = String::from("experiment,metric,variant_a,variant_b,p_value\n");
    for p in pvalues {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            experiment,
            p.metric,
            p.a,
            p.b,
            fmt_opt(p.p_one_sided)
        ));
    }
    out
}

pub fn write_pvalues_csv(
    experiment: &str,
    pvalues: &[PairwiseP],
    path: &Path,
) -> Result<(), HarnessError> {
    std::fs::write(path, pvalues_csv_string(experiment, pvalues)).map_err(io_err(path))
}

pub fn sweep_csv_string(experiment: &str, rows: &[SweepRow]) -> String {
    let mut out = String::from("experiment,series,ratio,gmean\n");
    for r in rows {
        let ratio = r
            .ratio
            .map(|v| v.to_string())
            .unwrap_or_default();
        out.push_str(&format!(
            "{},{},{},{}\n",
            experiment,
            r.series,
            ratio,
            fmt_opt(Some(r.gmean))
        ));
    }
    out
}

pub fn write_sweep_csv(
    experiment: &str,
    rows: &[SweepRow],
    path: &Path,
) -> Result<(), HarnessError> {
    std::fs::write(path, sweep_csv_string(experiment, rows)).map_err(io_err(path))
}

/// Minimal CSV reader for the files this module writes (no quoting).
pub fn read_csv(path: &Path) -> Result<Vec<Vec<String>>, HarnessError> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    Ok(text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| l.split(',').map(|s| s.to_string()).collect())
        .collect())
}

/// Render the comparison as a mean ± sd table plus pairwise significance
/// lines. When both an intermediate-fusion entry and a late-fusion entry
/// are present, a fusion-ordering check line (mean GMean of the former
/// must not fall below the latter) is appended.
pub fn comparison_report(result: &ExperimentResult) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "comparison over {} folds, {:.1}s wall clock\n\n",
        result.folds.len(),
        result.wall_clock_secs
    ));
    out.push_str(&format!("{:<18}", "entry"));
    for metric in METRIC_NAMES {
        out.push_str(&format!("{metric:>22}"));
    }
    out.push('\n');
    for entry in &result.entries {
        out.push_str(&format!("{:<18}", entry.name));
        for metric in METRIC_NAMES {
            match super::mean_sd(&result.rows, &entry.name, metric) {
                Some((m, s)) => out.push_str(&format!("{:>22}", format!("{m:.3} ± {s:.3}"))),
                None => out.push_str(&format!("{:>22}", "NA")),
            }
        }
        out.push('\n');
    }
    out.push('\n');
    for p in &result.pvalues {
        out.push_str(&format!(
            "p[{} > {}] on {}: {}\n",
            p.a,
            p.b,
            p.metric,
            fmt_opt(p.p_one_sided)
        ));
    }

    let find_variant = |v: super::Variant| {
        result
            .entries
            .iter()
            .find(|e| e.variant == v)
            .map(|e| e.name.clone())
    };
    if let (Some(mint_name), Some(late_name)) = (
        find_variant(super::Variant::Mint),
        find_variant(super::Variant::Late),
    ) {
        let mg = super::mean_sd(&result.rows, &mint_name, "gmean").map(|(m, _)| m);
        let lg = super::mean_sd(&result.rows, &late_name, "gmean").map(|(m, _)| m);
        if let (Some(mg), Some(lg)) = (mg, lg) {
            let verdict = if mg >= lg { "PASS" } else { "FAIL" };
            out.push_str(&format!(
                "\nfusion ordering check: mean GMean {mint_name} ({mg:.3}) >= {late_name} ({lg:.3}): {verdict}\n"
            ));
        }
    }
    out
}
