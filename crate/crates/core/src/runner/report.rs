use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::RunnerError;
use crate::metrics::{fmt_num, MeanSd, MetricsReport, CSV_HEADER};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ReportLayout {
    Csv,
    MarkdownTable,
    HistogramData,
}

impl std::str::FromStr for ReportLayout {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "csv" => Ok(Self::Csv),
            "markdown" | "markdown-table" => Ok(Self::MarkdownTable),
            "histogram" | "histogram-data" => Ok(Self::HistogramData),
            other => Err(format!("unknown layout `{other}` (expected csv, markdown or histogram)")),
        }
    }
}

fn mean_sd(m: Option<MeanSd>) -> String {
    match m {
        Some(m) => format!("{:.3} ± {:.3}", m.mean, m.sd),
        None => "NA".into(),
    }
}

/// Renders reports in one layout. Output depends only on the reports.
pub fn render_report(reports: &[MetricsReport], layout: ReportLayout) -> String {
    let mut out = String::new();
    match layout {
        ReportLayout::Csv => {
            let _ = writeln!(out, "{CSV_HEADER}");
            for r in reports {
                let _ = writeln!(out, "{}", r.csv_row());
            }
        }
        ReportLayout::MarkdownTable => {
            out.push_str("| Arm | Dataset | Format | Strategy | ρ | τ | RMSE | FR |\n");
            out.push_str("|---|---|---|---|---|---|---|---|\n");
            for r in reports {
                let l = &r.labels;
                let _ = writeln!(
                    out,
                    "| {} | {} | {} | {} | {} | {} | {} | {:.3} |",
                    l.arm,
                    l.dataset,
                    l.format,
                    l.strategy,
                    mean_sd(r.rho),
                    mean_sd(r.tau),
                    mean_sd(r.rmse),
                    r.failure_rate
                );
            }
        }
        ReportLayout::HistogramData => {
            out.push_str("arm,rating,count\n");
            for r in reports {
                for (rating, count) in &r.prediction_histogram {
                    let _ = writeln!(out, "{},{rating},{count}", r.labels.arm);
                }
            }
        }
    }
    out
}

/// Writes `render_report` output to `path`.
pub fn emit_report(reports: &[MetricsReport], layout: ReportLayout, path: &Path) -> Result<(), RunnerError> {
    if reports.is_empty() {
        return Err(RunnerError::Usage("no reports to emit".into()));
    }
    std::fs::write(path, render_report(reports, layout)).map_err(|e| RunnerError::io(path, e))
}

/// Full per-arm markdown report: summary table, per-run values and notes.
pub fn arm_markdown(report: &MetricsReport, notes: &[String]) -> String {
    let mut out = format!("# {}\n\n", report.labels.arm);
    out.push_str(&render_report(std::slice::from_ref(report), ReportLayout::MarkdownTable));
    out.push_str("\n| Run | ρ | τ | RMSE | Evaluated | Failures |\n|---|---|---|---|---|---|\n");
    for r in &report.per_run {
        let _ = writeln!(
            out,
            "| {} | {} | {} | {} | {} | {} |",
            r.run_index,
            fmt_num(r.rho),
            fmt_num(r.tau),
            fmt_num(r.rmse),
            r.n_evaluated,
            r.n_failures
        );
    }
    let e = &report.extrapolation;
    let _ = write!(
        out,
        "\nExtrapolation: precision {}, recall {} ({} predicted, {} true).\n\
         Average per-instance prediction sd: {}.\n",
        fmt_num(e.precision),
        fmt_num(e.recall),
        e.n_pred_extrapolated,
        e.n_truth_extrapolated,
        fmt_num(report.avg_prediction_stddev),
    );
    if report.n_infra_failures > 0 {
        let _ = writeln!(out, "Infrastructure failures excluded: {}.", report.n_infra_failures);
    }
    if !report.undefined_runs.is_empty() {
        let runs: Vec<String> = report.undefined_runs.iter().map(u32::to_string).collect();
        let _ = writeln!(out, "Runs with undefined correlations: {}.", runs.join(", "));
    }
    for note in notes {
        let _ = writeln!(out, "\nNote: {note}");
    }
    out
}
