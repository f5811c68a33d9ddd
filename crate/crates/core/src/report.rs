//! Baseline / BIA / Oracle summary tables and the per-query timing table.
//!
//! Scores print to four decimals and changes to one, as `0.6972(1.6%)`.
//! Rounding is half-up at the printed digit, with a small nudge so that
//! values such as the mean of 0.7596 and 0.7499 print as 0.7548 rather than
//! falling to the binary representation just below the half.

use std::fmt::Write as _;
use std::io::Read;

use serde::{Deserialize, Serialize};

use crate::eval::percent_change;
use crate::sweep::{self, Config, SweepError, SweepResult};
use crate::vprf::{Feedback, VprfParams};

#[derive(Debug, Clone, PartialEq)]
pub struct MetricAggregate {
    pub metric: String,
    pub baseline: f64,
    pub bia: f64,
    pub bia_params: VprfParams,
    pub oracle: f64,
    pub oracle_winners: Vec<(String, Config, f64)>,
    /// Percent change over the baseline; `None` when the baseline is zero.
    pub bia_change: Option<f64>,
    pub oracle_change: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AggregateReport {
    pub model: String,
    pub metrics: Vec<MetricAggregate>,
}

/// BIA is chosen independently per metric.
pub fn aggregate(model: &str, results: &[SweepResult], metrics: &[String]) -> Result<AggregateReport, SweepError> {
    let mut out = Vec::with_capacity(metrics.len());
    for metric in metrics {
        let baseline = sweep::baseline_mean(results, metric)?;
        let (bia_params, bia) = sweep::best_in_average(results, metric)?;
        let oracle = sweep::oracle(results, metric)?;
        out.push(MetricAggregate {
            metric: metric.clone(),
            baseline,
            bia,
            bia_params,
            oracle: oracle.value,
            oracle_winners: oracle.winners,
            bia_change: percent_change(bia, baseline).ok(),
            oracle_change: percent_change(oracle.value, baseline).ok(),
        });
    }
    Ok(AggregateReport {
        model: model.to_owned(),
        metrics: out,
    })
}

fn round_display(x: f64, decimals: usize) -> String {
    let nudged = x + x.signum() * 1e-9;
    let s = format!("{nudged:.decimals$}");
    if s.starts_with('-') && s[1..].chars().all(|c| c == '0' || c == '.') {
        s[1..].to_owned()
    } else {
        s
    }
}

pub fn format_score(x: f64) -> String {
    round_display(x, 4)
}

pub fn format_percent(p: f64) -> String {
    format!("{}%", round_display(p, 1))
}

/// `value(change%)`, or the bare value when there is no change to show.
pub fn format_cell(value: f64, change: Option<f64>) -> String {
    match change {
        Some(p) => format!("{}({})", format_score(value), format_percent(p)),
        None => format_score(value),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Csv,
    Markdown,
}

pub fn emit_report(reports: &[AggregateReport], format: ReportFormat) -> String {
    match format {
        ReportFormat::Markdown => markdown(reports),
        ReportFormat::Csv => csv_text(reports),
    }
}

fn markdown(reports: &[AggregateReport]) -> String {
    let mut out = String::from("| Model | Metric | Baseline | BIA | Oracle | BIA config |\n");
    out.push_str("|---|---|---|---|---|---|\n");
    for report in reports {
        for m in &report.metrics {
            let cells = [
                (m.baseline, format_score(m.baseline)),
                (m.bia, format_cell(m.bia, m.bia_change)),
                (m.oracle, format_cell(m.oracle, m.oracle_change)),
            ];
            let best = cells.iter().map(|c| c.0).fold(f64::NEG_INFINITY, f64::max);
            let rendered: Vec<String> = cells
                .into_iter()
                .map(|(v, s)| if v == best { format!("**{s}**") } else { s })
                .collect();
            writeln!(
                out,
                "| {} | {} | {} | {} | {} | {} |",
                report.model,
                m.metric,
                rendered[0],
                rendered[1],
                rendered[2],
                m.bia_params
            )
            .unwrap();
        }
    }
    out
}

/// One row of the aggregate CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub model: String,
    pub metric: String,
    pub baseline: f64,
    pub bia: f64,
    pub bia_change: Option<f64>,
    pub oracle: f64,
    pub oracle_change: Option<f64>,
    pub bia_method: String,
    pub bia_kappa: usize,
    pub bia_alpha: Option<f64>,
    pub bia_beta: Option<f64>,
}

impl AggregateRow {
    pub fn from_aggregate(model: &str, m: &MetricAggregate) -> Self {
        let (alpha, beta) = match m.bia_params.feedback {
            Feedback::Average => (None, None),
            Feedback::Rocchio { alpha, beta } => (Some(alpha), Some(beta)),
        };
        Self {
            model: model.to_owned(),
            metric: m.metric.clone(),
            baseline: m.baseline,
            bia: m.bia,
            bia_change: m.bia_change,
            oracle: m.oracle,
            oracle_change: m.oracle_change,
            bia_method: m.bia_params.method().to_string(),
            bia_kappa: m.bia_params.kappa,
            bia_alpha: alpha,
            bia_beta: beta,
        }
    }
}

pub fn aggregate_rows(reports: &[AggregateReport]) -> Vec<AggregateRow> {
    reports
        .iter()
        .flat_map(|r| r.metrics.iter().map(|m| AggregateRow::from_aggregate(&r.model, m)))
        .collect()
}

fn csv_text(reports: &[AggregateReport]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    for row in aggregate_rows(reports) {
        w.serialize(row).expect("in-memory csv write");
    }
    String::from_utf8(w.into_inner().expect("in-memory csv flush")).expect("csv output is utf-8")
}

pub fn parse_aggregate_csv<R: Read>(reader: R) -> Result<Vec<AggregateRow>, SweepError> {
    let mut rdr = csv::Reader::from_reader(reader);
    Ok(rdr.deserialize().collect::<Result<_, _>>()?)
}

/// Per-query seconds for one model column of the timing table.
#[derive(Debug, Clone, PartialEq)]
pub struct TimingColumn {
    pub model: String,
    pub baseline_s: f64,
    pub average_s: f64,
    pub rocchio_s: f64,
}

/// Rows Baseline / VPRF-Average / VPRF-Rocchio, one column per model.
pub fn emit_timing_table(columns: &[TimingColumn]) -> String {
    let mut out = String::from("| Models |");
    for c in columns {
        write!(out, " {} |", c.model).unwrap();
    }
    out.push_str("\n|---|");
    out.push_str(&"---|".repeat(columns.len()));
    out.push('\n');
    let rows: [(&str, fn(&TimingColumn) -> f64); 3] = [
        ("Baseline", |c| c.baseline_s),
        ("VPRF-Average", |c| c.average_s),
        ("VPRF-Rocchio", |c| c.rocchio_s),
    ];
    for (label, get) in rows {
        write!(out, "| {label} |").unwrap();
        for c in columns {
            write!(out, " {:.4}s |", get(c)).unwrap();
        }
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn agg(baseline: f64, bia: f64, oracle: f64) -> MetricAggregate {
        MetricAggregate {
            metric: "recall@100".into(),
            baseline,
            bia,
            bia_params: VprfParams::rocchio(3, 1.0, 0.5),
            oracle,
            oracle_winners: vec![],
            bia_change: percent_change(bia, baseline).ok(),
            oracle_change: percent_change(oracle, baseline).ok(),
        }
    }

    #[test]
    fn cell_text() {
        assert_eq!(format_cell(0.6972, percent_change(0.6972, 0.6859).ok()), "0.6972(1.6%)");
        assert_eq!(format_cell(0.5226, percent_change(0.5226, 0.5247).ok()), "0.5226(-0.4%)");
        assert_eq!(format_cell(0.42, Some(0.0)), "0.4200(0.0%)");
        assert_eq!(format_cell(0.42, None), "0.4200");
        assert_eq!(format_percent(-0.01), "0.0%");
    }

    #[test]
    fn half_values_round_up() {
        assert_eq!(format_score((0.7596 + 0.7499) / 2.0), "0.7548");
        assert_eq!(format_score((0.4947 + 0.5314) / 2.0), "0.5131");
    }

    #[test]
    fn single_metric_single_model_is_one_row() {
        let report = AggregateReport {
            model: "RepLLaMa".into(),
            metrics: vec![agg(0.6859, 0.6972, 0.7022)],
        };
        let md = emit_report(&[report.clone()], ReportFormat::Markdown);
        let lines: Vec<&str> = md.lines().collect();
        assert_eq!(lines.len(), 3);
        assert_eq!(
            lines[2],
            "| RepLLaMa | recall@100 | 0.6859 | 0.6972(1.6%) | **0.7022(2.4%)** | rocchio(k=3, a=1, b=0.5) |"
        );
        assert_eq!(md, emit_report(&[report], ReportFormat::Markdown));
    }

    #[test]
    fn csv_parses_back() {
        let reports = vec![
            AggregateReport {
                model: "m1".into(),
                metrics: vec![agg(0.1 + 0.2, 0.31, 0.33), agg(0.0, 0.1, 0.2)],
            },
            AggregateReport {
                model: "m,2".into(),
                metrics: vec![MetricAggregate {
                    bia_params: VprfParams::average(5),
                    ..agg(0.5, 0.4, 0.6)
                }],
            },
        ];
        let text = emit_report(&reports, ReportFormat::Csv);
        assert!(text.starts_with(
            "model,metric,baseline,bia,bia_change,oracle,oracle_change,bia_method,bia_kappa,bia_alpha,bia_beta\n"
        ));
        let rows = parse_aggregate_csv(text.as_bytes()).unwrap();
        assert_eq!(rows, aggregate_rows(&reports));
        assert_eq!(rows[1].bia_change, None);
        assert_eq!(rows[2].bia_method, "average");
    }

    #[test]
    fn timing_table_layout() {
        let t = emit_timing_table(&[
            TimingColumn {
                model: "A".into(),
                baseline_s: 0.0061,
                average_s: 0.0046,
                rocchio_s: 0.0054,
            },
            TimingColumn {
                model: "B".into(),
                baseline_s: 0.006,
                average_s: 0.0046,
                rocchio_s: 0.0052,
            },
        ]);
        assert_eq!(
            t,
            "| Models | A | B |\n|---|---|---|\n| Baseline | 0.0061s | 0.0060s |\n\
             | VPRF-Average | 0.0046s | 0.0046s |\n| VPRF-Rocchio | 0.0054s | 0.0052s |\n"
        );
    }
}
