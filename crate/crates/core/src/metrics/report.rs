//! Report renderers: fixed-width text table, JSON, and CSV series for
//! error-over-time and per-question plots.

use super::{MetricsReport, MetricsRow};
use crate::Value;

const COLUMNS: [&str; 7] = [
    "dEps(s-c)",
    "Bias(avg)",
    "dEps(soc)",
    "Bias(soc)",
    "dEps(ctl)",
    "Bias(ctl)",
    "Extreme%",
];

fn fmt_cell(value: Option<Value>) -> String {
    match value {
        Some(v) => format!("{v:.2}"),
        None => "n/a".to_string(),
    }
}

fn row_cells(row: &MetricsRow, extreme_pct: Value) -> [String; 7] {
    [
        fmt_cell(row.delta_eps_s_minus_c),
        fmt_cell(row.bias_avg),
        fmt_cell(row.delta_eps_social),
        fmt_cell(row.bias_social),
        fmt_cell(row.delta_eps_control),
        fmt_cell(row.bias_control),
        fmt_cell(Some(extreme_pct)),
    ]
}

/// Fixed-width table: one overall row plus one row per question. Columns
/// follow the combined-effect-first ordering used for headline results.
pub fn render_text_table(report: &MetricsReport) -> String {
    let mut out = String::new();
    out.push_str(&format!("{:<8}", ""));
    for column in COLUMNS {
        out.push_str(&format!("{column:>11}"));
    }
    out.push('\n');

    let mut push_row = |label: &str, cells: [String; 7]| {
        out.push_str(&format!("{label:<8}"));
        for cell in cells {
            out.push_str(&format!("{cell:>11}"));
        }
        out.push('\n');
    };
    push_row("overall", row_cells(&report.row, report.extreme_pct));
    for q in &report.per_question {
        push_row(&format!("q{}", q.question), row_cells(&q.row, q.extreme_pct));
    }
    out
}

/// Machine-readable report; field order is fixed by the report type.
pub fn to_json(report: &MetricsReport) -> String {
    let mut text = serde_json::to_string_pretty(report).expect("report serializes");
    text.push('\n');
    text
}

/// Error-over-time series: `condition,round,avg_error`, one row per point.
pub fn per_round_csv(report: &MetricsReport) -> String {
    let mut writer = csv::Writer::from_writer(Vec::new());
    writer
        .write_record(["condition", "round", "avg_error"])
        .expect("write to vec");
    for point in &report.per_round_error {
        writer
            .write_record([
                point.condition.to_string(),
                point.round.to_string(),
                point.error.to_string(),
            ])
            .expect("write to vec");
    }
    String::from_utf8(writer.into_inner().expect("no io error on vec")).expect("csv is utf-8")
}

/// Per-question headline metrics, one row per question. Undefined fields are
/// left empty.
pub fn per_question_csv(report: &MetricsReport) -> String {
    let mut writer = csv::Writer::from_writer(Vec::new());
    writer
        .write_record([
            "question",
            "delta_eps_social",
            "delta_eps_control",
            "delta_eps_s_minus_c",
            "bias_social",
            "bias_control",
            "bias_avg",
            "extreme_pct",
        ])
        .expect("write to vec");
    let opt = |v: Option<Value>| v.map(|x| x.to_string()).unwrap_or_default();
    for q in &report.per_question {
        writer
            .write_record([
                q.question.to_string(),
                opt(q.row.delta_eps_social),
                opt(q.row.delta_eps_control),
                opt(q.row.delta_eps_s_minus_c),
                opt(q.row.bias_social),
                opt(q.row.bias_control),
                opt(q.row.bias_avg),
                q.extreme_pct.to_string(),
            ])
            .expect("write to vec");
    }
    String::from_utf8(writer.into_inner().expect("no io error on vec")).expect("csv is utf-8")
}
