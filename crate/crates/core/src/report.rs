//! Human- and machine-readable output: model comparison tables, metric
//! reports, and threshold-sweep curves.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use thiserror::Error;

use crate::dataset::DatasetStats;
use crate::fusion::CurvePoint;
use crate::metrics::{LevelMetrics, MetricsReport};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ReportError {
    #[error("comparison table has no rows")]
    Empty,
    #[error("duplicate row name `{0}`")]
    DuplicateName(String),
    #[error("score {value} for `{name}` outside [0, 1]")]
    ScoreOutOfRange { name: String, value: f64 },
    #[error("curve line {line}: {message}")]
    CurveSyntax { line: usize, message: String },
}

/// One model's F1 on up to two test sets.
#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonRow {
    pub name: String,
    pub f1_test1: f64,
    pub f1_test2: Option<f64>,
}

impl ComparisonRow {
    pub fn new(name: impl Into<String>, f1_test1: f64, f1_test2: Option<f64>) -> Self {
        Self {
            name: name.into(),
            f1_test1,
            f1_test2,
        }
    }
}

/// Aligned plain-text table, four decimals per score, `-` for a missing
/// second score.
///
/// ```
/// use rddeval::report::{render_table, ComparisonRow};
///
/// let t = render_table(&[ComparisonRow::new("A", 1.0, None)]).unwrap();
/// assert!(t.contains("1.0000"));
/// assert!(t.ends_with('\n'));
/// ```
pub fn render_table(rows: &[ComparisonRow]) -> Result<String, ReportError> {
    if rows.is_empty() {
        return Err(ReportError::Empty);
    }
    let mut names = BTreeSet::new();
    for r in rows {
        if !names.insert(r.name.as_str()) {
            return Err(ReportError::DuplicateName(r.name.clone()));
        }
        for v in std::iter::once(r.f1_test1).chain(r.f1_test2) {
            if !(0.0..=1.0).contains(&v) {
                return Err(ReportError::ScoreOutOfRange {
                    name: r.name.clone(),
                    value: v,
                });
            }
        }
    }

    let header = ["Model", "F1 (test 1)", "F1 (test 2)"];
    let cells: Vec<[String; 3]> = rows
        .iter()
        .map(|r| {
            [
                r.name.clone(),
                format!("{:.4}", r.f1_test1),
                r.f1_test2
                    .map_or_else(|| "-".to_string(), |v| format!("{v:.4}")),
            ]
        })
        .collect();
    let mut widths = header.map(str::len);
    for row in &cells {
        for (w, c) in widths.iter_mut().zip(row) {
            *w = (*w).max(c.chars().count());
        }
    }

    let mut out = String::new();
    let line = |out: &mut String, c: [&str; 3]| {
        let _ = writeln!(
            out,
            "{:<w0$} | {:<w1$} | {:<w2$}",
            c[0],
            c[1],
            c[2],
            w0 = widths[0],
            w1 = widths[1],
            w2 = widths[2]
        );
        // keep lines free of trailing blanks
        let trimmed = out.trim_end_matches([' ', '\n']).len();
        out.truncate(trimmed);
        out.push('\n');
    };
    line(&mut out, header);
    let _ = writeln!(
        out,
        "{}-+-{}-+-{}",
        "-".repeat(widths[0]),
        "-".repeat(widths[1]),
        "-".repeat(widths[2])
    );
    for row in &cells {
        line(&mut out, [&row[0], &row[1], &row[2]]);
    }
    Ok(out)
}

/// CSV with header `threshold,precision,recall,f1`; numbers in shortest
/// round-trip form.
pub fn emit_curve(curve: &[CurvePoint]) -> String {
    let mut out = String::from("threshold,precision,recall,f1\n");
    for p in curve {
        let _ = writeln!(out, "{},{},{},{}", p.threshold, p.precision, p.recall, p.f1);
    }
    out
}

/// Inverse of [`emit_curve`].
pub fn parse_curve(csv: &str) -> Result<Vec<CurvePoint>, ReportError> {
    let mut lines = csv.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim() == "threshold,precision,recall,f1" => {}
        _ => {
            return Err(ReportError::CurveSyntax {
                line: 1,
                message: "missing header".into(),
            })
        }
    }
    let mut points = Vec::new();
    for (idx, raw) in lines {
        let raw = raw.trim();
        if raw.is_empty() {
            continue;
        }
        let vals: Vec<f64> = raw
            .split(',')
            .map(|v| v.trim().parse::<f64>())
            .collect::<Result<_, _>>()
            .map_err(|e| ReportError::CurveSyntax {
                line: idx + 1,
                message: e.to_string(),
            })?;
        let [threshold, precision, recall, f1] = vals[..] else {
            return Err(ReportError::CurveSyntax {
                line: idx + 1,
                message: format!("expected 4 fields, found {}", vals.len()),
            });
        };
        points.push(CurvePoint {
            threshold,
            precision,
            recall,
            f1,
        });
    }
    Ok(points)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Sections {
    pub per_class: bool,
    pub per_country: bool,
}

fn breakdown_table<K: std::fmt::Display>(
    out: &mut String,
    title: &str,
    rows: impl Iterator<Item = (K, LevelMetrics)>,
) {
    let _ = writeln!(out);
    let _ = writeln!(
        out,
        "{:<9} {:>6} {:>6} {:>6} {:>9} {:>6} {:>6}",
        title, "tp", "fp", "fn", "precision", "recall", "f1"
    );
    for (k, m) in rows {
        let _ = writeln!(
            out,
            "{:<9} {:>6} {:>6} {:>6} {:>9.4} {:>6.4} {:>6.4}",
            k.to_string(),
            m.counts.tp,
            m.counts.fp,
            m.counts.fn_,
            m.scores.precision,
            m.scores.recall,
            m.scores.f1
        );
    }
}

/// Line-oriented text report. The headline block is always present; the
/// class and country tables are opt-in.
///
/// ```text
/// tp 4
/// fp 3
/// fn 2
/// precision 0.5714
/// recall 0.6667
/// f1 0.6154
/// ```
pub fn render_metrics(report: &MetricsReport, sections: Sections) -> String {
    let c = report.overall.counts;
    let s = report.overall.scores;
    let mut out = String::new();
    let _ = writeln!(out, "tp {}", c.tp);
    let _ = writeln!(out, "fp {}", c.fp);
    let _ = writeln!(out, "fn {}", c.fn_);
    let _ = writeln!(out, "precision {:.4}", s.precision);
    let _ = writeln!(out, "recall {:.4}", s.recall);
    let _ = writeln!(out, "f1 {:.4}", s.f1);
    if sections.per_class {
        breakdown_table(
            &mut out,
            "class",
            report.per_class.iter().map(|(k, v)| (k, *v)),
        );
    }
    if sections.per_country {
        breakdown_table(
            &mut out,
            "country",
            report.per_country.iter().map(|(k, v)| (k, *v)),
        );
    }
    out
}

fn kv_block(out: &mut String, prefix: &str, m: &LevelMetrics) {
    let _ = writeln!(out, "{prefix}tp={}", m.counts.tp);
    let _ = writeln!(out, "{prefix}fp={}", m.counts.fp);
    let _ = writeln!(out, "{prefix}fn={}", m.counts.fn_);
    let _ = writeln!(out, "{prefix}precision={}", m.scores.precision);
    let _ = writeln!(out, "{prefix}recall={}", m.scores.recall);
    let _ = writeln!(out, "{prefix}f1={}", m.scores.f1);
}

/// `key=value` document at full precision. Keys are `tp`, `fp`, `fn`,
/// `precision`, `recall`, `f1`, then the same six under `class.<code>.`
/// and `country.<name>.`.
pub fn metrics_key_values(report: &MetricsReport) -> String {
    let mut out = String::new();
    kv_block(&mut out, "", &report.overall);
    for (class, m) in &report.per_class {
        kv_block(&mut out, &format!("class.{class}."), m);
    }
    for (country, m) in &report.per_country {
        kv_block(&mut out, &format!("country.{country}."), m);
    }
    out
}

pub fn render_stats(stats: &DatasetStats) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "images {}", stats.total_images);
    for (country, n) in &stats.images_per_country {
        let _ = writeln!(out, "  {:<8} {}", country.to_string(), n);
    }
    let _ = writeln!(out, "boxes {}", stats.total_boxes);
    for (class, n) in &stats.boxes_per_class {
        let _ = writeln!(out, "  {:<8} {}", class.to_string(), n);
    }
    out
}
