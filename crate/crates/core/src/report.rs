//! Comparison tables, overlap counts and their serialized forms.
//!
//! CSV schemas (all files UTF-8, LF line endings, header row first):
//!
//! | table            | columns                                                        |
//! |------------------|----------------------------------------------------------------|
//! | version table    | `component,version,count`                                      |
//! | comparison       | `t,crashes_a,crashes_b,edges_a,edges_b,execs_a,execs_b`        |
//! | overlap          | `label_a,label_b,only_a,only_b,common`                         |
//!
//! The gnuplot form is the same table with whitespace-separated columns and
//! the header behind a `#`.

use std::collections::{BTreeSet, HashSet};
use std::fmt;
use std::hash::Hash;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::fuzzing::FuzzStatsSample;

#[derive(Debug, thiserror::Error)]
pub enum ReportError {
    #[error("unsupported output format {0:?} (expected csv, json or gnuplot)")]
    UnsupportedFormat(String),
    #[error("cannot compare series for different targets or applets: {0} vs {1}")]
    Mismatch(String, String),
    #[error("serialization failed: {0}")]
    Serialize(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Format {
    Csv,
    Json,
    Gnuplot,
}

impl FromStr for Format {
    type Err = ReportError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "csv" => Ok(Format::Csv),
            "json" => Ok(Format::Json),
            "gnuplot" | "dat" => Ok(Format::Gnuplot),
            _ => Err(ReportError::UnsupportedFormat(s.to_string())),
        }
    }
}

/// A value that can be laid out as a header plus rows of cells.
pub trait Tabular {
    fn header(&self) -> Vec<String>;
    fn rows(&self) -> Vec<Vec<String>>;
}

/// Renders `value` in the requested format. Output is deterministic.
pub fn emit<T: Tabular + Serialize>(value: &T, format: Format) -> Result<Vec<u8>, ReportError> {
    let mut out = String::new();
    match format {
        Format::Csv => {
            push_csv_line(&mut out, &value.header());
            for row in value.rows() {
                push_csv_line(&mut out, &row);
            }
        }
        Format::Gnuplot => {
            out.push_str("# ");
            out.push_str(&value.header().join(" "));
            out.push('\n');
            for row in value.rows() {
                let cells: Vec<String> = row.iter().map(|c| gnuplot_cell(c)).collect();
                out.push_str(&cells.join(" "));
                out.push('\n');
            }
        }
        Format::Json => {
            out = serde_json::to_string_pretty(value)?;
            out.push('\n');
        }
    }
    Ok(out.into_bytes())
}

fn push_csv_line(out: &mut String, cells: &[String]) {
    let line: Vec<String> = cells
        .iter()
        .map(|c| {
            if c.contains([',', '"', '\n', '\r']) {
                format!("\"{}\"", c.replace('"', "\"\""))
            } else {
                c.clone()
            }
        })
        .collect();
    out.push_str(&line.join(","));
    out.push('\n');
}

fn gnuplot_cell(c: &str) -> String {
    if c.is_empty() || c.contains(char::is_whitespace) {
        format!("\"{c}\"")
    } else {
        c.to_string()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Condition {
    WithLlm,
    WithoutLlm,
}

impl fmt::Display for Condition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Condition::WithLlm => "with-LLM",
            Condition::WithoutLlm => "without-LLM",
        })
    }
}

/// Stats time series of one campaign under one seeding condition.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConditionSeries {
    pub condition: Condition,
    pub target: String,
    pub applet: String,
    pub series: Vec<FuzzStatsSample>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub t: u64,
    pub crashes_a: u64,
    pub crashes_b: u64,
    pub edges_a: u64,
    pub edges_b: u64,
    pub execs_a: u64,
    pub execs_b: u64,
}

impl ComparisonRow {
    fn swapped(&self) -> Self {
        ComparisonRow {
            t: self.t,
            crashes_a: self.crashes_b,
            crashes_b: self.crashes_a,
            edges_a: self.edges_b,
            edges_b: self.edges_a,
            execs_a: self.execs_b,
            execs_b: self.execs_a,
        }
    }

    /// `b - a` for crashes, edges and execs.
    pub fn deltas(&self) -> (i64, i64, i64) {
        let d = |a: u64, b: u64| b as i64 - a as i64;
        (
            d(self.crashes_a, self.crashes_b),
            d(self.edges_a, self.edges_b),
            d(self.execs_a, self.execs_b),
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ComparisonTable {
    pub target: String,
    pub applet: String,
    pub label_a: String,
    pub label_b: String,
    pub rows: Vec<ComparisonRow>,
    /// Final values of both series.
    pub summary: ComparisonRow,
}

impl ComparisonTable {
    /// The same comparison with the two sides exchanged.
    pub fn swapped(&self) -> Self {
        ComparisonTable {
            target: self.target.clone(),
            applet: self.applet.clone(),
            label_a: self.label_b.clone(),
            label_b: self.label_a.clone(),
            rows: self.rows.iter().map(ComparisonRow::swapped).collect(),
            summary: self.summary.swapped(),
        }
    }
}

impl Tabular for ComparisonTable {
    fn header(&self) -> Vec<String> {
        ["t", "crashes_a", "crashes_b", "edges_a", "edges_b", "execs_a", "execs_b"]
            .map(String::from)
            .to_vec()
    }

    fn rows(&self) -> Vec<Vec<String>> {
        self.rows
            .iter()
            .map(|r| {
                [r.t, r.crashes_a, r.crashes_b, r.edges_a, r.edges_b, r.execs_a, r.execs_b]
                    .map(|v| v.to_string())
                    .to_vec()
            })
            .collect()
    }
}

/// Value of a step function at `t`: the last sample at or before `t`.
fn step_at(series: &[FuzzStatsSample], t: u64) -> Option<&FuzzStatsSample> {
    let idx = series.partition_point(|s| s.relative_time_s <= t);
    idx.checked_sub(1).map(|i| &series[i])
}

/// Aligns two series on the union of their timestamps, carrying the last
/// observation forward. Before a series' first sample its counters read 0.
pub fn compare_conditions(
    a: &ConditionSeries,
    b: &ConditionSeries,
) -> Result<ComparisonTable, ReportError> {
    if a.target != b.target || a.applet != b.applet {
        return Err(ReportError::Mismatch(
            format!("{}/{}", a.target, a.applet),
            format!("{}/{}", b.target, b.applet),
        ));
    }
    let sorted = |s: &ConditionSeries| {
        let mut v = s.series.clone();
        v.sort_by_key(|x| x.relative_time_s);
        v
    };
    let (sa, sb) = (sorted(a), sorted(b));
    let times: BTreeSet<u64> = sa
        .iter()
        .chain(sb.iter())
        .map(|s| s.relative_time_s)
        .collect();
    let row_at = |t: u64| {
        let zero = FuzzStatsSample::default();
        let x = step_at(&sa, t).unwrap_or(&zero);
        let y = step_at(&sb, t).unwrap_or(&zero);
        ComparisonRow {
            t,
            crashes_a: x.crashes_saved,
            crashes_b: y.crashes_saved,
            edges_a: x.edges_found,
            edges_b: y.edges_found,
            execs_a: x.execs_done,
            execs_b: y.execs_done,
        }
    };
    let rows: Vec<ComparisonRow> = times.iter().map(|&t| row_at(t)).collect();
    let summary = rows.last().copied().unwrap_or_default();
    Ok(ComparisonTable {
        target: a.target.clone(),
        applet: a.applet.clone(),
        label_a: a.condition.to_string(),
        label_b: b.condition.to_string(),
        rows,
        summary,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OverlapCounts {
    pub label_a: String,
    pub label_b: String,
    pub only_a: usize,
    pub only_b: usize,
    pub common: usize,
}

impl Tabular for OverlapCounts {
    fn header(&self) -> Vec<String> {
        ["label_a", "label_b", "only_a", "only_b", "common"]
            .map(String::from)
            .to_vec()
    }

    fn rows(&self) -> Vec<Vec<String>> {
        vec![vec![
            self.label_a.clone(),
            self.label_b.clone(),
            self.only_a.to_string(),
            self.only_b.to_string(),
            self.common.to_string(),
        ]]
    }
}

pub fn overlap<T: Eq + Hash>(a: &HashSet<T>, b: &HashSet<T>) -> OverlapCounts {
    overlap_labeled(a, b, "a", "b")
}

pub fn overlap_labeled<T: Eq + Hash>(
    a: &HashSet<T>,
    b: &HashSet<T>,
    label_a: &str,
    label_b: &str,
) -> OverlapCounts {
    let common = a.intersection(b).count();
    OverlapCounts {
        label_a: label_a.to_string(),
        label_b: label_b.to_string(),
        only_a: a.len() - common,
        only_b: b.len() - common,
        common,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample(t: u64, crashes: u64) -> FuzzStatsSample {
        FuzzStatsSample {
            relative_time_s: t,
            crashes_saved: crashes,
            edges_found: crashes * 10,
            execs_done: t * 100,
            cycles_done: 0,
        }
    }

    fn series(cond: Condition, samples: Vec<FuzzStatsSample>) -> ConditionSeries {
        ConditionSeries {
            condition: cond,
            target: "bb-1.34.1-arm".into(),
            applet: "awk".into(),
            series: samples,
        }
    }

    #[test]
    fn final_crash_counts_in_summary() {
        let without = series(Condition::WithoutLlm, vec![sample(0, 0), sample(10800, 3)]);
        let with = series(Condition::WithLlm, vec![sample(0, 0), sample(3600, 90), sample(10800, 188)]);
        let t = compare_conditions(&without, &with).unwrap();
        assert_eq!((t.summary.crashes_a, t.summary.crashes_b), (3, 188));
        assert_eq!(t.rows.len(), 3);
        // without-LLM carried forward at t=3600
        assert_eq!(t.rows[1].crashes_a, 0);

        let without = series(Condition::WithoutLlm, vec![sample(10800, 0)]);
        let with = series(Condition::WithLlm, vec![sample(10800, 114)]);
        let t = compare_conditions(&without, &with).unwrap();
        assert_eq!((t.summary.crashes_a, t.summary.crashes_b), (0, 114));
    }

    #[test]
    fn identical_series_have_zero_deltas() {
        let s = vec![sample(0, 0), sample(5, 2), sample(9, 4)];
        let t = compare_conditions(
            &series(Condition::WithLlm, s.clone()),
            &series(Condition::WithoutLlm, s),
        )
        .unwrap();
        assert!(t.rows.iter().all(|r| r.deltas() == (0, 0, 0)));
    }

    #[test]
    fn mismatched_applets_rejected() {
        let a = series(Condition::WithLlm, vec![]);
        let mut b = series(Condition::WithoutLlm, vec![]);
        b.applet = "dc".into();
        assert!(matches!(compare_conditions(&a, &b), Err(ReportError::Mismatch(..))));
    }

    #[test]
    fn overlap_examples() {
        let a: HashSet<u32> = (0..19).collect();
        let b: HashSet<u32> = (14..22).collect();
        let o = overlap(&a, &b);
        assert_eq!((o.only_a, o.only_b, o.common), (14, 3, 5));
        let o = overlap(&a, &a);
        assert_eq!((o.only_a, o.only_b, o.common), (0, 0, 19));
        let o = overlap(&HashSet::new(), &b);
        assert_eq!((o.only_a, o.only_b, o.common), (0, 8, 0));
    }

    #[test]
    fn emit_shapes() {
        let empty = ComparisonTable {
            target: "t".into(),
            applet: "awk".into(),
            label_a: "a".into(),
            label_b: "b".into(),
            rows: vec![],
            summary: ComparisonRow::default(),
        };
        let csv = emit(&empty, Format::Csv).unwrap();
        assert_eq!(csv, b"t,crashes_a,crashes_b,edges_a,edges_b,execs_a,execs_b\n");

        let mut one = empty.clone();
        one.rows.push(sample_row());
        let csv = String::from_utf8(emit(&one, Format::Csv).unwrap()).unwrap();
        assert_eq!(csv.lines().count(), 2);
        assert_eq!(csv.lines().nth(1).unwrap(), "7,1,2,3,4,5,6");
        assert_eq!(emit(&one, Format::Json).unwrap(), emit(&one, Format::Json).unwrap());
        let plot = String::from_utf8(emit(&one, Format::Gnuplot).unwrap()).unwrap();
        assert!(plot.starts_with("# t crashes_a"));
        assert!(!plot.contains('\r'));
    }

    fn sample_row() -> ComparisonRow {
        ComparisonRow {
            t: 7,
            crashes_a: 1,
            crashes_b: 2,
            edges_a: 3,
            edges_b: 4,
            execs_a: 5,
            execs_b: 6,
        }
    }

    #[test]
    fn unknown_format_tag() {
        assert!(matches!("xlsx".parse::<Format>(), Err(ReportError::UnsupportedFormat(_))));
    }

    #[test]
    fn csv_quotes_commas() {
        let o = OverlapCounts {
            label_a: "reuse, v1.36.1".into(),
            label_b: "fuzz".into(),
            only_a: 1,
            only_b: 2,
            common: 3,
        };
        let csv = String::from_utf8(emit(&o, Format::Csv).unwrap()).unwrap();
        assert!(csv.contains("\"reuse, v1.36.1\",fuzz,1,2,3"));
    }

    fn monotone_series() -> impl Strategy<Value = Vec<FuzzStatsSample>> {
        proptest::collection::vec((1u64..50, 0u64..5, 0u64..20, 0u64..1000), 0..12).prop_map(|steps| {
            let mut acc = FuzzStatsSample::default();
            steps
                .into_iter()
                .map(|(dt, dc, de, dx)| {
                    acc.relative_time_s += dt;
                    acc.crashes_saved += dc;
                    acc.edges_found += de;
                    acc.execs_done += dx;
                    acc
                })
                .collect()
        })
    }

    proptest! {
        #[test]
        fn overlap_sums(a in proptest::collection::hash_set(0u8..40, 0..30),
                        b in proptest::collection::hash_set(0u8..40, 0..30)) {
            let o = overlap(&a, &b);
            prop_assert_eq!(o.only_a + o.common, a.len());
            prop_assert_eq!(o.only_b + o.common, b.len());
        }

        #[test]
        fn comparison_symmetric_under_swap(sa in monotone_series(), sb in monotone_series()) {
            let a = series(Condition::WithLlm, sa);
            let b = series(Condition::WithoutLlm, sb);
            let ab = compare_conditions(&a, &b).unwrap();
            let ba = compare_conditions(&b, &a).unwrap();
            prop_assert_eq!(ab.swapped(), ba);
        }
    }
}
