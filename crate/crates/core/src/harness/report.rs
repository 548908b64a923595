//! Per-sample run reports and their aggregate block.
//!
//! A report is written as CSV: `# key: value` lines echo the configuration,
//! then `# aggregate.key: value` lines carry the summary, then a column
//! header and one row per sample. Emission re-parses the rows it just
//! formatted and recomputes the aggregates; any mismatch is an error.

use std::fmt::{self, Write as _};
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::pose::{mpjpe, procrustes_transform, subset_mpjpe, KeypointSchema, Pose};
use crate::tta::RoutePath;

pub const REPORT_COLUMNS: [&str; 14] = [
    "id",
    "energy",
    "decision",
    "path",
    "distal_pre",
    "distal_post",
    "mpjpe_pre",
    "mpjpe_post",
    "pa_mpjpe_pre",
    "pa_mpjpe_post",
    "l_tt_first",
    "l_tt_last",
    "l_tt_trace",
    "elapsed_us",
];

#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub id: String,
    pub energy: f64,
    pub is_ood: bool,
    pub path: RoutePath,
    pub distal_pre: f64,
    pub distal_post: f64,
    pub mpjpe_pre: f64,
    pub mpjpe_post: f64,
    pub pa_pre: f64,
    pub pa_post: f64,
    pub l_tt: Vec<f64>,
    pub elapsed_us: f64,
}

/// Error metrics of one prediction against ground truth.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PoseErrors {
    pub distal: f64,
    pub all: f64,
    pub aligned: f64,
}

/// PA-MPJPE that keeps the best-effort transform when alignment is
/// degenerate instead of failing the whole run.
pub fn pa_mpjpe_lenient(pred: &Pose, gt: &Pose) -> Result<f64> {
    let transform = match procrustes_transform(pred, gt) {
        Ok(t) => t,
        Err(Error::AlignmentDegenerate { best_effort, .. }) => *best_effort,
        Err(e) => return Err(e),
    };
    mpjpe(&transform.apply(pred), gt)
}

impl PoseErrors {
    pub fn measure(pred: &Pose, gt: &Pose, schema: &KeypointSchema) -> Result<Self> {
        Ok(Self {
            distal: subset_mpjpe(pred, gt, &schema.distal_indices)?,
            all: mpjpe(pred, gt)?,
            aligned: pa_mpjpe_lenient(pred, gt)?,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Aggregates {
    pub samples: usize,
    pub fast: usize,
    pub adapted: usize,
    pub ood: usize,
    pub distal_pre: f64,
    pub distal_post: f64,
    pub mpjpe_pre: f64,
    pub mpjpe_post: f64,
    pub pa_mpjpe_pre: f64,
    pub pa_mpjpe_post: f64,
    pub total_elapsed_us: f64,
    pub mean_elapsed_us: f64,
    pub mean_elapsed_fast_us: Option<f64>,
    pub mean_elapsed_adapted_us: Option<f64>,
}

fn mean_of(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

impl Aggregates {
    pub fn from_rows(rows: &[ReportRow]) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::InsufficientData("report has no rows".into()));
        }
        let mean = |f: fn(&ReportRow) -> f64| mean_of(rows.iter().map(f)).unwrap_or(f64::NAN);
        let path_mean = |p: RoutePath| mean_of(rows.iter().filter(|r| r.path == p).map(|r| r.elapsed_us));
        let total_elapsed_us: f64 = rows.iter().map(|r| r.elapsed_us).sum();
        Ok(Self {
            samples: rows.len(),
            fast: rows.iter().filter(|r| r.path == RoutePath::Fast).count(),
            adapted: rows.iter().filter(|r| r.path == RoutePath::Adapted).count(),
            ood: rows.iter().filter(|r| r.is_ood).count(),
            distal_pre: mean(|r| r.distal_pre),
            distal_post: mean(|r| r.distal_post),
            mpjpe_pre: mean(|r| r.mpjpe_pre),
            mpjpe_post: mean(|r| r.mpjpe_post),
            pa_mpjpe_pre: mean(|r| r.pa_pre),
            pa_mpjpe_post: mean(|r| r.pa_post),
            total_elapsed_us,
            mean_elapsed_us: total_elapsed_us / rows.len() as f64,
            mean_elapsed_fast_us: path_mean(RoutePath::Fast),
            mean_elapsed_adapted_us: path_mean(RoutePath::Adapted),
        })
    }

    pub fn distal_delta(&self) -> f64 {
        self.distal_post - self.distal_pre
    }

    pub fn mpjpe_delta(&self) -> f64 {
        self.mpjpe_post - self.mpjpe_pre
    }

    pub fn pa_mpjpe_delta(&self) -> f64 {
        self.pa_mpjpe_post - self.pa_mpjpe_pre
    }

    fn entries(&self) -> Vec<(&'static str, String)> {
        let opt = |v: Option<f64>| v.map_or_else(|| "NA".to_string(), |v| v.to_string());
        vec![
            ("samples", self.samples.to_string()),
            ("fast", self.fast.to_string()),
            ("adapted", self.adapted.to_string()),
            ("ood", self.ood.to_string()),
            ("distal_pre", self.distal_pre.to_string()),
            ("distal_post", self.distal_post.to_string()),
            ("distal_delta", self.distal_delta().to_string()),
            ("mpjpe_pre", self.mpjpe_pre.to_string()),
            ("mpjpe_post", self.mpjpe_post.to_string()),
            ("mpjpe_delta", self.mpjpe_delta().to_string()),
            ("pa_mpjpe_pre", self.pa_mpjpe_pre.to_string()),
            ("pa_mpjpe_post", self.pa_mpjpe_post.to_string()),
            ("pa_mpjpe_delta", self.pa_mpjpe_delta().to_string()),
            ("total_elapsed_us", self.total_elapsed_us.to_string()),
            ("mean_elapsed_us", self.mean_elapsed_us.to_string()),
            ("mean_elapsed_fast_us", opt(self.mean_elapsed_fast_us)),
            ("mean_elapsed_adapted_us", opt(self.mean_elapsed_adapted_us)),
        ]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunReport {
    /// Ordered `(key, value)` configuration echo.
    pub config: Vec<(String, String)>,
    pub rows: Vec<ReportRow>,
    pub aggregates: Aggregates,
    /// `(id, reason)` of records the pipeline skipped.
    pub skipped: Vec<(String, String)>,
}

fn fmt_trace(trace: &[f64]) -> String {
    trace.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(";")
}

fn opt_last(trace: &[f64], first: bool) -> String {
    let v = if first { trace.first() } else { trace.last() };
    v.map_or_else(String::new, |v| v.to_string())
}

impl ReportRow {
    fn to_csv(&self) -> String {
        let decision = if self.is_ood { "ood" } else { "id" };
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            csv_field(&self.id),
            self.energy,
            decision,
            self.path.as_str(),
            self.distal_pre,
            self.distal_post,
            self.mpjpe_pre,
            self.mpjpe_post,
            self.pa_pre,
            self.pa_post,
            opt_last(&self.l_tt, true),
            opt_last(&self.l_tt, false),
            fmt_trace(&self.l_tt),
            self.elapsed_us
        )
    }

    fn from_csv(line: &str) -> Result<Self> {
        let fields = split_csv(line);
        let bad = || Error::Report(format!("malformed row '{line}'"));
        if fields.len() != REPORT_COLUMNS.len() {
            return Err(bad());
        }
        let num = |i: usize| fields[i].parse::<f64>().map_err(|_| bad());
        let path = match fields[3].as_str() {
            "fast" => RoutePath::Fast,
            "adapted" => RoutePath::Adapted,
            _ => return Err(bad()),
        };
        let l_tt = if fields[12].is_empty() {
            Vec::new()
        } else {
            fields[12]
                .split(';')
                .map(|v| v.parse::<f64>().map_err(|_| bad()))
                .collect::<Result<_>>()?
        };
        Ok(Self {
            id: fields[0].clone(),
            energy: num(1)?,
            is_ood: fields[2] == "ood",
            path,
            distal_pre: num(4)?,
            distal_post: num(5)?,
            mpjpe_pre: num(6)?,
            mpjpe_post: num(7)?,
            pa_pre: num(8)?,
            pa_post: num(9)?,
            l_tt,
            elapsed_us: num(13)?,
        })
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

fn split_csv(line: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    let mut quoted = false;
    let mut chars = line.chars().peekable();
    while let Some(c) = chars.next() {
        match (c, quoted) {
            ('"', true) if chars.peek() == Some(&'"') => {
                cur.push('"');
                chars.next();
            }
            ('"', _) => quoted = !quoted,
            (',', false) => out.push(std::mem::take(&mut cur)),
            _ => cur.push(c),
        }
    }
    out.push(cur);
    out
}

fn same_value(a: f64, b: f64) -> bool {
    a == b || (a.is_nan() && b.is_nan()) || (a - b).abs() <= 1e-9 * a.abs().max(b.abs())
}

fn same_aggregates(a: &Aggregates, b: &Aggregates) -> bool {
    let opt = |x: Option<f64>, y: Option<f64>| match (x, y) {
        (Some(x), Some(y)) => same_value(x, y),
        (None, None) => true,
        _ => false,
    };
    a.samples == b.samples
        && a.fast == b.fast
        && a.adapted == b.adapted
        && a.ood == b.ood
        && same_value(a.distal_pre, b.distal_pre)
        && same_value(a.distal_post, b.distal_post)
        && same_value(a.mpjpe_pre, b.mpjpe_pre)
        && same_value(a.mpjpe_post, b.mpjpe_post)
        && same_value(a.pa_mpjpe_pre, b.pa_mpjpe_pre)
        && same_value(a.pa_mpjpe_post, b.pa_mpjpe_post)
        && same_value(a.total_elapsed_us, b.total_elapsed_us)
        && same_value(a.mean_elapsed_us, b.mean_elapsed_us)
        && opt(a.mean_elapsed_fast_us, b.mean_elapsed_fast_us)
        && opt(a.mean_elapsed_adapted_us, b.mean_elapsed_adapted_us)
}

impl RunReport {
    pub fn new(config: Vec<(String, String)>, rows: Vec<ReportRow>, skipped: Vec<(String, String)>) -> Result<Self> {
        let aggregates = Aggregates::from_rows(&rows)?;
        Ok(Self {
            config,
            rows,
            aggregates,
            skipped,
        })
    }

    pub fn config_value(&self, key: &str) -> Option<&str> {
        self.config.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    fn rows_csv(&self) -> Vec<String> {
        self.rows.iter().map(ReportRow::to_csv).collect()
    }

    /// Recomputes the aggregates from the formatted rows.
    pub fn verify(&self) -> Result<()> {
        let parsed = self
            .rows_csv()
            .iter()
            .map(|l| ReportRow::from_csv(l))
            .collect::<Result<Vec<_>>>()?;
        let recomputed = Aggregates::from_rows(&parsed)?;
        if !same_aggregates(&recomputed, &self.aggregates) {
            return Err(Error::Report("aggregates disagree with their rows".into()));
        }
        Ok(())
    }

    /// Full CSV text, verified before it is returned.
    pub fn to_csv(&self) -> Result<String> {
        self.verify()?;
        let mut out = String::new();
        for (k, v) in &self.config {
            let _ = writeln!(out, "# {k}: {v}");
        }
        for (k, v) in self.aggregates.entries() {
            let _ = writeln!(out, "# aggregate.{k}: {v}");
        }
        let _ = writeln!(out, "# aggregate.skipped: {}", self.skipped.len());
        for (id, reason) in &self.skipped {
            let _ = writeln!(out, "# skipped.{id}: {reason}");
        }
        let _ = writeln!(out, "{}", REPORT_COLUMNS.join(","));
        for line in self.rows_csv() {
            let _ = writeln!(out, "{line}");
        }
        Ok(out)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_csv()?)?;
        Ok(())
    }

    /// The rows section of a report file; the inverse of the row formatting.
    pub fn parse_rows(text: &str) -> Result<Vec<ReportRow>> {
        text.lines()
            .filter(|l| !l.starts_with('#') && !l.is_empty())
            .skip(1)
            .map(ReportRow::from_csv)
            .collect()
    }

    /// Reports compared without timing: rows with `elapsed_us` cleared and
    /// the aggregates rebuilt.
    pub fn without_timing(&self) -> Result<RunReport> {
        let rows = self
            .rows
            .iter()
            .map(|r| ReportRow {
                elapsed_us: 0.0,
                ..r.clone()
            })
            .collect();
        RunReport::new(self.config.clone(), rows, self.skipped.clone())
    }
}

impl fmt::Display for Aggregates {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (k, v) in self.entries() {
            writeln!(f, "{k:>24}: {v}")?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(id: &str, path: RoutePath, post: f64, us: f64) -> ReportRow {
        ReportRow {
            id: id.into(),
            energy: 812.25,
            is_ood: path == RoutePath::Adapted,
            path,
            distal_pre: 50.0,
            distal_post: post,
            mpjpe_pre: 20.0,
            mpjpe_post: 19.0,
            pa_pre: 15.0,
            pa_post: 14.5,
            l_tt: if path == RoutePath::Adapted { vec![3.5, 3.25] } else { vec![] },
            elapsed_us: us,
        }
    }

    #[test]
    fn aggregates_and_round_trip() {
        let rows = vec![
            row("a", RoutePath::Fast, 40.0, 10.0),
            row("b,\"x\"", RoutePath::Adapted, 30.0, 110.0),
            row("c", RoutePath::Fast, 41.0, 12.0),
        ];
        let report = RunReport::new(vec![("seed".into(), "3".into())], rows.clone(), vec![]).unwrap();
        let a = &report.aggregates;
        assert_eq!((a.samples, a.fast, a.adapted, a.ood), (3, 2, 1, 1));
        assert!((a.distal_post - 37.0).abs() < 1e-12);
        assert!((a.distal_delta() + 13.0).abs() < 1e-12);
        assert_eq!(a.mean_elapsed_fast_us, Some(11.0));
        assert_eq!(a.mean_elapsed_adapted_us, Some(110.0));

        let text = report.to_csv().unwrap();
        assert!(text.starts_with("# seed: 3\n"));
        assert_eq!(RunReport::parse_rows(&text).unwrap(), rows);
    }

    #[test]
    fn tampered_aggregates_fail_verification() {
        let mut report = RunReport::new(vec![], vec![row("a", RoutePath::Fast, 40.0, 1.0)], vec![]).unwrap();
        report.aggregates.distal_post = 1.0;
        assert!(report.to_csv().is_err());
        assert!(RunReport::new(vec![], vec![], vec![]).is_err());
    }

    #[test]
    fn degenerate_alignment_is_tolerated() {
        let p = Pose::zeros(17);
        let g = Pose::zeros(17).translated([1.0, 0.0, 0.0]);
        assert_eq!(pa_mpjpe_lenient(&p, &g).unwrap(), 0.0);
    }
}
