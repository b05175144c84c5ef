//! Metric aggregation and report output.
//!
//! Percentages are rounded half-up to two decimals with integer arithmetic
//! and rendered with the raw fraction, e.g. `45.70 (69/151)`.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::pipeline::TaskOutcome;

pub const REPORT_SCHEMA: &str = "neucomp.report/v1";

#[derive(Debug, thiserror::Error)]
pub enum ReportError {
    #[error("no records to aggregate")]
    EmptyRecords,
    #[error("no solved tasks")]
    NoSolvedTasks,
    #[error("invalid record for {task_id}: {message}")]
    InvalidRecord { task_id: String, message: String },
    #[error("invalid report: {0}")]
    InvalidReport(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawEvalRecord")]
pub struct EvalRecord {
    pub task_id: String,
    pub correct: bool,
    pub superior_perf: bool,
    pub debug_rounds_generation: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub speedup: Option<f64>,
    pub prompt_version: String,
}

#[derive(Deserialize)]
struct RawEvalRecord {
    task_id: String,
    correct: bool,
    superior_perf: bool,
    debug_rounds_generation: usize,
    #[serde(default)]
    speedup: Option<f64>,
    prompt_version: String,
}

impl TryFrom<RawEvalRecord> for EvalRecord {
    type Error = ReportError;

    fn try_from(r: RawEvalRecord) -> Result<Self, Self::Error> {
        EvalRecord::new(
            r.task_id,
            r.correct,
            r.superior_perf,
            r.debug_rounds_generation,
            r.speedup,
            r.prompt_version,
        )
    }
}

impl EvalRecord {
    /// Rejects records that are superior without being correct, carry a
    /// speedup without being correct, or whose flag disagrees with the
    /// speedup.
    pub fn new(
        task_id: impl Into<String>,
        correct: bool,
        superior_perf: bool,
        debug_rounds_generation: usize,
        speedup: Option<f64>,
        prompt_version: impl Into<String>,
    ) -> Result<Self, ReportError> {
        let task_id = task_id.into();
        let invalid = |message: &str| ReportError::InvalidRecord {
            task_id: task_id.clone(),
            message: message.to_string(),
        };
        if superior_perf && !correct {
            return Err(invalid("superior performance requires correctness"));
        }
        if speedup.is_some() && !correct {
            return Err(invalid("speedup recorded for an incorrect task"));
        }
        if let Some(s) = speedup {
            if !(s.is_finite() && s > 0.0) {
                return Err(invalid("speedup must be positive and finite"));
            }
        }
        if superior_perf != speedup.is_some_and(|s| s > 1.0) {
            return Err(invalid("superior_perf must equal speedup > 1"));
        }
        Ok(Self {
            task_id,
            correct,
            superior_perf,
            debug_rounds_generation,
            speedup,
            prompt_version: prompt_version.into(),
        })
    }

    pub fn from_outcome(outcome: &TaskOutcome, prompt_version: &str) -> Result<Self, ReportError> {
        let speedup = outcome.perf.as_ref().map(|p| p.speedup);
        Self::new(
            outcome.task_id.clone(),
            outcome.correct,
            outcome.correct && speedup.is_some_and(|s| s > 1.0),
            outcome.generation_trace.rounds_used,
            if outcome.correct { speedup } else { None },
            prompt_version,
        )
    }
}

/// `count` out of `total`, shown as a two-decimal percentage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ratio {
    pub count: usize,
    pub total: usize,
}

/// Half-up rounding of `num / den` to hundredths.
fn hundredths(num: u128, den: u128) -> u128 {
    (num * 200 + den) / (2 * den)
}

fn render_hundredths(h: u128) -> String {
    format!("{}.{:02}", h / 100, h % 100)
}

impl Ratio {
    pub fn new(count: usize, total: usize) -> Result<Self, ReportError> {
        if total == 0 {
            return Err(ReportError::EmptyRecords);
        }
        if count > total {
            return Err(ReportError::InvalidReport(format!("{count} exceeds {total}")));
        }
        Ok(Self { count, total })
    }

    fn percent_hundredths(&self) -> u128 {
        hundredths(self.count as u128 * 100, self.total as u128)
    }

    /// Percentage rounded half-up to two decimals.
    pub fn percent(&self) -> f64 {
        self.percent_hundredths() as f64 / 100.0
    }
}

impl fmt::Display for Ratio {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} ({}/{})",
            render_hundredths(self.percent_hundredths()),
            self.count,
            self.total
        )
    }
}

pub fn compute_acc(records: &[EvalRecord]) -> Result<Ratio, ReportError> {
    Ratio::new(records.iter().filter(|r| r.correct).count(), records.len())
}

/// Correct and strictly faster than the optimized baseline.
pub fn compute_acc_perf(records: &[EvalRecord]) -> Result<Ratio, ReportError> {
    Ratio::new(
        records
            .iter()
            .filter(|r| r.correct && r.speedup.is_some_and(|s| s > 1.0))
            .count(),
        records.len(),
    )
}

/// Mean generation-stage debug rounds over solved tasks, rounded half-up to
/// two decimals.
pub fn avg_debug_rounds(records: &[EvalRecord]) -> Result<f64, ReportError> {
    let solved: Vec<_> = records.iter().filter(|r| r.correct).collect();
    if solved.is_empty() {
        return Err(ReportError::NoSolvedTasks);
    }
    let sum: u128 = solved.iter().map(|r| r.debug_rounds_generation as u128).sum();
    Ok(hundredths(sum, solved.len() as u128) as f64 / 100.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateReport {
    pub schema: String,
    pub n_tasks: usize,
    pub acc: f64,
    pub acc_counts: Ratio,
    /// Absent when performance was not evaluated (e.g. level 1).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub acc_perf: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub acc_perf_counts: Option<Ratio>,
    /// Absent when nothing was solved.
    pub avg_debug_rounds_solved: Option<f64>,
    /// Debug rounds spent on tasks that stayed unsolved (diagnostic only).
    pub unsolved_debug_rounds: usize,
    pub per_task: Vec<EvalRecord>,
    /// Tasks left out because their reference was not a valid oracle.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub excluded: Vec<String>,
    pub config_digest: String,
}

impl AggregateReport {
    pub fn build(records: Vec<EvalRecord>, with_perf: bool, config_digest: impl Into<String>) -> Result<Self, ReportError> {
        let acc = compute_acc(&records)?;
        let acc_perf = if with_perf { Some(compute_acc_perf(&records)?) } else { None };
        let avg = match avg_debug_rounds(&records) {
            Ok(v) => Some(v),
            Err(ReportError::NoSolvedTasks) => None,
            Err(e) => return Err(e),
        };
        let report = Self {
            schema: REPORT_SCHEMA.into(),
            n_tasks: records.len(),
            acc: acc.percent(),
            acc_counts: acc,
            acc_perf: acc_perf.map(|r| r.percent()),
            acc_perf_counts: acc_perf,
            avg_debug_rounds_solved: avg,
            unsolved_debug_rounds: records
                .iter()
                .filter(|r| !r.correct)
                .map(|r| r.debug_rounds_generation)
                .sum(),
            per_task: records,
            excluded: Vec::new(),
            config_digest: config_digest.into(),
        };
        report.validate()?;
        Ok(report)
    }

    pub fn with_excluded(mut self, excluded: Vec<String>) -> Self {
        self.excluded = excluded;
        self
    }

    pub fn validate(&self) -> Result<(), ReportError> {
        let bad = |m: String| Err(ReportError::InvalidReport(m));
        if self.schema != REPORT_SCHEMA {
            return bad(format!("unsupported schema {:?}", self.schema));
        }
        if self.n_tasks != self.per_task.len() || self.acc_counts.total != self.n_tasks {
            return bad("task counts disagree".into());
        }
        if compute_acc(&self.per_task)? != self.acc_counts || self.acc != self.acc_counts.percent() {
            return bad("ACC disagrees with the records".into());
        }
        if let Some(p) = self.acc_perf_counts {
            if p.count > self.acc_counts.count {
                return bad("ACC+Perf exceeds ACC".into());
            }
            if compute_acc_perf(&self.per_task)? != p || self.acc_perf != Some(p.percent()) {
                return bad("ACC+Perf disagrees with the records".into());
            }
        } else if self.acc_perf.is_some() {
            return bad("ACC+Perf percentage without counts".into());
        }
        Ok(())
    }

    pub fn acc_display(&self) -> String {
        self.acc_counts.to_string()
    }

    pub fn acc_perf_display(&self) -> Option<String> {
        self.acc_perf_counts.map(|r| r.to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ReportFormat {
    Table,
    Structured,
}

fn aligned(rows: &[Vec<String>]) -> String {
    let cols = rows.iter().map(Vec::len).max().unwrap_or(0);
    let widths: Vec<usize> = (0..cols)
        .map(|c| rows.iter().filter_map(|r| r.get(c)).map(|s| s.chars().count()).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    for row in rows {
        let cells: Vec<String> = row
            .iter()
            .enumerate()
            .map(|(c, s)| format!("{s:<w$}", w = widths[c]))
            .collect();
        out.push_str(cells.join("  ").trim_end());
        out.push('\n');
    }
    out
}

/// Human-readable report: headline metrics, per-task results, and the
/// speedup ranking in descending order.
pub fn render_table(report: &AggregateReport) -> String {
    let mut out = format!("config digest: {}\ntasks: {}\n\n", report.config_digest, report.n_tasks);
    let mut header = vec!["ACC (%)".to_string()];
    let mut values = vec![report.acc_display()];
    if let Some(p) = report.acc_perf_display() {
        header.push("ACC+Perf (%)".into());
        values.push(p);
    }
    header.push("Avg debug rounds (solved)".into());
    values.push(
        report
            .avg_debug_rounds_solved
            .map_or_else(|| "n/a".into(), |v| format!("{v:.2}")),
    );
    out.push_str(&aligned(&[header, values]));
    if report.unsolved_debug_rounds > 0 {
        out.push_str(&format!(
            "debug rounds spent on unsolved tasks: {}\n",
            report.unsolved_debug_rounds
        ));
    }
    if !report.excluded.is_empty() {
        out.push_str(&format!("excluded (invalid reference): {}\n", report.excluded.join(", ")));
    }

    out.push_str("\nPer task\n");
    let mut rows = vec![vec![
        "Task".to_string(),
        "Correct".into(),
        "Debug rounds".into(),
        "Speedup".into(),
    ]];
    for r in &report.per_task {
        rows.push(vec![
            r.task_id.clone(),
            if r.correct { "yes" } else { "no" }.into(),
            r.debug_rounds_generation.to_string(),
            r.speedup.map_or_else(|| "-".into(), |s| format!("{s:.4}")),
        ]);
    }
    out.push_str(&aligned(&rows));

    let mut ranked: Vec<&EvalRecord> = report.per_task.iter().filter(|r| r.speedup.is_some()).collect();
    if !ranked.is_empty() {
        ranked.sort_by(|a, b| {
            b.speedup
                .partial_cmp(&a.speedup)
                .unwrap_or(std::cmp::Ordering::Equal)
                .then_with(|| a.task_id.cmp(&b.task_id))
        });
        out.push_str("\nSpeedup over clang -O3 (descending)\n");
        let mut rows = vec![vec!["Task".to_string(), "Speedup".into()]];
        rows.extend(ranked.iter().map(|r| vec![r.task_id.clone(), format!("{:.4}", r.speedup.unwrap())]));
        out.push_str(&aligned(&rows));
    }
    out
}

pub fn render_structured(report: &AggregateReport) -> String {
    let mut s = serde_json::to_string_pretty(report).expect("report serializes");
    s.push('\n');
    s
}

pub fn parse_structured(text: &str) -> Result<AggregateReport, ReportError> {
    let report: AggregateReport =
        serde_json::from_str(text).map_err(|e| ReportError::InvalidReport(e.to_string()))?;
    report.validate()?;
    Ok(report)
}

pub fn load_report(path: &Path) -> Result<AggregateReport, ReportError> {
    let text = fs::read_to_string(path).map_err(|source| ReportError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_structured(&text)
}

/// Writes `<stem>.txt` and/or `<stem>.json` under `dir`.
pub fn emit_report(
    report: &AggregateReport,
    formats: &[ReportFormat],
    dir: &Path,
    stem: &str,
) -> Result<Vec<PathBuf>, ReportError> {
    report.validate()?;
    let mut written = Vec::new();
    for format in formats {
        let (path, body) = match format {
            ReportFormat::Table => (dir.join(format!("{stem}.txt")), render_table(report)),
            ReportFormat::Structured => (dir.join(format!("{stem}.json")), render_structured(report)),
        };
        if written.contains(&path) {
            continue;
        }
        let io = |source| ReportError::Io {
            path: path.display().to_string(),
            source,
        };
        fs::create_dir_all(dir).map_err(io)?;
        fs::write(&path, body).map_err(io)?;
        written.push(path);
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn rec(id: &str, correct: bool, rounds: usize, speedup: Option<f64>) -> EvalRecord {
        EvalRecord::new(id, correct, speedup.is_some_and(|s| s > 1.0), rounds, speedup, "v").unwrap()
    }

    fn counts(correct: usize, total: usize) -> Vec<EvalRecord> {
        (0..total).map(|i| rec(&format!("t{i}"), i < correct, 0, None)).collect()
    }

    /// Independent oracle: floor of the exact quotient, then round up when
    /// the remainder is at least half the divisor.
    fn oracle_percent(k: usize, n: usize) -> String {
        let (k, n) = (k as u64, n as u64);
        let floor = k * 10000 / n;
        let rem = k * 10000 % n;
        let h = if 2 * rem >= n { floor + 1 } else { floor };
        format!("{}.{:02}", h / 100, h % 100)
    }

    #[test]
    fn published_figures() {
        assert_eq!(compute_acc(&counts(69, 151)).unwrap().to_string(), "45.70 (69/151)");
        assert_eq!(compute_acc(&counts(16, 25)).unwrap().to_string(), "64.00 (16/25)");
        assert_eq!(compute_acc(&counts(0, 7)).unwrap().to_string(), "0.00 (0/7)");
        let perf: Vec<_> = (0..25)
            .map(|i| rec(&format!("t{i}"), true, 0, Some(if i < 14 { 1.5 } else { 0.9 })))
            .collect();
        assert_eq!(compute_acc_perf(&perf).unwrap().to_string(), "56.00 (14/25)");
        let seven: Vec<_> = (0..25)
            .map(|i| rec(&format!("t{i}"), true, 0, Some(if i < 7 { 1.1 } else { 1.0 })))
            .collect();
        assert_eq!(compute_acc_perf(&seven).unwrap().to_string(), "28.00 (7/25)");
        assert!(matches!(compute_acc(&[]), Err(ReportError::EmptyRecords)));
    }

    #[test]
    fn equal_speed_is_not_superior() {
        let all_equal: Vec<_> = (0..4).map(|i| rec(&format!("t{i}"), true, 0, Some(1.0))).collect();
        assert_eq!(compute_acc_perf(&all_equal).unwrap().to_string(), "0.00 (0/4)");
    }

    #[test]
    fn average_rounds_over_solved_only() {
        let r = vec![rec("a", true, 0, None), rec("b", true, 1, None), rec("c", true, 2, None), rec("d", true, 1, None), rec("e", false, 2, None)];
        assert_eq!(avg_debug_rounds(&r).unwrap(), 1.0);
        assert_eq!(avg_debug_rounds(&counts(3, 3)).unwrap(), 0.0);
        assert!(matches!(avg_debug_rounds(&counts(0, 3)), Err(ReportError::NoSolvedTasks)));
    }

    #[test]
    fn inconsistent_records_are_rejected() {
        assert!(EvalRecord::new("t", false, true, 0, Some(2.0), "v").is_err());
        assert!(EvalRecord::new("t", false, false, 0, Some(0.5), "v").is_err());
        assert!(EvalRecord::new("t", true, true, 0, Some(1.0), "v").is_err());
        let json = r#"{"task_id":"t","correct":false,"superior_perf":true,"debug_rounds_generation":0,"prompt_version":"v"}"#;
        assert!(serde_json::from_str::<EvalRecord>(json).is_err());
    }

    #[test]
    fn table_headers_and_speedup_order() {
        let records = vec![
            rec("s452", true, 0, Some(0.8621)),
            rec("s331", true, 1, Some(3.2485)),
            rec("s000", false, 2, None),
        ];
        let report = AggregateReport::build(records, true, "abc").unwrap();
        let table = render_table(&report);
        assert!(table.contains("ACC (%)") && table.contains("ACC+Perf (%)"));
        let ranking = table.split("(descending)").nth(1).unwrap();
        assert!(ranking.find("s331").unwrap() < ranking.find("s452").unwrap());
        assert!(table.contains("config digest: abc"));

        let l1 = AggregateReport::build(counts(1, 2), false, "abc").unwrap();
        assert!(!render_table(&l1).contains("ACC+Perf"));
        assert!(!render_structured(&l1).contains("acc_perf"));
    }

    #[test]
    fn empty_format_set_writes_nothing() {
        let dir = tempfile::tempdir().unwrap();
        let report = AggregateReport::build(counts(1, 1), false, "d").unwrap();
        assert!(emit_report(&report, &[], dir.path(), "r").unwrap().is_empty());
        assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 0);
        let files = emit_report(&report, &[ReportFormat::Table, ReportFormat::Structured], dir.path(), "r").unwrap();
        assert_eq!(files.len(), 2);
        assert_eq!(load_report(&files[1]).unwrap(), report);
    }

    fn arb_record(i: usize) -> impl Strategy<Value = EvalRecord> {
        (any::<bool>(), 0usize..4, prop::option::of(0.1f64..4.0)).prop_map(move |(correct, rounds, speedup)| {
            let speedup = if correct { speedup } else { None };
            rec(&format!("t{i}"), correct, rounds, speedup)
        })
    }

    fn arb_records() -> impl Strategy<Value = Vec<EvalRecord>> {
        (1usize..40).prop_flat_map(|n| (0..n).map(arb_record).collect::<Vec<_>>())
    }

    proptest! {
        #[test]
        fn percent_matches_oracle(n in 1usize..2000, k_frac in 0.0f64..=1.0) {
            let k = ((n as f64) * k_frac) as usize;
            let r = Ratio::new(k, n).unwrap();
            let shown = r.to_string();
            prop_assert_eq!(shown.split(' ').next().unwrap(), oracle_percent(k, n));
            let re_ok = {
                let (pct, frac) = shown.split_once(' ').unwrap();
                let (int, dec) = pct.split_once('.').unwrap();
                !int.is_empty() && int.bytes().all(|b| b.is_ascii_digit())
                    && dec.len() == 2 && dec.bytes().all(|b| b.is_ascii_digit())
                    && frac == format!("({k}/{n})")
            };
            prop_assert!(re_ok);
        }

        #[test]
        fn acc_perf_never_exceeds_acc(records in arb_records(), perf in any::<bool>()) {
            let report = AggregateReport::build(records, perf, "d").unwrap();
            if let Some(p) = report.acc_perf_counts {
                prop_assert!(p.count <= report.acc_counts.count);
            }
            let parsed = parse_structured(&render_structured(&report)).unwrap();
            prop_assert_eq!(parsed, report);
        }
    }
}
