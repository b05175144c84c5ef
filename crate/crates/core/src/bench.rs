//! Runtime measurement protocol and speedup against the optimized baseline.
//!
//! Each program runs 11 times under exclusive execution. Runs 1-3 (warm-up)
//! and 9-11 (cool-down) are discarded by execution order; the reported
//! runtime is the median of runs 4-8. The clock is monotonic wall time around
//! the whole child process. A final comparison interleaves the candidate's
//! runs with the baseline's so that both see the same machine conditions.

use std::fs;
use std::path::Path;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::executor::{run_exclusive, ExclusiveExecution, ExecError, ExecutionLimits, Runner};

pub const PROTOCOL_RUNS: usize = 11;
/// 0-based positions kept by the protocol (runs 4-8).
pub const KEPT_WINDOW: std::ops::Range<usize> = 3..8;

#[derive(Debug, thiserror::Error)]
pub enum BenchError {
    #[error("measurement run {index} failed: {message}")]
    Measurement { index: usize, message: String },
    #[error("timing protocol needs exactly {PROTOCOL_RUNS} runs, got {0}")]
    Protocol(usize),
    #[error("runtimes must be positive and finite (got {runtime_o3} and {runtime_llm})")]
    Domain { runtime_o3: f64, runtime_llm: f64 },
    #[error(transparent)]
    Exec(#[from] ExecError),
    #[error("cannot write timing record {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TimingSeries {
    /// Durations in execution order.
    pub runs: Vec<Duration>,
    pub n_total: usize,
}

impl TimingSeries {
    pub fn new(runs: Vec<Duration>) -> Self {
        let n_total = runs.len();
        Self { runs, n_total }
    }
}

fn timed_run(
    runner: &dyn Runner,
    held: &ExclusiveExecution,
    executable: &Path,
    limits: &ExecutionLimits,
    index: usize,
) -> Result<Duration, BenchError> {
    let result = run_exclusive(runner, held, executable, limits).map_err(|e| BenchError::Measurement {
        index,
        message: e.to_string(),
    })?;
    if result.timed_out {
        return Err(BenchError::Measurement {
            index,
            message: format!("timed out after {:?}", result.wall_time),
        });
    }
    if result.crashed {
        return Err(BenchError::Measurement {
            index,
            message: format!("terminated by signal {}", result.signal.unwrap_or(0)),
        });
    }
    Ok(result.wall_time.max(Duration::from_nanos(1)))
}

/// Runs `executable` `n` times sequentially. Any timeout or crash aborts with
/// the 1-based index of the failing run.
pub fn measure(
    runner: &dyn Runner,
    held: &ExclusiveExecution,
    executable: &Path,
    limits: &ExecutionLimits,
    n: usize,
) -> Result<TimingSeries, BenchError> {
    let runs = (1..=n)
        .map(|index| timed_run(runner, held, executable, limits, index))
        .collect::<Result<_, _>>()?;
    Ok(TimingSeries::new(runs))
}

/// Runs two executables `n` times each, alternating between them (ABBA
/// order) so that slow drift in machine load hits both series alike. Each
/// series keeps its own execution order.
pub fn measure_pair(
    runner: &dyn Runner,
    held: &ExclusiveExecution,
    first: &Path,
    second: &Path,
    limits: &ExecutionLimits,
    n: usize,
) -> Result<(TimingSeries, TimingSeries), BenchError> {
    let mut a = Vec::with_capacity(n);
    let mut b = Vec::with_capacity(n);
    for index in 1..=n {
        if index % 2 == 1 {
            a.push(timed_run(runner, held, first, limits, index)?);
            b.push(timed_run(runner, held, second, limits, index)?);
        } else {
            b.push(timed_run(runner, held, second, limits, index)?);
            a.push(timed_run(runner, held, first, limits, index)?);
        }
    }
    Ok((TimingSeries::new(a), TimingSeries::new(b)))
}

/// Median of runs 4-8 (by execution order) of an 11-run series.
pub fn median_protocol(series: &TimingSeries) -> Result<Duration, BenchError> {
    if series.runs.len() != PROTOCOL_RUNS || series.n_total != PROTOCOL_RUNS {
        return Err(BenchError::Protocol(series.runs.len()));
    }
    let mut kept = series.runs[KEPT_WINDOW].to_vec();
    kept.sort_unstable();
    Ok(kept[2])
}

/// Lower median of all runs, for cheap screening series of any length.
pub fn plain_median(series: &TimingSeries) -> Option<Duration> {
    let mut runs = series.runs.clone();
    runs.sort_unstable();
    runs.get(runs.len().saturating_sub(1) / 2).copied()
}

/// `runtime_o3 / runtime_llm`; values above 1 mean the candidate is faster.
pub fn speedup(runtime_o3: f64, runtime_llm: f64) -> Result<f64, BenchError> {
    let valid = |x: f64| x.is_finite() && x > 0.0;
    if !valid(runtime_o3) || !valid(runtime_llm) {
        return Err(BenchError::Domain {
            runtime_o3,
            runtime_llm,
        });
    }
    Ok(runtime_o3 / runtime_llm)
}

pub fn speedup_of(runtime_o3: Duration, runtime_llm: Duration) -> Result<f64, BenchError> {
    speedup(runtime_o3.as_nanos() as f64, runtime_llm.as_nanos() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerfComparison {
    pub runtime_llm_ns: u64,
    pub runtime_o3_ns: u64,
    pub speedup: f64,
}

impl PerfComparison {
    pub fn new(runtime_o3: Duration, runtime_llm: Duration) -> Result<Self, BenchError> {
        Ok(Self {
            runtime_llm_ns: runtime_llm.as_nanos() as u64,
            runtime_o3_ns: runtime_o3.as_nanos() as u64,
            speedup: speedup_of(runtime_o3, runtime_llm)?,
        })
    }

    /// Strictly faster than the optimized baseline.
    pub fn is_superior(&self) -> bool {
        self.speedup > 1.0
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TimedRun {
    pub index: usize,
    pub duration_ns: u64,
    pub kept: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TimingRecord {
    pub task_id: String,
    pub label: String,
    pub runs: Vec<TimedRun>,
    pub median_ns: u64,
}

impl TimingRecord {
    /// Kept flags follow the 11-run protocol; shorter screening series mark
    /// every run as kept.
    pub fn new(task_id: &str, label: &str, series: &TimingSeries, median: Duration) -> Self {
        let protocol = series.runs.len() == PROTOCOL_RUNS;
        let runs = series
            .runs
            .iter()
            .enumerate()
            .map(|(i, d)| TimedRun {
                index: i + 1,
                duration_ns: d.as_nanos() as u64,
                kept: !protocol || KEPT_WINDOW.contains(&i),
            })
            .collect();
        Self {
            task_id: task_id.to_string(),
            label: label.to_string(),
            runs,
            median_ns: median.as_nanos() as u64,
        }
    }

    pub fn write(&self, path: &Path) -> Result<(), BenchError> {
        let io = |source| BenchError::Io {
            path: path.display().to_string(),
            source,
        };
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(io)?;
        }
        fs::write(path, serde_json::to_vec_pretty(self).expect("timing record serializes")).map_err(io)
    }
}
