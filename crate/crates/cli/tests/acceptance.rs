//! End-to-end acceptance checks. Each criterion prints one PASS/FAIL line;
//! the process exits nonzero if any of them fails.

use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::Duration;

use neucomp_core::bench::{measure, median_protocol, speedup, TimingSeries};
use neucomp_core::evolve::{
    apply_to_text, collect_signal, init_prompt_store, learn, BatchResult, LearnConfig, PromptStore,
};
use neucomp_core::executor::{ExclusiveExecution, ExecError, ExecutionLimits, RunResult, Runner, Verdict, VerdictStatus};
use neucomp_core::fixtures::{fixtures_dir, BASELINE_PROMPT};
use neucomp_core::llm::{wrap_in_assembly_fence, Gateway, ReplayScript};
use neucomp_core::pipeline::{
    neural_compile, Attempt, AttemptKind, PipelineConfig, PipelineContext, ScriptedBackend, SelfDebugTrace,
    TaskOutcome, TraceStage,
};
use neucomp_core::report::{compute_acc, compute_acc_perf, load_report, EvalRecord, Ratio};
use neucomp_core::task::{load_task_dir, TaskSpec};
use neucomp_core::toolchain::{FailureDiagnostics, FailureStage, Toolchain, ToolchainConfig};
use neucomp_core::ArchTarget;
use proptest::prelude::*;
use proptest::test_runner::{Config, TestRunner};

type Outcome = Result<String, String>;

fn ensure(cond: bool, message: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(message.into())
    }
}

fn suite(rel: &str) -> PathBuf {
    fixtures_dir().join("suites").join(rel)
}

fn task(id: &str) -> TaskSpec {
    load_task_dir(&fixtures_dir().join("tasks").join(id)).unwrap()
}

fn neucomp(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_neucomp"))
        .args(args)
        .output()
        .expect("spawn neucomp")
}

fn cli(args: &[&str], out: &Path) -> Result<String, String> {
    let mut full: Vec<&str> = args.to_vec();
    let out = out.to_str().unwrap();
    full.extend(["--output-dir", out]);
    let o = neucomp(&full);
    let stdout = String::from_utf8_lossy(&o.stdout).into_owned();
    if o.status.code() != Some(0) {
        return Err(format!(
            "neucomp {} exited {:?}: {}{}",
            args.join(" "),
            o.status.code(),
            stdout,
            String::from_utf8_lossy(&o.stderr)
        ));
    }
    Ok(stdout)
}

fn proptest(cases: u32, body: impl FnOnce(&mut TestRunner) -> Result<(), String>) -> Result<(), String> {
    body(&mut TestRunner::new(Config {
        cases,
        failure_persistence: None,
        ..Config::default()
    }))
}

fn criterion_1() -> Outcome {
    for (count, total, expected) in [(69, 151, "45.70 (69/151)"), (16, 25, "64.00 (16/25)"), (14, 25, "56.00 (14/25)")] {
        let shown = Ratio::new(count, total).map_err(|e| e.to_string())?.to_string();
        ensure(shown == expected, format!("{count}/{total} shown as {shown}"))?;
    }
    Ok("45.70 (69/151), 64.00 (16/25), 56.00 (14/25)".into())
}

/// Per-program speedups over clang -O3 reported for the 16 solved L2 tasks.
const REPORTED_SPEEDUPS: [f64; 16] = [
    3.2485, 2.0621, 1.9954, 1.1048, 1.0852, 1.0543, 1.0288, 1.0278, 1.0277, 1.0275, 1.0274, 1.0253, 1.0247,
    1.0224, 0.8621, 0.7924,
];

fn criterion_2() -> Outcome {
    proptest(256, |runner| {
        runner
            .run(&(1e-6f64..1e3), |r| {
                for expected in [3.2485, 0.8621] {
                    let s = speedup(r * expected, r).unwrap();
                    prop_assert!((s - expected).abs() < 1e-9, "speedup({}, {r}) = {s}", r * expected);
                }
                Ok(())
            })
            .map_err(|e| e.to_string())
    })?;
    let mean = REPORTED_SPEEDUPS.iter().sum::<f64>() / REPORTED_SPEEDUPS.len() as f64;
    ensure((mean - 1.28).abs() <= 0.005, format!("mean speedup {mean:.4}"))?;
    let max = REPORTED_SPEEDUPS.iter().cloned().fold(f64::MIN, f64::max);
    ensure((max - 3.25).abs() < 0.005, format!("max speedup {max}"))?;
    Ok(format!("ratios exact; mean of 16 = {mean:.4}"))
}

/// Replays prescribed wall times in order.
struct StubRunner {
    times: Vec<Duration>,
    next: std::sync::Mutex<usize>,
}

impl Runner for StubRunner {
    fn run_path(&self, _: &Path, limits: &ExecutionLimits) -> Result<RunResult, ExecError> {
        let mut i = self.next.lock().unwrap();
        let wall_time = self.times[*i];
        *i += 1;
        Ok(RunResult {
            stdout: Vec::new(),
            stderr: Vec::new(),
            exit_code: 0,
            signal: None,
            wall_time,
            timeout: limits.wall_timeout,
            timed_out: false,
            crashed: false,
            output_truncated: false,
        })
    }
}

/// Rank-counting median of runs 4..=8, independent of any sort.
fn oracle_median(runs: &[u64]) -> u64 {
    let kept = &runs[3..8];
    *kept
        .iter()
        .find(|&&x| {
            let below = kept.iter().filter(|&&y| y < x).count();
            let at_most = kept.iter().filter(|&&y| y <= x).count();
            below <= 2 && at_most >= 3
        })
        .unwrap()
}

fn criterion_3() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let limits = ExecutionLimits::new(Duration::from_secs(1), dir.path());
    let held = ExclusiveExecution::acquire(None).map_err(|e| e.to_string())?;
    let runs = prop::collection::vec(1u64..1_000_000, 11);
    proptest(1000, |runner| {
        runner
            .run(&(runs, any::<u64>()), |(runs, shuffle)| {
                let stub = StubRunner {
                    times: runs.iter().map(|&n| Duration::from_nanos(n)).collect(),
                    next: std::sync::Mutex::new(0),
                };
                let series = measure(&stub, &held, Path::new("stub"), &limits, 11).unwrap();
                let median = median_protocol(&series).unwrap();
                prop_assert_eq!(median, Duration::from_nanos(oracle_median(&runs)));

                // Rotating the discarded warm-up and tail runs among
                // themselves leaves the result unchanged.
                let mut permuted = runs.clone();
                let mut outer: Vec<u64> = permuted[..3].iter().chain(&permuted[8..]).copied().collect();
                let k = (shuffle % outer.len() as u64) as usize;
                outer.rotate_left(k);
                if shuffle & (1 << 63) != 0 {
                    outer.reverse();
                }
                permuted[..3].copy_from_slice(&outer[..3]);
                permuted[8..].copy_from_slice(&outer[3..]);
                let other = TimingSeries::new(permuted.iter().map(|&n| Duration::from_nanos(n)).collect());
                prop_assert_eq!(median_protocol(&other).unwrap(), median);
                Ok(())
            })
            .map_err(|e| e.to_string())
    })?;
    ensure(median_protocol(&TimingSeries::new(vec![Duration::from_nanos(1); 10])).is_err(), "10 runs accepted")?;
    Ok("1000 cases".into())
}

fn criterion_4() -> Outcome {
    let t = task("l1_add");
    let root = init_prompt_store(BASELINE_PROMPT).map_err(|e| e.to_string())?;
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let scenario = (0usize..=4).prop_flat_map(|max| (Just(max), prop::collection::vec(any::<bool>(), max + 1)));
    proptest(500, |runner| {
        runner
            .run(&scenario, |(max, correct)| {
                let mut script = ReplayScript::new();
                let mut backend = ScriptedBackend::new();
                for (i, &ok) in correct.iter().enumerate() {
                    let asm = format!("add_mul:\n\t# attempt {i}\n\tret");
                    script.push("l1_add/gen", None, wrap_in_assembly_fence(&asm));
                    if ok {
                        backend.correct(&asm, None);
                    }
                }
                let gateway = Gateway::from_replay(script);
                let ctx = PipelineContext::new(&gateway, &backend, ArchTarget::X86_64_NATIVE);
                let config = PipelineConfig::new(max, ExecutionLimits::new(Duration::from_secs(1), dir.path()));
                let outcome = neural_compile(&ctx, &t, &root, &config).unwrap();
                let trace = &outcome.generation_trace;
                let first_ok = correct.iter().position(|&c| c);
                prop_assert!(trace.rounds_used <= max);
                prop_assert_eq!(trace.resolved, first_ok.is_some());
                prop_assert_eq!(outcome.correct, first_ok.is_some());
                prop_assert_eq!(trace.rounds_used, first_ok.unwrap_or(max));
                prop_assert_eq!(trace.attempts.len(), trace.rounds_used + 1);
                Ok(())
            })
            .map_err(|e| e.to_string())
    })?;
    Ok("500 scenarios".into())
}

fn criterion_5() -> Outcome {
    let config = suite("micro/eval.toml");
    let mut reports = Vec::new();
    for _ in 0..3 {
        let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
        let stdout = cli(&["eval", "-c", config.to_str().unwrap()], dir.path())?;
        ensure(stdout.contains("75.00 (3/4)"), format!("table lacks 75.00 (3/4):\n{stdout}"))?;
        reports.push(fs::read(dir.path().join("reports/test.json")).map_err(|e| e.to_string())?);
    }
    ensure(reports.windows(2).all(|w| w[0] == w[1]), "reports differ between runs")?;
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    fs::write(dir.path().join("test.json"), &reports[0]).map_err(|e| e.to_string())?;
    let stored = load_report(&dir.path().join("test.json")).map_err(|e| e.to_string())?;
    ensure(stored.acc_display() == "75.00 (3/4)", format!("stored report shows {}", stored.acc_display()))?;
    Ok("3 identical reports, 75.00 (3/4)".into())
}

fn criterion_6() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    cli(&["eval", "-c", suite("pair/eval.toml").to_str().unwrap()], dir.path())?;
    let report = load_report(&dir.path().join("reports/test.json")).map_err(|e| e.to_string())?;
    ensure(report.acc_display() == "100.00 (2/2)", format!("clean pair: {}", report.acc_display()))?;

    let corrupt = tempfile::tempdir().map_err(|e| e.to_string())?;
    cli(&["eval", "-c", suite("pair/eval_corrupt.toml").to_str().unwrap()], corrupt.path())?;
    let raw = fs::read_to_string(corrupt.path().join("outcomes/test.json")).map_err(|e| e.to_string())?;
    let outcomes: Vec<TaskOutcome> = serde_json::from_str(&raw).map_err(|e| e.to_string())?;
    let add = outcomes.iter().find(|o| o.task_id == "l1_add").ok_or("no l1_add outcome")?;
    let verdict = &add.generation_trace.attempts[0].verdict;
    ensure(verdict.status == VerdictStatus::WrongOutput, format!("corrupt l1_add: {:?}", verdict.status))?;
    let excerpt = verdict.diagnostics.as_ref().map(|d| d.excerpt.as_str()).unwrap_or_default();
    ensure(excerpt.contains("first divergence at line"), format!("no divergence diagnostic: {excerpt}"))?;
    ensure(!add.correct, "corrupt l1_add counted as correct")?;
    Ok("100.00 (2/2); corruption gives WrongOutput".into())
}

fn trace(task_id: &str, outcomes: &[bool]) -> SelfDebugTrace {
    let attempts: Vec<Attempt> = outcomes
        .iter()
        .enumerate()
        .map(|(index, &pass)| Attempt {
            index,
            kind: if index == 0 { AttemptKind::Initial } else { AttemptKind::DebugFix },
            request_digest: format!("r{index}"),
            asm_text: Some(format!("{task_id}:\n\t# {index}\n\tret")),
            verdict: if pass {
                Verdict::pass()
            } else {
                Verdict::fail(FailureDiagnostics::new(FailureStage::WrongOutput, "first divergence at line 1", None))
            },
            feedback_sent: None,
        })
        .collect();
    SelfDebugTrace {
        task_id: task_id.into(),
        stage: TraceStage::Generation,
        rounds_used: attempts.len() - 1,
        resolved: outcomes.last() == Some(&true),
        attempts,
    }
}

fn criterion_7() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    cli(&["learn", "-c", suite("learn/learn.toml").to_str().unwrap()], dir.path())?;
    let store = PromptStore::open(&dir.path().join("learn/store")).map_err(|e| e.to_string())?;
    let versions = store.versions();
    ensure(versions.len() >= 3, format!("only {} versions", versions.len()))?;
    for v in &versions[1..] {
        let parent = store.get(v.parent_id.as_deref().ok_or("child without parent")?).ok_or("unknown parent")?;
        let mut text = parent.text.clone();
        for edit in v.confirmed_edits() {
            text = apply_to_text(&text, edit).map_err(|e| e.to_string())?;
        }
        ensure(text == v.text, format!("changelog of {} does not replay", v.short_id()))?;
    }

    // Only resolved traces that needed at least one repair are kept, in
    // batch order.
    let shape = prop::collection::vec((1usize..=4, any::<bool>()), 1..6);
    proptest(200, |runner| {
        runner
            .run(&shape, |tasks| {
                let mut outcomes = Vec::new();
                let mut ids = Vec::new();
                let mut expected = Vec::new();
                for (i, &(attempts, resolved)) in tasks.iter().enumerate() {
                    let id = format!("t{i}");
                    let mut flags = vec![false; attempts];
                    flags[attempts - 1] = resolved;
                    let tr = trace(&id, &flags);
                    if resolved && attempts > 1 {
                        expected.push(id.clone());
                    }
                    outcomes.push(TaskOutcome {
                        task_id: id.clone(),
                        correct: resolved,
                        best_candidate: None,
                        generation_trace: tr,
                        optimization_traces: Vec::new(),
                        perf: None,
                    });
                    ids.push(id);
                }
                outcomes.reverse();
                let signal = collect_signal(&outcomes, &ids, 12_000);
                let kept: Vec<String> = signal.trajectories.iter().map(|t| t.task_id.clone()).collect();
                prop_assert_eq!(kept, expected.clone());
                prop_assert_eq!(signal.is_empty(), expected.is_empty());
                Ok(())
            })
            .map_err(|e| e.to_string())
    })?;
    Ok(format!("{} versions replay; 200 filter cases", versions.len()))
}

fn criterion_8() -> Outcome {
    let responses = suite("learn/responses");
    let read = |name: &str| fs::read_to_string(responses.join(name)).unwrap();
    let good = |id: &str| format!("{id}:\n\tret");
    let bad = |id: &str| format!("{id}:\n\tud2");

    let mut script = ReplayScript::new();
    let mut backend = ScriptedBackend::new();
    for id in ["l1_add", "l1_clamp", "l1_count"] {
        backend.correct(&good(id), None);
    }
    for (batch, id) in [(1, "l1_add"), (2, "l1_clamp")] {
        let conv = format!("learn/e1/b{batch}/{id}/gen");
        script.push(&conv, None, wrap_in_assembly_fence(&bad(id)));
        script.push(&conv, None, wrap_in_assembly_fence(&good(id)));
    }
    script.push("learn/e1/b1/propose", None, read("malformed_propose.txt"));
    script.push("learn/e1/b2/propose", None, read("e1b1_propose.txt"));
    script.push("learn/e1/b2/confirm", None, read("malformed_confirm.txt"));
    script.push("validate/e1/v0/l1_count/gen", None, wrap_in_assembly_fence(&good("l1_count")));

    let gateway = Gateway::from_replay(script);
    let ctx = PipelineContext::new(&gateway, &backend, ArchTarget::X86_64_NATIVE);
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut config = LearnConfig::new(PipelineConfig::new(1, ExecutionLimits::new(Duration::from_secs(1), dir.path())));
    config.epochs = 1;
    config.batch_size = 1;
    let (add, clamp, count) = (task("l1_add"), task("l1_clamp"), task("l1_count"));
    let root = init_prompt_store(BASELINE_PROMPT).map_err(|e| e.to_string())?;
    let outcome = learn(&ctx, &[&add, &clamp], &[&count], root.clone(), &config).map_err(|e| e.to_string())?;

    let results: Vec<BatchResult> = outcome.batches.iter().map(|b| b.result).collect();
    ensure(
        results == [BatchResult::ProposeFailed, BatchResult::ReviewFailed],
        format!("batch results {results:?}"),
    )?;
    ensure(outcome.batches.iter().all(|b| b.version_after == root.version_id), "a batch moved the prompt")?;
    ensure(outcome.store.versions().len() == 1, "malformed responses created a version")?;
    ensure(outcome.selected.text.as_bytes() == BASELINE_PROMPT.as_bytes(), "prompt text changed")?;
    Ok("ProposeFailed then ReviewFailed; prompt unchanged".into())
}

fn criterion_9() -> Outcome {
    let rows = prop::collection::vec((any::<bool>(), prop::option::of(0.01f64..10.0)), 1..40);
    proptest(1000, |runner| {
        runner
            .run(&rows, |rows| {
                let records: Vec<EvalRecord> = rows
                    .iter()
                    .enumerate()
                    .map(|(i, &(correct, s))| {
                        let s = if correct { s } else { None };
                        let superior = s.is_some_and(|s| s > 1.0);
                        EvalRecord::new(format!("t{i}"), correct, superior, 0, s, "v").unwrap()
                    })
                    .collect();
                let acc = compute_acc(&records).unwrap();
                let perf = compute_acc_perf(&records).unwrap();
                prop_assert!(perf.count <= acc.count);
                prop_assert_eq!(acc.count, rows.iter().filter(|r| r.0).count());
                prop_assert_eq!(perf.count, rows.iter().filter(|r| r.0 && r.1.is_some_and(|s| s > 1.0)).count());
                Ok(())
            })
            .map_err(|e| e.to_string())
    })?;
    ensure(EvalRecord::new("x", false, true, 0, None, "v").is_err(), "superior without correct accepted")?;
    ensure(EvalRecord::new("x", false, true, 0, Some(1.5), "v").is_err(), "incorrect with speedup accepted")?;
    Ok("1000 cases; invalid record rejected".into())
}

fn criterion_10() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let tc = Toolchain::new(
        ToolchainConfig {
            work_dir: dir.path().join("emit"),
            ..ToolchainConfig::default()
        },
        ArchTarget::X86_64_NATIVE,
    )
    .map_err(|e| e.to_string())?;
    let asm = tc.emit_assembly(&task("l2_vadd"), "-O3").map_err(|e| e.to_string())?;
    let asm_path = dir.path().join("l2_vadd.O3.s");
    fs::write(&asm_path, asm).map_err(|e| e.to_string())?;
    let stdout = cli(
        &[
            "bench",
            "l2_vadd",
            asm_path.to_str().unwrap(),
            "-c",
            suite("pair/eval.toml").to_str().unwrap(),
        ],
        &dir.path().join("out"),
    )?;
    let value: f64 = stdout
        .strip_prefix("speedup ")
        .and_then(|rest| rest.split_whitespace().next())
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| format!("unparsable bench output: {stdout}"))?;
    ensure((0.85..=1.15).contains(&value), format!("speedup {value:.4} outside [0.85, 1.15]"))?;
    Ok(format!("speedup {value:.4}"))
}

fn main() {
    let criteria: [(usize, fn() -> Outcome); 10] = [
        (1, criterion_1),
        (2, criterion_2),
        (3, criterion_3),
        (4, criterion_4),
        (5, criterion_5),
        (6, criterion_6),
        (7, criterion_7),
        (8, criterion_8),
        (9, criterion_9),
        (10, criterion_10),
    ];
    let mut failed = 0;
    for (n, check) in criteria {
        let result = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|panic| {
            let message = panic
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| panic.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {message}"))
        });
        match result {
            Ok(detail) => println!("criterion {n}: PASS ({detail})"),
            Err(detail) => {
                failed += 1;
                println!("criterion {n}: FAIL ({detail})");
            }
        }
    }
    if failed > 0 {
        println!("{failed} of {} criteria failed", criteria.len());
        std::process::exit(1);
    }
}
