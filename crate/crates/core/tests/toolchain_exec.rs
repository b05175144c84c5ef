//! Builds and runs the bundled micro-tasks with the host clang.

use std::fs;
use std::path::Path;
use std::time::Duration;

use neucomp_core::executor::{
    check_correctness, run, run_exclusive, ExclusiveExecution, ExecutionLimits, ProcessRunner, RunResult,
    VerdictStatus,
};
use neucomp_core::fixtures::fixtures_dir;
use neucomp_core::task::{load_task_dir, ArchTarget, TaskSpec};
use neucomp_core::toolchain::{CandidateBuild, FailureStage, Toolchain, ToolchainConfig};

fn toolchain(dir: &Path) -> Toolchain {
    let config = ToolchainConfig {
        work_dir: dir.join("work"),
        ..ToolchainConfig::default()
    };
    Toolchain::new(config, ArchTarget::X86_64_NATIVE).unwrap()
}

fn task(id: &str) -> TaskSpec {
    load_task_dir(&fixtures_dir().join("tasks").join(id)).unwrap()
}

fn listing(name: &str) -> String {
    fs::read_to_string(fixtures_dir().join("listings").join(format!("{name}.s"))).unwrap()
}

fn limits(dir: &Path, task: &TaskSpec) -> ExecutionLimits {
    ExecutionLimits::new(task.timeout, dir.join("run"))
}

fn reference(tc: &Toolchain, task: &TaskSpec, limits: &ExecutionLimits) -> RunResult {
    let product = tc.build_reference(task, "-O0").unwrap();
    run(&ProcessRunner::default(), &product, limits).unwrap()
}

fn verdict_for(tc: &Toolchain, task: &TaskSpec, asm: &str, label: &str, limits: &ExecutionLimits) -> (VerdictStatus, String) {
    let expected = reference(tc, task, limits);
    match tc.build_candidate(task, asm, label).unwrap() {
        CandidateBuild::Failed(d) => (neucomp_core::executor::Verdict::fail(d.clone()).status, d.excerpt),
        CandidateBuild::Built(product) => {
            let actual = run(&ProcessRunner::default(), &product, limits).unwrap();
            let v = check_correctness(&actual, &expected, task.checker).unwrap();
            let excerpt = v.diagnostics.map(|d| d.excerpt).unwrap_or_default();
            (v.status, excerpt)
        }
    }
}

#[test]
fn reference_output_is_the_oracle() {
    let dir = tempfile::tempdir().unwrap();
    let tc = toolchain(dir.path());
    let t = task("l1_add");
    let out = reference(&tc, &t, &limits(dir.path(), &t));
    assert!(out.succeeded());
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.lines().count() >= 2, "{text}");
    assert!(text.contains("add_mul(1, 2) = 5"), "{text}");
}

#[test]
fn handwritten_listings_pass() {
    let dir = tempfile::tempdir().unwrap();
    let tc = toolchain(dir.path());
    for (id, name) in [("l1_add", "l1_add"), ("l1_clamp", "l1_clamp"), ("l1_count", "l1_count"), ("l2_vadd", "l2_vadd")] {
        let t = task(id);
        let (status, excerpt) = verdict_for(&tc, &t, &listing(name), name, &limits(dir.path(), &t));
        assert_eq!(status, VerdictStatus::Pass, "{id}: {excerpt}");
    }
}

#[test]
fn one_flipped_instruction_is_wrong_output_with_divergence() {
    let dir = tempfile::tempdir().unwrap();
    let tc = toolchain(dir.path());
    let t = task("l1_add");
    let (status, excerpt) = verdict_for(&tc, &t, &listing("l1_add.corrupt"), "corrupt", &limits(dir.path(), &t));
    assert_eq!(status, VerdictStatus::WrongOutput);
    assert!(excerpt.contains("first divergence at line 2"), "{excerpt}");
    assert!(excerpt.contains("expected: add_mul(1, 2) = 5"), "{excerpt}");
    assert!(excerpt.contains("actual:   add_mul(1, 2) = 1"), "{excerpt}");
}

#[test]
fn assembler_and_linker_failures_carry_tool_output() {
    let dir = tempfile::tempdir().unwrap();
    let tc = toolchain(dir.path());
    let t = task("l1_count");
    match tc.build_candidate(&t, &listing("l1_count.bad_mnemonic"), "bad").unwrap() {
        CandidateBuild::Failed(d) => {
            assert_eq!(d.stage, FailureStage::Assemble);
            assert!(d.excerpt.contains("movq3"), "{}", d.excerpt);
        }
        CandidateBuild::Built(_) => panic!("invalid mnemonic assembled"),
    }
    match tc.build_candidate(&t, &listing("l1_count.missing_symbol"), "missing").unwrap() {
        CandidateBuild::Failed(d) => {
            assert_eq!(d.stage, FailureStage::Link);
            assert!(d.excerpt.contains("count_pos"), "{}", d.excerpt);
        }
        CandidateBuild::Built(_) => panic!("missing symbol linked"),
    }
}

#[test]
fn hanging_and_crashing_candidates() {
    let dir = tempfile::tempdir().unwrap();
    let tc = toolchain(dir.path());
    let t = task("l1_add");
    let short = ExecutionLimits::new(Duration::from_millis(300), dir.path().join("run"));
    let spin = "\t.text\n\t.globl\tadd_mul\n\t.type\tadd_mul, @function\nadd_mul:\n.Lspin:\n\tjmp\t.Lspin\n\t.section\t.note.GNU-stack,\"\",@progbits\n";
    let (status, _) = verdict_for(&tc, &t, spin, "spin", &short);
    assert_eq!(status, VerdictStatus::Timeout);

    let crash = "\t.text\n\t.globl\tadd_mul\n\t.type\tadd_mul, @function\nadd_mul:\n\tmovl\t0, %eax\n\tret\n\t.section\t.note.GNU-stack,\"\",@progbits\n";
    let (status, excerpt) = verdict_for(&tc, &t, crash, "crash", &limits(dir.path(), &t));
    assert_eq!(status, VerdictStatus::RuntimeCrash, "{excerpt}");
}

#[test]
fn optimized_assembly_round_trips_through_the_candidate_path() {
    let dir = tempfile::tempdir().unwrap();
    let tc = toolchain(dir.path());
    for id in ["l1_clamp", "l2_vadd"] {
        let t = task(id);
        let asm = tc.emit_assembly(&t, "-O3").unwrap();
        let (status, excerpt) = verdict_for(&tc, &t, &asm, "o3", &limits(dir.path(), &t));
        assert_eq!(status, VerdictStatus::Pass, "{id}: {excerpt}");
    }
}

#[test]
fn exclusive_runs_see_the_same_output() {
    let dir = tempfile::tempdir().unwrap();
    let tc = toolchain(dir.path());
    let t = task("l1_clamp");
    let l = limits(dir.path(), &t);
    let product = tc.build_reference(&t, "-O3").unwrap();
    let shared = run(&ProcessRunner::default(), &product, &l).unwrap();
    let held = ExclusiveExecution::acquire(Some(&dir.path().join("bench.lock"))).unwrap();
    let exclusive = run_exclusive(&ProcessRunner::default(), &held, &product.executable_path, &l).unwrap();
    assert_eq!(shared.stdout, exclusive.stdout);
}
