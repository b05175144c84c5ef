//! End-to-end evaluation of the bundled suites under the replay provider.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Duration;

use neucomp_core::executor::VerdictStatus;
use neucomp_core::fixtures::fixtures_dir;
use neucomp_core::llm::{wrap_in_assembly_fence, Gateway, ReplayScript};
use neucomp_core::orchestrator::{Experiment, OrchestratorError, Overrides};
use neucomp_core::pipeline::{ScriptedBackend, TaskOutcome};
use neucomp_core::report::load_report;

fn suite(name: &str) -> PathBuf {
    fixtures_dir().join("suites").join(name)
}

fn experiment(config: &Path, out: &Path, overrides: Overrides) -> Experiment {
    Experiment::load(
        config,
        &Overrides {
            output_dir: Some(out.to_path_buf()),
            ..overrides
        },
    )
    .unwrap()
}

#[test]
fn micro_suite_scores_three_of_four_with_real_builds() {
    let dir = tempfile::tempdir().unwrap();
    let exp = experiment(&suite("micro/eval.toml"), dir.path(), Overrides::default());
    let gateway = exp.gateway().unwrap();
    let backend = exp.native_backend().unwrap();
    let report = exp.eval_with(&gateway, &backend, "test").unwrap();
    assert_eq!(report.acc_display(), "75.00 (3/4)");
    assert_eq!(report.acc_perf, None);

    let outcomes: Vec<TaskOutcome> =
        serde_json::from_str(&fs::read_to_string(dir.path().join("outcomes/test.json")).unwrap()).unwrap();
    let by_id = |id: &str| outcomes.iter().find(|o| o.task_id == id).unwrap();
    assert_eq!(by_id("l1_add").generation_trace.rounds_used, 1);
    assert_eq!(by_id("l1_clamp").generation_trace.rounds_used, 0);
    let count = by_id("l1_count");
    assert!(!count.correct);
    let statuses: Vec<VerdictStatus> = count.generation_trace.attempts.iter().map(|a| a.verdict.status).collect();
    assert_eq!(statuses, vec![VerdictStatus::AssembleFail, VerdictStatus::LinkFail]);
    assert_eq!(by_id("l2_vadd").optimization_traces.len(), 2);

    let stored = load_report(&dir.path().join("reports/test.json")).unwrap();
    assert_eq!(stored, report);
    let trajectories = fs::read_to_string(dir.path().join("trajectories/eval.jsonl")).unwrap();
    assert_eq!(trajectories.lines().count(), 2 + 1 + 2 + 3);
}

#[test]
fn parallel_jobs_give_the_same_report() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let run = |out: &Path, jobs| {
        let exp = experiment(
            &suite("micro/eval.toml"),
            out,
            Overrides {
                jobs: Some(jobs),
                ..Overrides::default()
            },
        );
        exp.eval_with(&exp.gateway().unwrap(), &exp.native_backend().unwrap(), "test").unwrap();
        fs::read(out.join("reports/test.json")).unwrap()
    };
    assert_eq!(run(a.path(), 1), run(b.path(), 3));
}

#[test]
fn real_pair_then_corruption_flips_one_verdict() {
    let dir = tempfile::tempdir().unwrap();
    let exp = experiment(&suite("pair/eval_corrupt.toml"), dir.path(), Overrides::default());
    let report = exp.eval_with(&exp.gateway().unwrap(), &exp.native_backend().unwrap(), "test").unwrap();
    assert_eq!(report.acc_display(), "50.00 (1/2)");
    let outcomes: Vec<TaskOutcome> =
        serde_json::from_str(&fs::read_to_string(dir.path().join("outcomes/test.json")).unwrap()).unwrap();
    let verdict = &outcomes[0].generation_trace.attempts[0].verdict;
    assert_eq!(verdict.status, VerdictStatus::WrongOutput);
    assert!(verdict.diagnostics.as_ref().unwrap().excerpt.contains("first divergence at line 2"));
}

fn scripted_suite(dir: &Path, body: &str) -> Experiment {
    let config = dir.join("eval.toml");
    fs::write(
        &config,
        format!(
            "manifest = \"{}\"\noutput_dir = \"out\"\n[provider]\nkind = \"replay\"\nreplay_script = \"{}\"\n{body}",
            suite("micro/manifest.toml").display(),
            suite("micro/replay.toml").display(),
        ),
    )
    .unwrap();
    Experiment::load(&config, &Overrides::default()).unwrap()
}

fn all_correct_script() -> (Gateway, ScriptedBackend) {
    let mut script = ReplayScript::new();
    let mut backend = ScriptedBackend::new();
    for id in ["l1_add", "l1_clamp", "l1_count", "l2_vadd"] {
        let asm = format!("{id}:\n\tret");
        script.push(&format!("{id}/gen"), None, wrap_in_assembly_fence(&asm));
        backend.correct(&asm, Some(Duration::from_micros(100)));
    }
    backend.reference_runtime(Duration::from_micros(150));
    (Gateway::from_replay(script), backend)
}

#[test]
fn l1_only_split_has_no_perf_section() {
    let dir = tempfile::tempdir().unwrap();
    let exp = scripted_suite(dir.path(), "[split]\nfile = \"split.toml\"\n");
    fs::write(
        dir.path().join("split.toml"),
        "train = []\nvalidation = [\"l2_vadd\"]\ntest = [\"l1_add\", \"l1_clamp\", \"l1_count\"]\n",
    )
    .unwrap();
    let (gateway, backend) = all_correct_script();
    let report = exp.eval_with(&gateway, &backend, "test").unwrap();
    assert_eq!(report.acc_display(), "100.00 (3/3)");
    assert!(report.acc_perf.is_none());
    let table = fs::read_to_string(dir.path().join("out/reports/test.txt")).unwrap();
    assert!(!table.contains("ACC+Perf"));
    let json = fs::read_to_string(dir.path().join("out/reports/test.json")).unwrap();
    assert!(!json.contains("acc_perf"));
}

#[test]
fn l2_task_is_timed_against_the_optimized_build() {
    let dir = tempfile::tempdir().unwrap();
    let exp = scripted_suite(dir.path(), "[pipeline]\noptimization_rounds = 0\n");
    let (gateway, backend) = all_correct_script();
    let report = exp.eval_with(&gateway, &backend, "test").unwrap();
    assert_eq!(report.acc_perf_display().as_deref(), Some("25.00 (1/4)"));
    let vadd = report.per_task.iter().find(|r| r.task_id == "l2_vadd").unwrap();
    assert!((vadd.speedup.unwrap() - 1.5).abs() < 1e-9);
}

#[test]
fn broken_oracle_is_excluded_not_counted() {
    let dir = tempfile::tempdir().unwrap();
    let exp = scripted_suite(dir.path(), "[perf]\nenabled = false\n[pipeline]\noptimization_rounds = 0\n");
    let (gateway, mut backend) = all_correct_script();
    backend.invalid_oracle("l1_count");
    let report = exp.eval_with(&gateway, &backend, "test").unwrap();
    assert_eq!(report.acc_display(), "100.00 (3/3)");
    assert_eq!(report.excluded, vec!["l1_count".to_string()]);
}

#[test]
fn empty_split_is_an_operational_error() {
    let dir = tempfile::tempdir().unwrap();
    let exp = scripted_suite(dir.path(), "[split]\ntrain = 4\n");
    let (gateway, backend) = all_correct_script();
    assert!(matches!(exp.eval_with(&gateway, &backend, "test"), Err(OrchestratorError::Usage(_))));
    assert!(matches!(exp.eval_with(&gateway, &backend, "nope"), Err(OrchestratorError::Usage(_))));
}

#[test]
fn exhausted_script_aborts_the_evaluation() {
    let dir = tempfile::tempdir().unwrap();
    let exp = scripted_suite(dir.path(), "");
    let (_, backend) = all_correct_script();
    let empty = Gateway::from_replay(ReplayScript::new());
    assert!(matches!(exp.eval_with(&empty, &backend, "test"), Err(OrchestratorError::Pipeline(_))));
}
