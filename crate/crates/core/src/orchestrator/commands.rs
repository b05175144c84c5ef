use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::Serialize;

use super::config::{ExperimentConfig, Overrides};
use super::{ExitStatus, OrchestratorError};
use crate::bench::{median_protocol, PerfComparison, PROTOCOL_RUNS};
use crate::evolve::{
    init_prompt_store, learn, BatchReport, BatchResult, LearnConfig, MetaTemplates, PromptStore, PromptVersion,
    LINEAGE_FILE,
};
use crate::executor::{ProcessRunner, Verdict};
use crate::fixtures::{BASELINE_PROMPT, LEARNED_PROMPT, MINIMAL_PROMPT};
use crate::llm::{ChatClient, Gateway};
use crate::pipeline::{
    compile_each, neural_compile, CandidateBackend, NativeBackend, PipelineConfig, PipelineContext, TaskOutcome,
    TrajectoryLog,
};
use crate::report::{emit_report, AggregateReport, EvalRecord, ReportFormat};
use crate::task::{
    load_manifest, load_split_file, load_task_dir, save_manifest, select_tasks, split_dataset, ArchTarget,
    DatasetManifest, ExecutionMode, Level, SplitAssignment, SplitCounts, TaskSpec, MANIFEST_FILE, META_FILE,
};
use crate::toolchain::Toolchain;

pub const EFFECTIVE_CONFIG_FILE: &str = "effective_config.toml";
pub const SELECTED_PROMPT_FILE: &str = "selected_prompt.txt";

/// A loaded experiment: config, dataset and target.
pub struct Experiment {
    pub config: ExperimentConfig,
    pub manifest: DatasetManifest,
    pub arch: ArchTarget,
}

#[derive(Debug, Clone, PartialEq)]
pub enum BenchResult {
    /// The listing failed verification; nothing was timed.
    Incorrect(Verdict),
    Timed(PerfComparison),
}

#[derive(Debug, Clone)]
pub struct LearnSummary {
    pub selected: PromptVersion,
    pub versions: usize,
    pub batches: Vec<BatchReport>,
    pub selected_path: PathBuf,
}

#[derive(Serialize)]
struct SelectedRecord<'a> {
    version_id: &'a str,
    validation_score: Option<f64>,
    versions: usize,
    config_digest: &'a str,
}

impl Experiment {
    pub fn load(config_path: &Path, overrides: &Overrides) -> Result<Self, OrchestratorError> {
        Self::from_config(ExperimentConfig::load(config_path, overrides)?)
    }

    pub fn from_config(config: ExperimentConfig) -> Result<Self, OrchestratorError> {
        let manifest = load_manifest(&config.manifest_path())?;
        let arch = config.arch_target(manifest.arch);
        Ok(Self { config, manifest, arch })
    }

    pub fn output_dir(&self) -> PathBuf {
        self.config.output_dir()
    }

    /// Removes build products and learning state from earlier runs.
    pub fn clean(&self) -> Result<(), OrchestratorError> {
        let out = self.output_dir();
        for sub in [self.config.toolchain_config().work_dir, out.join("run"), out.join("learn")] {
            match fs::remove_dir_all(&sub) {
                Ok(()) => {}
                Err(e) if e.kind() == std::io::ErrorKind::NotFound => {}
                Err(e) => return Err(OrchestratorError::io(sub)(e)),
            }
        }
        Ok(())
    }

    /// Echoes the effective config into the output directory.
    pub fn write_effective_config(&self) -> Result<PathBuf, OrchestratorError> {
        let out = self.output_dir();
        fs::create_dir_all(&out).map_err(OrchestratorError::io(&out))?;
        let path = out.join(EFFECTIVE_CONFIG_FILE);
        let body = format!("# config digest: {}\n{}", self.config.digest(), self.config.to_toml());
        fs::write(&path, body).map_err(OrchestratorError::io(&path))?;
        Ok(path)
    }

    pub fn split(&self) -> Result<SplitAssignment, OrchestratorError> {
        let s = &self.config.split;
        if let Some(file) = &s.file {
            return Ok(load_split_file(&self.config.resolve(file), &self.manifest)?);
        }
        if s.train.is_none() && s.validation.is_none() && s.test.is_none() {
            return Ok(SplitAssignment {
                train: Vec::new(),
                validation: Vec::new(),
                test: self.manifest.ids().map(String::from).collect(),
            });
        }
        let counts = SplitCounts::new(
            s.train.unwrap_or(0),
            s.validation.unwrap_or(0),
            s.test.unwrap_or(0),
        );
        Ok(split_dataset(&self.manifest, counts, s.seed)?)
    }

    /// Tasks of a named split; `all` is the whole manifest.
    pub fn tasks_in(&self, split_name: &str) -> Result<Vec<&TaskSpec>, OrchestratorError> {
        if split_name == "all" {
            return Ok(self.manifest.tasks.iter().collect());
        }
        let split = self.split()?;
        let ids = split
            .get(split_name)
            .ok_or_else(|| OrchestratorError::Usage(format!("unknown split `{split_name}` (train, validation, test, all)")))?;
        Ok(select_tasks(&self.manifest, ids)?)
    }

    pub fn task(&self, id: &str) -> Result<&TaskSpec, OrchestratorError> {
        self.manifest
            .task(id)
            .ok_or_else(|| OrchestratorError::Usage(format!("no task `{id}` in {}", self.config.manifest_path().display())))
    }

    /// Resolves a prompt source: `baseline`, `learned`, `minimal`,
    /// `file:PATH` or `store:ID` (a version in this experiment's store).
    pub fn prompt(&self, source: &str) -> Result<PromptVersion, OrchestratorError> {
        let text = match source {
            "baseline" => BASELINE_PROMPT.to_string(),
            "learned" => LEARNED_PROMPT.to_string(),
            "minimal" => MINIMAL_PROMPT.to_string(),
            _ => {
                if let Some(path) = source.strip_prefix("file:") {
                    let path = self.config.resolve(Path::new(path));
                    fs::read_to_string(&path).map_err(OrchestratorError::io(path))?
                } else if let Some(id) = source.strip_prefix("store:") {
                    let store = PromptStore::open(&self.store_dir())?;
                    return Ok(store.resolve(id)?.clone());
                } else {
                    return Err(OrchestratorError::Usage(format!(
                        "unknown prompt source `{source}` (baseline, learned, minimal, file:PATH, store:ID)"
                    )));
                }
            }
        };
        Ok(init_prompt_store(&text)?)
    }

    pub fn store_dir(&self) -> PathBuf {
        self.output_dir().join("learn").join("store")
    }

    pub fn pipeline_config(&self, level: Level) -> PipelineConfig {
        self.config.pipeline_config(level, self.arch.name)
    }

    pub fn gateway(&self) -> Result<Gateway, OrchestratorError> {
        Ok(Gateway::from_config(&self.config.provider_config())?)
    }

    pub fn native_backend(&self) -> Result<NativeBackend, OrchestratorError> {
        let exec = &self.config.execution;
        if self.arch.execution_mode == ExecutionMode::Emulated && exec.emulator.is_empty() {
            return Err(OrchestratorError::Usage(format!(
                "{} runs emulated on this host; set execution.emulator",
                self.arch.name
            )));
        }
        let toolchain = Toolchain::new(self.config.toolchain_config(), self.arch)?;
        let runner = ProcessRunner {
            emulator: exec.emulator.clone(),
            cpu_affinity: exec.cpu_affinity,
        };
        let mut backend =
            NativeBackend::new(toolchain, Arc::new(runner)).with_timing_dir(self.output_dir().join("timings"));
        if let Some(lock) = &exec.lock_file {
            backend = backend.with_lock_file(self.config.resolve(lock));
        }
        Ok(backend)
    }

    fn trajectory_log(&self, command: &str) -> Result<TrajectoryLog, OrchestratorError> {
        Ok(TrajectoryLog::open(
            self.output_dir().join("trajectories").join(format!("{command}.jsonl")),
        )?)
    }

    fn write_json<T: Serialize>(&self, rel: &Path, value: &T) -> Result<PathBuf, OrchestratorError> {
        let path = self.output_dir().join(rel);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(OrchestratorError::io(parent))?;
        }
        let mut body = serde_json::to_string_pretty(value).expect("value serializes");
        body.push('\n');
        fs::write(&path, body).map_err(OrchestratorError::io(&path))?;
        Ok(path)
    }

    /// Compiles one task with the configured prompt.
    pub fn compile_with(
        &self,
        client: &dyn ChatClient,
        backend: &dyn CandidateBackend,
        task_id: &str,
    ) -> Result<TaskOutcome, OrchestratorError> {
        let task = self.task(task_id)?;
        let prompt = self.prompt(&self.config.prompt)?;
        let log = self.trajectory_log("compile")?;
        let ctx = PipelineContext::new(client, backend, self.arch).with_log(&log);
        let outcome = neural_compile(&ctx, task, &prompt, &self.pipeline_config(task.level))?;
        self.write_json(&PathBuf::from("outcomes").join(format!("compile-{task_id}.json")), &outcome)?;
        Ok(outcome)
    }

    /// Runs the full workflow on every task of `split_name` and writes the
    /// report. Tasks whose oracle is unusable are listed as excluded.
    pub fn eval_with(
        &self,
        client: &dyn ChatClient,
        backend: &dyn CandidateBackend,
        split_name: &str,
    ) -> Result<AggregateReport, OrchestratorError> {
        let tasks = self.tasks_in(split_name)?;
        if tasks.is_empty() {
            return Err(OrchestratorError::Usage(format!("split `{split_name}` is empty")));
        }
        let prompt = self.prompt(&self.config.prompt)?;
        let log = self.trajectory_log("eval")?;
        let ctx = PipelineContext::new(client, backend, self.arch).with_log(&log);
        let configs = [self.pipeline_config(Level::L1), self.pipeline_config(Level::L2)];
        let config_for = |t: &TaskSpec| match t.level {
            Level::L1 => &configs[0],
            Level::L2 => &configs[1],
        };
        let results = compile_each(&ctx, &tasks, &prompt, &config_for, self.config.jobs);

        let mut outcomes = Vec::with_capacity(tasks.len());
        let mut excluded = Vec::new();
        for (task, result) in tasks.iter().zip(results) {
            match result {
                Ok(o) => outcomes.push(o),
                Err(e) if e.is_task_local() => {
                    tracing::warn!(task = %task.id, "excluded from the report: {e}");
                    excluded.push(task.id.clone());
                }
                Err(e) => return Err(e.into()),
            }
        }
        self.write_json(&PathBuf::from("outcomes").join(format!("{split_name}.json")), &outcomes)?;
        let records = outcomes
            .iter()
            .map(|o| EvalRecord::from_outcome(o, prompt.short_id()))
            .collect::<Result<Vec<_>, _>>()?;
        let with_perf = tasks.iter().any(|t| self.config.perf_enabled(t.level));
        let report = AggregateReport::build(records, with_perf, self.config.digest())?.with_excluded(excluded);
        emit_report(
            &report,
            &[ReportFormat::Table, ReportFormat::Structured],
            &self.output_dir().join("reports"),
            split_name,
        )?;
        Ok(report)
    }

    /// Evolves the root prompt over the train split and writes the selected
    /// prompt next to the store.
    pub fn learn_with(
        &self,
        client: &dyn ChatClient,
        backend: &dyn CandidateBackend,
        resume: bool,
    ) -> Result<LearnSummary, OrchestratorError> {
        let train = self.tasks_in("train")?;
        let validation = self.tasks_in("validation")?;
        if train.is_empty() || validation.is_empty() {
            return Err(OrchestratorError::Usage(
                "learning needs non-empty train and validation splits".into(),
            ));
        }
        let level = train[0].level;
        if train.iter().chain(&validation).any(|t| t.level != level) {
            tracing::warn!("mixed task levels; using {level:?} budgets for the whole run");
        }
        let section = &self.config.learn;
        let mut templates = MetaTemplates::default();
        for (slot, path) in [(&mut templates.propose, &section.propose_template), (&mut templates.confirm, &section.confirm_template)] {
            if let Some(p) = path {
                let p = self.config.resolve(p);
                *slot = fs::read_to_string(&p).map_err(OrchestratorError::io(p))?;
            }
        }
        let mut config = LearnConfig::new(self.pipeline_config(level));
        config.epochs = section.epochs;
        config.batch_size = section.batch_size;
        config.token_budget = section.token_budget;
        config.metric = section.metric;
        config.templates = templates;
        config.store_dir = Some(self.store_dir());
        config.resume = resume;
        config.jobs = self.config.jobs;

        let root = self.prompt(&section.root)?;
        let log = self.trajectory_log("learn")?;
        let ctx = PipelineContext::new(client, backend, self.arch).with_log(&log);
        let outcome = learn(&ctx, &train, &validation, root, &config)?;

        let learn_dir = self.output_dir().join("learn");
        let batches_path = learn_dir.join("batches.jsonl");
        let mut batches_file = fs::File::options()
            .create(true)
            .append(true)
            .open(&batches_path)
            .map_err(OrchestratorError::io(&batches_path))?;
        for b in &outcome.batches {
            let line = serde_json::to_string(b).expect("batch report serializes");
            writeln!(batches_file, "{line}").map_err(OrchestratorError::io(&batches_path))?;
        }
        let versions = outcome.store.versions().len();
        if versions == 1 {
            tracing::warn!("no batch produced a prompt update; the selected prompt is the root");
        }
        let selected_path = learn_dir.join(SELECTED_PROMPT_FILE);
        outcome.store.export(&outcome.selected.version_id, &selected_path)?;
        self.write_json(
            Path::new("learn/selected.json"),
            &SelectedRecord {
                version_id: &outcome.selected.version_id,
                validation_score: outcome.selected.validation_score,
                versions,
                config_digest: &self.config.digest(),
            },
        )?;
        Ok(LearnSummary {
            selected: outcome.selected,
            versions,
            batches: outcome.batches,
            selected_path,
        })
    }

    /// Re-verifies `asm` and, only if correct, times it against the
    /// optimized compiler build with the 11-run protocol.
    pub fn bench_with(
        &self,
        backend: &dyn CandidateBackend,
        task_id: &str,
        asm: &str,
    ) -> Result<BenchResult, OrchestratorError> {
        let task = self.task(task_id)?;
        let limits = self.pipeline_config(task.level).limits_for(task);
        backend.prepare(task, &limits)?;
        let verdict = backend.verify(task, asm, "bench", &limits)?;
        if !verdict.is_pass() {
            return Ok(BenchResult::Incorrect(verdict));
        }
        let (candidate, reference) = backend.time_pair(task, asm, "bench", PROTOCOL_RUNS, &limits)?;
        let llm = median_protocol(&candidate).map_err(crate::pipeline::PipelineError::from)?;
        let o3 = median_protocol(&reference).map_err(crate::pipeline::PipelineError::from)?;
        let perf = PerfComparison::new(o3, llm).map_err(crate::pipeline::PipelineError::from)?;
        self.write_json(&PathBuf::from("bench").join(format!("{task_id}.json")), &perf)?;
        Ok(BenchResult::Timed(perf))
    }

    pub fn run_compile(&self, task_id: &str, out: &mut dyn Write) -> Result<ExitStatus, OrchestratorError> {
        self.write_effective_config()?;
        let gateway = self.gateway()?;
        let backend = self.native_backend()?;
        let outcome = self.compile_with(&gateway, &backend, task_id)?;
        let trace = &outcome.generation_trace;
        let mut text = format!(
            "task {task_id}: {}\n{} rounds={}\n",
            if outcome.correct { "correct" } else { "failed" },
            if trace.resolved { "resolved" } else { "unresolved" },
            trace.rounds_used
        );
        if let Some(last) = trace.attempts.last().and_then(|a| a.verdict.diagnostics.as_ref()) {
            if !outcome.correct {
                text.push_str(&format!("last failure ({}):\n{}\n", last.stage.label(), last.excerpt.trim_end()));
            }
        }
        if let Some(perf) = &outcome.perf {
            text.push_str(&format!("speedup {:.4}\n", perf.speedup));
        }
        out.write_all(text.as_bytes()).map_err(OrchestratorError::io("stdout"))?;
        Ok(if outcome.correct {
            ExitStatus::Success
        } else {
            ExitStatus::TaskFailure
        })
    }

    pub fn run_eval(&self, split_name: &str, out: &mut dyn Write) -> Result<ExitStatus, OrchestratorError> {
        self.write_effective_config()?;
        let gateway = self.gateway()?;
        let backend = self.native_backend()?;
        let report = self.eval_with(&gateway, &backend, split_name)?;
        out.write_all(crate::report::render_table(&report).as_bytes())
            .map_err(OrchestratorError::io("stdout"))?;
        Ok(ExitStatus::Success)
    }

    pub fn run_learn(&self, resume: bool, out: &mut dyn Write) -> Result<ExitStatus, OrchestratorError> {
        self.write_effective_config()?;
        let gateway = self.gateway()?;
        let backend = self.native_backend()?;
        let summary = self.learn_with(&gateway, &backend, resume)?;
        let updated = summary.batches.iter().filter(|b| b.result == BatchResult::Updated).count();
        let mut text = format!(
            "selected {} (score {})\nversions {}; {} of {} batches updated the prompt in this run\nprompt written to {}\nlineage in {}\n",
            summary.selected.short_id(),
            summary.selected.validation_score.map_or("-".into(), |s| format!("{s:.4}")),
            summary.versions,
            updated,
            summary.batches.len(),
            summary.selected_path.display(),
            self.store_dir().join(LINEAGE_FILE).display(),
        );
        if summary.versions == 1 {
            text.push_str("warning: no qualifying trajectories produced an update; the selected prompt is the root\n");
        }
        out.write_all(text.as_bytes()).map_err(OrchestratorError::io("stdout"))?;
        Ok(ExitStatus::Success)
    }

    pub fn run_bench(&self, task_id: &str, asm_path: &Path, out: &mut dyn Write) -> Result<ExitStatus, OrchestratorError> {
        self.write_effective_config()?;
        let asm = fs::read_to_string(asm_path).map_err(OrchestratorError::io(asm_path))?;
        let backend = self.native_backend()?;
        let (text, status) = match self.bench_with(&backend, task_id, &asm)? {
            BenchResult::Incorrect(verdict) => {
                let detail = verdict
                    .diagnostics
                    .map(|d| format!("{}: {}", d.stage.label(), d.excerpt.trim_end()))
                    .unwrap_or_default();
                (
                    format!("refusing to time incorrect code ({:?})\n{detail}\n", verdict.status),
                    ExitStatus::TaskFailure,
                )
            }
            BenchResult::Timed(perf) => (
                format!(
                    "speedup {:.4} (-O3 median {} ns, candidate median {} ns, {} runs each)\n",
                    perf.speedup, perf.runtime_o3_ns, perf.runtime_llm_ns, PROTOCOL_RUNS
                ),
                ExitStatus::Success,
            ),
        };
        out.write_all(text.as_bytes()).map_err(OrchestratorError::io("stdout"))?;
        Ok(status)
    }
}

/// Validates a dataset and writes it in canonical layout under `out_dir`.
/// `source` is a manifest file, a directory holding `manifest.toml`, or a
/// directory of task directories (taken in name order).
pub fn ingest(
    source: &Path,
    out_dir: &Path,
    name: Option<&str>,
    arch: Option<ArchTarget>,
) -> Result<DatasetManifest, OrchestratorError> {
    let mut manifest = if source.is_file() {
        load_manifest(source)?
    } else if source.join(MANIFEST_FILE).is_file() {
        load_manifest(&source.join(MANIFEST_FILE))?
    } else {
        let entries = fs::read_dir(source).map_err(OrchestratorError::io(source))?;
        let mut dirs: Vec<PathBuf> = entries
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.join(META_FILE).is_file())
            .collect();
        dirs.sort();
        if dirs.is_empty() {
            return Err(OrchestratorError::Usage(format!(
                "{} holds no manifest and no task directories",
                source.display()
            )));
        }
        let mut tasks = Vec::with_capacity(dirs.len());
        for d in &dirs {
            let task = load_task_dir(d)?;
            if tasks.iter().any(|t: &TaskSpec| t.id == task.id) {
                return Err(OrchestratorError::Usage(format!("duplicate task id `{}`", task.id)));
            }
            tasks.push(task);
        }
        DatasetManifest {
            dataset_name: source
                .file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_else(|| "dataset".into()),
            tasks,
            arch: ArchTarget::X86_64_NATIVE,
        }
    };
    if let Some(name) = name {
        manifest.dataset_name = name.to_string();
    }
    if let Some(arch) = arch {
        manifest.arch = arch;
    }
    save_manifest(&manifest, out_dir)?;
    Ok(manifest)
}
