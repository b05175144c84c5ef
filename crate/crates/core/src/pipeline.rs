//! The neural compilation state machine.
//!
//! Stage 1 asks the model for an initial listing and repairs it with
//! build/run feedback until it passes or the debug budget runs out. A task
//! that fails here is reported as incorrect and never optimized. Stage 2 runs
//! up to `T` optimization rounds, each over the best correct listing so far
//! and each with its own self-debug budget; a round that cannot be repaired
//! is discarded.

use std::collections::HashMap;
use std::fmt;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::bench::{self, median_protocol, plain_median, BenchError, PerfComparison, TimingRecord, TimingSeries};
use crate::digest::sha256_hex;
use crate::evolve::PromptVersion;
use crate::executor::{
    check_correctness, run, ExclusiveExecution, ExecError, ExecutionLimits, RunResult, Runner, Verdict,
};
use crate::llm::{
    debug_feedback, extract_assembly, render_debug_prompt, render_generation_prompt, render_prompt_text,
    target_wording, ChatClient, ChatMessage, ChatRequest, GatewayError, GenerationParams, Role, TemplateError,
    OUTPUT_TEMPLATE_INSTRUCTION,
};
use crate::task::{ArchTarget, TaskSpec};
use crate::toolchain::{CandidateBuild, FailureDiagnostics, FailureStage, Toolchain, ToolchainError};

/// Diagnostic sent back when a response has no fenced assembly block.
pub const NO_ASSEMBLY_BLOCK: &str = "no assembly block found";

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error(transparent)]
    Template(#[from] TemplateError),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Toolchain(#[from] ToolchainError),
    #[error(transparent)]
    Exec(#[from] ExecError),
    #[error(transparent)]
    Bench(#[from] BenchError),
    #[error("task {task_id}: reference is not a valid oracle: {message}")]
    OracleInvalid { task_id: String, message: String },
    #[error("trajectory log {path}: {source}")]
    Log {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl PipelineError {
    /// Errors that exclude a single task rather than the whole run.
    pub fn is_task_local(&self) -> bool {
        matches!(
            self,
            PipelineError::OracleInvalid { .. } | PipelineError::Exec(ExecError::OracleInvalid(_))
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttemptKind {
    Initial,
    DebugFix,
    Optimize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Attempt {
    pub index: usize,
    pub kind: AttemptKind,
    pub request_digest: String,
    /// Absent when no assembly block could be extracted.
    pub asm_text: Option<String>,
    pub verdict: Verdict,
    /// The feedback message that prompted this attempt (debug fixes only).
    pub feedback_sent: Option<String>,
}

/// `generation` or `optimization_round_k` (k from 1).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TraceStage {
    Generation,
    OptimizationRound(usize),
}

impl fmt::Display for TraceStage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TraceStage::Generation => f.write_str("generation"),
            TraceStage::OptimizationRound(k) => write!(f, "optimization_round_{k}"),
        }
    }
}

impl Serialize for TraceStage {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for TraceStage {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let raw = String::deserialize(d)?;
        if raw == "generation" {
            return Ok(TraceStage::Generation);
        }
        raw.strip_prefix("optimization_round_")
            .and_then(|k| k.parse().ok())
            .filter(|&k| k >= 1)
            .map(TraceStage::OptimizationRound)
            .ok_or_else(|| serde::de::Error::custom(format!("unknown trace stage {raw:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SelfDebugTrace {
    pub task_id: String,
    pub stage: TraceStage,
    pub attempts: Vec<Attempt>,
    pub rounds_used: usize,
    pub resolved: bool,
}

impl SelfDebugTrace {
    pub fn final_asm(&self) -> Option<&str> {
        self.attempts.last().and_then(|a| a.asm_text.as_deref())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub max_debug_rounds_generation: usize,
    pub max_debug_rounds_optimization: usize,
    pub optimization_rounds: usize,
    pub measure_each_round: bool,
    /// Per-task timeouts from the task metadata override `wall_timeout`.
    pub limits: ExecutionLimits,
    /// Restart each repair from the original prompt and the last attempt
    /// instead of carrying the whole conversation.
    #[serde(default)]
    pub fresh_context: bool,
    /// Cheap k-run screening of candidates; the final best is re-timed with
    /// the full protocol.
    #[serde(default)]
    pub screening_runs: Option<usize>,
    pub generation: GenerationParams,
}

impl PipelineConfig {
    pub fn new(max_debug_rounds: usize, limits: ExecutionLimits) -> Self {
        Self {
            max_debug_rounds_generation: max_debug_rounds,
            max_debug_rounds_optimization: max_debug_rounds,
            optimization_rounds: 0,
            measure_each_round: false,
            limits,
            fresh_context: false,
            screening_runs: None,
            generation: GenerationParams::default(),
        }
    }

    pub fn limits_for(&self, task: &TaskSpec) -> ExecutionLimits {
        ExecutionLimits {
            wall_timeout: task.timeout,
            ..self.limits.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BestCandidate {
    pub asm_text: String,
    /// `generation` or `optimization_round_k`.
    pub source: TraceStage,
    pub median_runtime_ns: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskOutcome {
    pub task_id: String,
    pub correct: bool,
    pub best_candidate: Option<BestCandidate>,
    pub generation_trace: SelfDebugTrace,
    pub optimization_traces: Vec<SelfDebugTrace>,
    pub perf: Option<PerfComparison>,
}

/// Builds, runs and times candidate listings for one architecture.
pub trait CandidateBackend: Send + Sync {
    /// Builds and validates the reference oracle for `task`.
    fn prepare(&self, task: &TaskSpec, limits: &ExecutionLimits) -> Result<(), PipelineError>;
    /// Assembles, links, runs and checks a listing against the reference.
    fn verify(&self, task: &TaskSpec, asm: &str, label: &str, limits: &ExecutionLimits)
        -> Result<Verdict, PipelineError>;
    /// Times a listing previously verified under `label`.
    fn time_candidate(
        &self,
        task: &TaskSpec,
        asm: &str,
        label: &str,
        runs: usize,
        limits: &ExecutionLimits,
    ) -> Result<TimingSeries, PipelineError>;
    /// Times the optimized compiler baseline.
    fn time_reference(&self, task: &TaskSpec, runs: usize, limits: &ExecutionLimits)
        -> Result<TimingSeries, PipelineError>;
    /// Times a verified listing and the baseline for a head-to-head
    /// comparison, returning `(candidate, reference)`.
    fn time_pair(
        &self,
        task: &TaskSpec,
        asm: &str,
        label: &str,
        runs: usize,
        limits: &ExecutionLimits,
    ) -> Result<(TimingSeries, TimingSeries), PipelineError> {
        Ok((
            self.time_candidate(task, asm, label, runs, limits)?,
            self.time_reference(task, runs, limits)?,
        ))
    }
}

/// Real toolchain and process execution.
pub struct NativeBackend {
    toolchain: Toolchain,
    runner: Arc<dyn Runner>,
    lock_file: Option<PathBuf>,
    /// Directory for timing records; `None` disables them.
    timing_dir: Option<PathBuf>,
    references: Mutex<HashMap<String, RunResult>>,
    builds: Mutex<HashMap<(String, String), PathBuf>>,
}

impl NativeBackend {
    pub fn new(toolchain: Toolchain, runner: Arc<dyn Runner>) -> Self {
        Self {
            toolchain,
            runner,
            lock_file: None,
            timing_dir: None,
            references: Mutex::new(HashMap::new()),
            builds: Mutex::new(HashMap::new()),
        }
    }

    pub fn with_lock_file(mut self, path: impl Into<PathBuf>) -> Self {
        self.lock_file = Some(path.into());
        self
    }

    pub fn with_timing_dir(mut self, dir: impl Into<PathBuf>) -> Self {
        self.timing_dir = Some(dir.into());
        self
    }

    pub fn toolchain(&self) -> &Toolchain {
        &self.toolchain
    }

    fn reference_run(&self, task: &TaskSpec) -> Option<RunResult> {
        self.references.lock().expect("reference map poisoned").get(&task.id).cloned()
    }

    fn time(&self, task: &TaskSpec, label: &str, exe: &Path, runs: usize, limits: &ExecutionLimits)
        -> Result<TimingSeries, PipelineError> {
        let held = ExclusiveExecution::acquire(self.lock_file.as_deref())?;
        let series = bench::measure(self.runner.as_ref(), &held, exe, limits, runs)?;
        drop(held);
        self.record(task, label, &series)?;
        Ok(series)
    }

    fn record(&self, task: &TaskSpec, label: &str, series: &TimingSeries) -> Result<(), PipelineError> {
        let Some(dir) = &self.timing_dir else { return Ok(()) };
        let runs = series.runs.len();
        let median = if runs == bench::PROTOCOL_RUNS {
            median_protocol(series)?
        } else {
            plain_median(series).unwrap_or_default()
        };
        let file = dir
            .join(crate::toolchain::sanitize_label(&task.id))
            .join(format!("{}-{runs}.json", crate::toolchain::sanitize_label(label)));
        TimingRecord::new(&task.id, label, series, median).write(&file)?;
        Ok(())
    }

    fn candidate_exe(&self, task: &TaskSpec, asm: &str, label: &str) -> Result<PathBuf, PipelineError> {
        let known = self
            .builds
            .lock()
            .expect("build map poisoned")
            .get(&(task.id.clone(), label.to_string()))
            .cloned();
        match known {
            Some(exe) => Ok(exe),
            None => match self.toolchain.build_candidate(task, asm, label)? {
                CandidateBuild::Built(p) => Ok(p.executable_path),
                CandidateBuild::Failed(diag) => Err(PipelineError::Bench(BenchError::Measurement {
                    index: 1,
                    message: diag.excerpt,
                })),
            },
        }
    }

    fn reference_exe(&self, task: &TaskSpec) -> Result<PathBuf, PipelineError> {
        let opt = self.toolchain.config().opt_level_optimized.clone();
        let product = self.toolchain.build_reference(task, &opt)?.require_success(&task.id, &opt)?;
        Ok(product.executable_path)
    }
}

impl CandidateBackend for NativeBackend {
    fn prepare(&self, task: &TaskSpec, limits: &ExecutionLimits) -> Result<(), PipelineError> {
        if self.reference_run(task).is_some() {
            return Ok(());
        }
        let opt = self.toolchain.config().opt_level_reference.clone();
        let product = self.toolchain.build_reference(task, &opt)?.require_success(&task.id, &opt)?;
        let oracle_err = |message: String| PipelineError::OracleInvalid {
            task_id: task.id.clone(),
            message,
        };
        let first = run(self.runner.as_ref(), &product, limits)?;
        if first.timed_out {
            return Err(oracle_err(format!("reference timed out after {:?}", first.timeout)));
        }
        if first.crashed {
            return Err(oracle_err(format!("reference killed by signal {}", first.signal.unwrap_or(0))));
        }
        if first.output_truncated {
            return Err(oracle_err("reference output exceeds the capture limit".into()));
        }
        let second = run(self.runner.as_ref(), &product, limits)?;
        if second.stdout != first.stdout || second.exit_code != first.exit_code {
            return Err(oracle_err("reference output is not deterministic".into()));
        }
        self.references
            .lock()
            .expect("reference map poisoned")
            .insert(task.id.clone(), first);
        Ok(())
    }

    fn verify(&self, task: &TaskSpec, asm: &str, label: &str, limits: &ExecutionLimits)
        -> Result<Verdict, PipelineError> {
        self.prepare(task, limits)?;
        let reference = self.reference_run(task).expect("prepared");
        let product = match self.toolchain.build_candidate(task, asm, label)? {
            CandidateBuild::Built(product) => product,
            CandidateBuild::Failed(diag) => return Ok(Verdict::fail(diag)),
        };
        let result = run(self.runner.as_ref(), &product, limits)?;
        let verdict = check_correctness(&result, &reference, task.checker)?;
        if verdict.is_pass() {
            self.builds
                .lock()
                .expect("build map poisoned")
                .insert((task.id.clone(), label.to_string()), product.executable_path);
        }
        Ok(verdict)
    }

    fn time_candidate(
        &self,
        task: &TaskSpec,
        asm: &str,
        label: &str,
        runs: usize,
        limits: &ExecutionLimits,
    ) -> Result<TimingSeries, PipelineError> {
        let exe = self.candidate_exe(task, asm, label)?;
        self.time(task, label, &exe, runs, limits)
    }

    fn time_reference(&self, task: &TaskSpec, runs: usize, limits: &ExecutionLimits)
        -> Result<TimingSeries, PipelineError> {
        let exe = self.reference_exe(task)?;
        self.time(task, REFERENCE_LABEL, &exe, runs, limits)
    }

    fn time_pair(
        &self,
        task: &TaskSpec,
        asm: &str,
        label: &str,
        runs: usize,
        limits: &ExecutionLimits,
    ) -> Result<(TimingSeries, TimingSeries), PipelineError> {
        let candidate = self.candidate_exe(task, asm, label)?;
        let reference = self.reference_exe(task)?;
        let held = ExclusiveExecution::acquire(self.lock_file.as_deref())?;
        let (c, r) = bench::measure_pair(self.runner.as_ref(), &held, &candidate, &reference, limits, runs)?;
        drop(held);
        self.record(task, &format!("{label}-paired"), &c)?;
        self.record(task, &format!("{REFERENCE_LABEL}-paired"), &r)?;
        Ok((c, r))
    }
}

const REFERENCE_LABEL: &str = "reference_O3";

/// Canned verdicts and runtimes keyed by listing text, for hermetic tests.
/// Unknown listings fail with a wrong-output verdict.
#[derive(Debug, Clone, Default)]
pub struct ScriptedBackend {
    listings: HashMap<String, (Verdict, Option<Duration>)>,
    reference_runtime: Option<Duration>,
    invalid_oracles: Vec<String>,
}

impl ScriptedBackend {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn correct(&mut self, asm: &str, runtime: Option<Duration>) -> &mut Self {
        self.listings.insert(asm.to_string(), (Verdict::pass(), runtime));
        self
    }

    pub fn failing(&mut self, asm: &str, stage: FailureStage, excerpt: &str) -> &mut Self {
        self.listings
            .insert(asm.to_string(), (Verdict::fail(FailureDiagnostics::new(stage, excerpt, None)), None));
        self
    }

    pub fn reference_runtime(&mut self, runtime: Duration) -> &mut Self {
        self.reference_runtime = Some(runtime);
        self
    }

    pub fn invalid_oracle(&mut self, task_id: &str) -> &mut Self {
        self.invalid_oracles.push(task_id.to_string());
        self
    }

    fn constant(runtime: Duration, runs: usize) -> TimingSeries {
        TimingSeries::new(vec![runtime; runs])
    }
}

impl CandidateBackend for ScriptedBackend {
    fn prepare(&self, task: &TaskSpec, _: &ExecutionLimits) -> Result<(), PipelineError> {
        if self.invalid_oracles.contains(&task.id) {
            return Err(PipelineError::OracleInvalid {
                task_id: task.id.clone(),
                message: "scripted invalid oracle".into(),
            });
        }
        Ok(())
    }

    fn verify(&self, _: &TaskSpec, asm: &str, _: &str, _: &ExecutionLimits) -> Result<Verdict, PipelineError> {
        Ok(self.listings.get(asm).map(|(v, _)| v.clone()).unwrap_or_else(|| {
            Verdict::fail(FailureDiagnostics::new(
                FailureStage::WrongOutput,
                "first divergence at line 1:\n  expected: <scripted>\n  actual:   <unscripted listing>",
                None,
            ))
        }))
    }

    fn time_candidate(&self, _: &TaskSpec, asm: &str, _: &str, runs: usize, _: &ExecutionLimits)
        -> Result<TimingSeries, PipelineError> {
        let runtime = self.listings.get(asm).and_then(|(_, t)| *t).ok_or(BenchError::Measurement {
            index: 1,
            message: "no scripted runtime".into(),
        })?;
        Ok(Self::constant(runtime, runs))
    }

    fn time_reference(&self, _: &TaskSpec, runs: usize, _: &ExecutionLimits) -> Result<TimingSeries, PipelineError> {
        let runtime = self.reference_runtime.ok_or(BenchError::Measurement {
            index: 1,
            message: "no scripted reference runtime".into(),
        })?;
        Ok(Self::constant(runtime, runs))
    }
}

#[derive(Debug, Serialize)]
struct LogRecord<'a> {
    task_id: &'a str,
    stage: TraceStage,
    attempt_index: usize,
    kind: AttemptKind,
    verdict: &'a Verdict,
    request_digest: &'a str,
    asm_digest: Option<String>,
    asm_text: Option<&'a str>,
    feedback_sent: Option<&'a str>,
    timestamp_ms: u128,
}

/// Append-only JSONL log with one record per attempt, flushed on every
/// write so that a crash before the next model call loses nothing.
pub struct TrajectoryLog {
    path: PathBuf,
    file: Mutex<BufWriter<File>>,
}

impl TrajectoryLog {
    pub fn open(path: impl Into<PathBuf>) -> Result<Self, PipelineError> {
        let path = path.into();
        let log_err = |source| PipelineError::Log {
            path: path.display().to_string(),
            source,
        };
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(log_err)?;
        }
        let file = File::options().create(true).append(true).open(&path).map_err(log_err)?;
        Ok(Self {
            path,
            file: Mutex::new(BufWriter::new(file)),
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    fn append(&self, task_id: &str, stage: TraceStage, attempt: &Attempt) -> Result<(), PipelineError> {
        let record = LogRecord {
            task_id,
            stage,
            attempt_index: attempt.index,
            kind: attempt.kind,
            verdict: &attempt.verdict,
            request_digest: &attempt.request_digest,
            asm_digest: attempt.asm_text.as_deref().map(sha256_hex),
            asm_text: attempt.asm_text.as_deref(),
            feedback_sent: attempt.feedback_sent.as_deref(),
            timestamp_ms: SystemTime::now().duration_since(UNIX_EPOCH).unwrap_or_default().as_millis(),
        };
        let mut line = serde_json::to_string(&record).expect("log record serializes");
        line.push('\n');
        let mut file = self.file.lock().expect("trajectory log poisoned");
        file.write_all(line.as_bytes())
            .and_then(|_| file.flush())
            .map_err(|source| PipelineError::Log {
                path: self.path.display().to_string(),
                source,
            })
    }
}

/// Everything a compilation needs besides the task and the prompt.
pub struct PipelineContext<'a> {
    pub client: &'a dyn ChatClient,
    pub backend: &'a dyn CandidateBackend,
    pub arch: ArchTarget,
    pub log: Option<&'a TrajectoryLog>,
    /// Prefix of replay conversation ids, e.g. `learn/e1/`.
    pub scope: String,
}

impl<'a> PipelineContext<'a> {
    pub fn new(client: &'a dyn ChatClient, backend: &'a dyn CandidateBackend, arch: ArchTarget) -> Self {
        Self {
            client,
            backend,
            arch,
            log: None,
            scope: String::new(),
        }
    }

    pub fn with_log(mut self, log: &'a TrajectoryLog) -> Self {
        self.log = Some(log);
        self
    }

    pub fn with_scope(mut self, scope: impl Into<String>) -> Self {
        self.scope = scope.into();
        self
    }

    fn conversation(&self, task: &TaskSpec, stage: TraceStage) -> String {
        match stage {
            TraceStage::Generation => format!("{}{}/gen", self.scope, task.id),
            TraceStage::OptimizationRound(k) => format!("{}{}/opt{k}", self.scope, task.id),
        }
    }
}

/// The opening exchange of a stage: the request sent and the model's reply.
pub struct DebugStart {
    pub messages: Vec<ChatMessage>,
    pub kind: AttemptKind,
    pub request_digest: String,
    pub response: String,
}

fn no_block_verdict() -> Verdict {
    Verdict::fail(FailureDiagnostics::new(FailureStage::Assemble, NO_ASSEMBLY_BLOCK, None))
}

fn ask(
    ctx: &PipelineContext<'_>,
    params: &GenerationParams,
    messages: Vec<ChatMessage>,
    conversation: &str,
) -> Result<(Vec<ChatMessage>, String, String), PipelineError> {
    let request = ChatRequest::new(params, messages)?;
    let digest = request.cache_key();
    let response = ctx.client.complete(&request, conversation)?;
    let mut messages = request.messages;
    messages.push(ChatMessage::assistant(response.content.clone()));
    Ok((messages, digest, response.content))
}

/// Opens a stage with `messages` and repairs the reply until it passes or
/// `max_rounds` debug rounds are spent.
pub fn self_debug_loop(
    ctx: &PipelineContext<'_>,
    task: &TaskSpec,
    stage: TraceStage,
    start: DebugStart,
    max_rounds: usize,
    config: &PipelineConfig,
) -> Result<SelfDebugTrace, PipelineError> {
    let limits = config.limits_for(task);
    let conversation = ctx.conversation(task, stage);
    let mut trace = SelfDebugTrace {
        task_id: task.id.clone(),
        stage,
        attempts: Vec::new(),
        rounds_used: 0,
        resolved: false,
    };
    let DebugStart {
        mut messages,
        mut kind,
        mut request_digest,
        response,
    } = start;
    let mut asm = extract_assembly(&response).ok();
    let mut feedback: Option<String> = None;
    loop {
        let index = trace.attempts.len();
        let verdict = match &asm {
            Some(text) => ctx.backend.verify(task, text, &format!("{stage}-a{index}"), &limits)?,
            None => no_block_verdict(),
        };
        let attempt = Attempt {
            index,
            kind,
            request_digest: request_digest.clone(),
            asm_text: asm.take(),
            verdict,
            feedback_sent: feedback.take(),
        };
        if let Some(log) = ctx.log {
            log.append(&task.id, stage, &attempt)?;
        }
        let passed = attempt.verdict.is_pass();
        let diagnostics = attempt.verdict.diagnostics.clone();
        trace.attempts.push(attempt);
        if passed || trace.rounds_used >= max_rounds {
            trace.resolved = passed;
            return Ok(trace);
        }
        let diagnostics = diagnostics.expect("failing verdicts carry diagnostics");
        let next = if config.fresh_context {
            let first_user = messages.iter().find(|m| m.role == Role::User).cloned();
            let last_reply = messages.iter().rev().find(|m| m.role == Role::Assistant).cloned();
            let base: Vec<ChatMessage> = first_user.into_iter().chain(last_reply).collect();
            render_debug_prompt(&base, &diagnostics)?
        } else {
            render_debug_prompt(&messages, &diagnostics)?
        };
        let (continued, digest, reply) = ask(ctx, &config.generation, next, &conversation)?;
        messages = continued;
        request_digest = digest;
        asm = extract_assembly(&reply).ok();
        kind = AttemptKind::DebugFix;
        feedback = Some(debug_feedback(&diagnostics));
        trace.rounds_used += 1;
    }
}

/// Asks for a faster, functionally identical rewrite of a verified listing.
pub fn render_optimization_prompt(
    prompt: &PromptVersion,
    task: &TaskSpec,
    current_asm: &str,
    arch: ArchTarget,
) -> Result<Vec<ChatMessage>, TemplateError> {
    if current_asm.trim().is_empty() {
        return Err(TemplateError::EmptyInput("current assembly"));
    }
    let guidance = render_prompt_text(&prompt.text, &task.ir_text, arch)?;
    let asm = current_asm.strip_suffix('\n').unwrap_or(current_asm);
    Ok(vec![ChatMessage::user(format!(
        "{guidance}\n\nThe following {target} is a verified-correct translation of the IR above:\n```assembly\n{asm}\n```\n\nOptimize it for execution speed. The optimized code must be functionally identical: it must produce exactly the same output and exit status as the given code. Keep following every rule above. {OUTPUT_TEMPLATE_INSTRUCTION}",
        target = target_wording(arch),
    ))])
}

struct Eligible {
    asm: String,
    label: String,
    source: TraceStage,
    median: Option<Duration>,
}

fn measure_candidate(
    ctx: &PipelineContext<'_>,
    task: &TaskSpec,
    config: &PipelineConfig,
    candidate: &Eligible,
) -> Option<Duration> {
    let limits = config.limits_for(task);
    let runs = config.screening_runs.unwrap_or(bench::PROTOCOL_RUNS);
    let measured = ctx
        .backend
        .time_candidate(task, &candidate.asm, &candidate.label, runs, &limits)
        .and_then(|series| {
            if config.screening_runs.is_some() {
                Ok(plain_median(&series).unwrap_or_default())
            } else {
                Ok(median_protocol(&series)?)
            }
        });
    match measured {
        Ok(median) => Some(median),
        Err(e) => {
            tracing::warn!(task = %task.id, label = %candidate.label, "candidate excluded from selection: {e}");
            None
        }
    }
}

/// Index of the fastest measured candidate; the earliest wins ties. Falls
/// back to the latest candidate when nothing was measured.
fn select_candidate(candidates: &[Eligible]) -> usize {
    let mut best: Option<(usize, Duration)> = None;
    for (i, c) in candidates.iter().enumerate() {
        if let Some(m) = c.median {
            if best.is_none_or(|(_, b)| m < b) {
                best = Some((i, m));
            }
        }
    }
    best.map_or(candidates.len() - 1, |(i, _)| i)
}

/// Compiles one task: generation with self-debug, then optional
/// optimization rounds and performance comparison.
pub fn neural_compile(
    ctx: &PipelineContext<'_>,
    task: &TaskSpec,
    prompt: &PromptVersion,
    config: &PipelineConfig,
) -> Result<TaskOutcome, PipelineError> {
    let limits = config.limits_for(task);
    ctx.backend.prepare(task, &limits)?;

    let stage = TraceStage::Generation;
    let opening = render_generation_prompt(prompt, &task.ir_text, ctx.arch)?;
    let (messages, request_digest, response) =
        ask(ctx, &config.generation, opening, &ctx.conversation(task, stage))?;
    let generation_trace = self_debug_loop(
        ctx,
        task,
        stage,
        DebugStart {
            messages,
            kind: AttemptKind::Initial,
            request_digest,
            response,
        },
        config.max_debug_rounds_generation,
        config,
    )?;
    if !generation_trace.resolved {
        return Ok(TaskOutcome {
            task_id: task.id.clone(),
            correct: false,
            best_candidate: None,
            generation_trace,
            optimization_traces: Vec::new(),
            perf: None,
        });
    }

    let initial = generation_trace.final_asm().expect("resolved trace ends with a listing").to_string();
    let mut candidates = vec![Eligible {
        label: format!("{stage}-a{}", generation_trace.attempts.len() - 1),
        asm: initial,
        source: stage,
        median: None,
    }];
    // Per-round timings only drive selection, so a lone candidate skips them.
    if config.measure_each_round && config.optimization_rounds > 0 {
        candidates[0].median = measure_candidate(ctx, task, config, &candidates[0]);
    }
    let mut best = 0;
    let mut optimization_traces = Vec::with_capacity(config.optimization_rounds);
    for round in 1..=config.optimization_rounds {
        let stage = TraceStage::OptimizationRound(round);
        let opening = render_optimization_prompt(prompt, task, &candidates[best].asm, ctx.arch)?;
        let (messages, request_digest, response) =
            ask(ctx, &config.generation, opening, &ctx.conversation(task, stage))?;
        let trace = self_debug_loop(
            ctx,
            task,
            stage,
            DebugStart {
                messages,
                kind: AttemptKind::Optimize,
                request_digest,
                response,
            },
            config.max_debug_rounds_optimization,
            config,
        )?;
        if trace.resolved {
            let mut candidate = Eligible {
                label: format!("{stage}-a{}", trace.attempts.len() - 1),
                asm: trace.final_asm().expect("resolved").to_string(),
                source: stage,
                median: None,
            };
            if config.measure_each_round {
                candidate.median = measure_candidate(ctx, task, config, &candidate);
            }
            candidates.push(candidate);
            best = select_candidate(&candidates);
        }
        optimization_traces.push(trace);
    }

    // The winner is re-timed head to head with the baseline, interleaved,
    // so both medians come from the same stretch of machine time.
    let mut perf = None;
    if config.measure_each_round {
        let chosen = &candidates[best];
        let paired = ctx
            .backend
            .time_pair(task, &chosen.asm, &chosen.label, bench::PROTOCOL_RUNS, &limits)
            .and_then(|(c, r)| Ok((median_protocol(&c)?, median_protocol(&r)?)));
        match paired {
            Ok((llm, o3)) => {
                candidates[best].median = Some(llm);
                perf = Some(PerfComparison::new(o3, llm)?);
            }
            Err(e) => tracing::warn!(task = %task.id, "final timing failed; no performance comparison: {e}"),
        }
    }
    let chosen = &candidates[best];
    Ok(TaskOutcome {
        task_id: task.id.clone(),
        correct: true,
        best_candidate: Some(BestCandidate {
            asm_text: chosen.asm.clone(),
            source: chosen.source,
            median_runtime_ns: chosen.median.map(|d| d.as_nanos() as u64),
        }),
        generation_trace,
        optimization_traces,
        perf,
    })
}

/// Compiles `tasks` with at most `jobs` running at once; results keep the
/// input order.
pub fn compile_all(
    ctx: &PipelineContext<'_>,
    tasks: &[&TaskSpec],
    prompt: &PromptVersion,
    config: &PipelineConfig,
    jobs: usize,
) -> Vec<Result<TaskOutcome, PipelineError>> {
    compile_each(ctx, tasks, prompt, &|_| config, jobs)
}

/// Like [`compile_all`] with a per-task configuration.
pub fn compile_each<'c>(
    ctx: &PipelineContext<'_>,
    tasks: &[&TaskSpec],
    prompt: &PromptVersion,
    config_for: &(dyn Fn(&TaskSpec) -> &'c PipelineConfig + Sync),
    jobs: usize,
) -> Vec<Result<TaskOutcome, PipelineError>> {
    let jobs = jobs.max(1);
    if jobs == 1 || tasks.len() <= 1 {
        return tasks.iter().map(|t| neural_compile(ctx, t, prompt, config_for(t))).collect();
    }
    let next = std::sync::atomic::AtomicUsize::new(0);
    let slots: Vec<Mutex<Option<Result<TaskOutcome, PipelineError>>>> =
        tasks.iter().map(|_| Mutex::new(None)).collect();
    std::thread::scope(|scope| {
        for _ in 0..jobs.min(tasks.len()) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, std::sync::atomic::Ordering::SeqCst);
                let Some(task) = tasks.get(i) else { break };
                let result = neural_compile(ctx, task, prompt, config_for(task));
                *slots[i].lock().expect("result slot poisoned") = Some(result);
            });
        }
    });
    slots
        .into_iter()
        .map(|s| s.into_inner().expect("result slot poisoned").expect("every task ran"))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures::{BASELINE_PROMPT, LEARNED_PROMPT};
    use crate::llm::{wrap_in_assembly_fence, Gateway, ReplayScript};
    use crate::task::{CheckerMode, Level};
    use proptest::prelude::*;

    fn task() -> TaskSpec {
        TaskSpec {
            id: "t1".into(),
            level: Level::L2,
            ir_text: "define i32 @f() {\n  ret i32 0\n}\n".into(),
            driver_source: "int main(void) { return 0; }\n".into(),
            checker: CheckerMode::StdoutExact,
            seed: None,
            timeout: Duration::from_secs(1),
        }
    }

    fn config(rounds: usize, t: usize, measure: bool) -> PipelineConfig {
        let mut c = PipelineConfig::new(rounds, ExecutionLimits::new(Duration::from_secs(1), "work"));
        c.optimization_rounds = t;
        c.measure_each_round = measure;
        c
    }

    fn script(conversations: &[(&str, &[&str])]) -> Gateway {
        let mut s = ReplayScript::new();
        for (conv, listings) in conversations {
            for l in *listings {
                s.push(conv, None, wrap_in_assembly_fence(l));
            }
        }
        Gateway::from_replay(s)
    }

    fn compile(gateway: &Gateway, backend: &ScriptedBackend, cfg: &PipelineConfig) -> TaskOutcome {
        let ctx = PipelineContext::new(gateway, backend, ArchTarget::X86_64_NATIVE);
        let prompt = PromptVersion::standalone(BASELINE_PROMPT);
        neural_compile(&ctx, &task(), &prompt, cfg).unwrap()
    }

    fn backend() -> ScriptedBackend {
        let mut b = ScriptedBackend::new();
        b.correct("good", Some(Duration::from_millis(10)))
            .correct("fast", Some(Duration::from_millis(4)))
            .correct("slow", Some(Duration::from_millis(30)))
            .failing("bad", FailureStage::WrongOutput, "first divergence at line 1")
            .reference_runtime(Duration::from_millis(8));
        b
    }

    #[test]
    fn first_try_pass_needs_no_rounds() {
        let out = compile(&script(&[("t1/gen", &["good"])]), &backend(), &config(2, 0, false));
        assert!(out.correct);
        assert_eq!(out.generation_trace.attempts.len(), 1);
        assert_eq!(out.generation_trace.rounds_used, 0);
        assert!(out.perf.is_none());
    }

    #[test]
    fn bad_then_good_resolves_in_one_round() {
        let out = compile(&script(&[("t1/gen", &["bad", "good"])]), &backend(), &config(2, 0, false));
        let trace = &out.generation_trace;
        assert!(trace.resolved);
        assert_eq!(trace.rounds_used, 1);
        assert_eq!(trace.attempts[1].kind, AttemptKind::DebugFix);
        assert!(trace.attempts[1].feedback_sent.as_deref().unwrap().contains("wrong_output"));
    }

    #[test]
    fn exhausted_budget_fails_without_optimizing() {
        let out = compile(
            &script(&[("t1/gen", &["bad", "bad", "bad"])]),
            &backend(),
            &config(2, 2, true),
        );
        assert!(!out.correct);
        assert_eq!(out.generation_trace.rounds_used, 2);
        assert!(out.optimization_traces.is_empty());
        assert!(out.best_candidate.is_none());
    }

    #[test]
    fn missing_block_is_a_failed_attempt() {
        let mut s = ReplayScript::new();
        s.push("t1/gen", None, "I cannot help with that.");
        s.push("t1/gen", Some(NO_ASSEMBLY_BLOCK.into()), wrap_in_assembly_fence("good"));
        let out = compile(&Gateway::from_replay(s), &backend(), &config(1, 0, false));
        let first = &out.generation_trace.attempts[0];
        assert!(first.asm_text.is_none());
        assert_eq!(
            first.verdict.diagnostics.as_ref().unwrap().excerpt,
            NO_ASSEMBLY_BLOCK
        );
        assert!(out.correct);
    }

    #[test]
    fn faster_round_becomes_best() {
        let gw = script(&[("t1/gen", &["good"]), ("t1/opt1", &["fast"]), ("t1/opt2", &["slow"])]);
        let out = compile(&gw, &backend(), &config(1, 2, true));
        let best = out.best_candidate.unwrap();
        assert_eq!(best.asm_text, "fast");
        assert_eq!(best.source, TraceStage::OptimizationRound(1));
        let perf = out.perf.unwrap();
        assert!((perf.speedup - 2.0).abs() < 1e-12);
    }

    #[test]
    fn failed_rounds_keep_initial_and_feed_from_it() {
        let gw = script(&[("t1/gen", &["good"]), ("t1/opt1", &["bad", "bad"]), ("t1/opt2", &["bad", "bad"])]);
        let out = compile(&gw, &backend(), &config(1, 2, true));
        assert!(out.correct);
        assert_eq!(out.best_candidate.unwrap().asm_text, "good");
        assert!(out.optimization_traces.iter().all(|t| !t.resolved));
    }

    #[test]
    fn without_measurement_latest_correct_wins() {
        let gw = script(&[("t1/gen", &["good"]), ("t1/opt1", &["slow"])]);
        let out = compile(&gw, &backend(), &config(1, 1, false));
        assert_eq!(out.best_candidate.unwrap().asm_text, "slow");
        assert!(out.perf.is_none());
    }

    #[test]
    fn screening_remeasures_best_with_full_protocol() {
        let gw = script(&[("t1/gen", &["good"]), ("t1/opt1", &["fast"])]);
        let mut cfg = config(1, 1, true);
        cfg.screening_runs = Some(3);
        let out = compile(&gw, &backend(), &cfg);
        assert_eq!(out.best_candidate.unwrap().median_runtime_ns, Some(4_000_000));
    }

    #[test]
    fn invalid_oracle_is_task_local() {
        let mut b = backend();
        b.invalid_oracle("t1");
        let gw = script(&[("t1/gen", &["good"])]);
        let ctx = PipelineContext::new(&gw, &b, ArchTarget::X86_64_NATIVE);
        let err = neural_compile(&ctx, &task(), &PromptVersion::standalone(BASELINE_PROMPT), &config(1, 0, false))
            .unwrap_err();
        assert!(err.is_task_local());
    }

    #[test]
    fn optimization_prompt_embeds_ir_and_asm_once() {
        let t = task();
        let asm = "f:\n\tmovl $0, %eax\n\tret\n";
        let msgs = render_optimization_prompt(
            &PromptVersion::standalone(BASELINE_PROMPT),
            &t,
            asm,
            ArchTarget::X86_64_NATIVE,
        )
        .unwrap();
        assert_eq!(msgs.len(), 1);
        let text = &msgs[0].content;
        assert_eq!(text.matches("define i32 @f()").count(), 1);
        assert_eq!(text.matches("movl $0, %eax").count(), 1);
        let learned =
            render_optimization_prompt(&PromptVersion::standalone(LEARNED_PROMPT), &t, asm, ArchTarget::X86_64_NATIVE)
                .unwrap();
        assert!(learned[0].content.contains("Maintain proper register usage"));
        assert_eq!(
            render_optimization_prompt(&PromptVersion::standalone(BASELINE_PROMPT), &t, " \n", ArchTarget::X86_64_NATIVE),
            Err(TemplateError::EmptyInput("current assembly"))
        );
    }

    #[test]
    fn trajectory_log_has_one_record_per_attempt() {
        let dir = tempfile::tempdir().unwrap();
        let log = TrajectoryLog::open(dir.path().join("traj.jsonl")).unwrap();
        let gw = script(&[("t1/gen", &["bad", "good"])]);
        let b = backend();
        let ctx = PipelineContext::new(&gw, &b, ArchTarget::X86_64_NATIVE).with_log(&log);
        neural_compile(&ctx, &task(), &PromptVersion::standalone(BASELINE_PROMPT), &config(2, 0, false)).unwrap();
        let text = fs::read_to_string(log.path()).unwrap();
        let records: Vec<serde_json::Value> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
        assert_eq!(records.len(), 2);
        assert_eq!(records[0]["stage"], "generation");
        assert_eq!(records[1]["kind"], "debug_fix");
    }

    #[test]
    fn stage_names_round_trip() {
        for stage in [TraceStage::Generation, TraceStage::OptimizationRound(3)] {
            let json = serde_json::to_string(&stage).unwrap();
            assert_eq!(serde_json::from_str::<TraceStage>(&json).unwrap(), stage);
        }
        assert_eq!(TraceStage::OptimizationRound(2).to_string(), "optimization_round_2");
        assert!(serde_json::from_str::<TraceStage>("\"optimization_round_0\"").is_err());
    }

    proptest! {
        #[test]
        fn selection_is_scale_invariant(
            runtimes in prop::collection::vec(1u64..1_000_000, 1..6),
            k in 1u64..50,
        ) {
            let make = |scale: u64| -> Vec<Eligible> {
                runtimes.iter().enumerate().map(|(i, r)| Eligible {
                    asm: i.to_string(),
                    label: i.to_string(),
                    source: TraceStage::Generation,
                    median: Some(Duration::from_nanos(r * scale)),
                }).collect()
            };
            prop_assert_eq!(select_candidate(&make(1)), select_candidate(&make(k)));
        }

        #[test]
        fn optimization_never_changes_correctness(
            opt in prop::collection::vec(prop::sample::select(vec!["bad", "fast", "slow", "good"]), 0..4),
            gen_ok in any::<bool>(),
        ) {
            let first = if gen_ok { "good" } else { "bad" };
            let gen_only = compile(&script(&[("t1/gen", &[first])]), &backend(), &config(0, 0, false));
            let mut convs: Vec<(String, Vec<&str>)> = vec![("t1/gen".into(), vec![first])];
            for (i, l) in opt.iter().enumerate() {
                convs.push((format!("t1/opt{}", i + 1), vec![l]));
            }
            let borrowed: Vec<(&str, &[&str])> = convs.iter().map(|(c, l)| (c.as_str(), l.as_slice())).collect();
            let full = compile(&script(&borrowed), &backend(), &config(0, opt.len(), true));
            prop_assert_eq!(gen_only.correct, full.correct);
            prop_assert_eq!(gen_only.correct, gen_ok);
        }
    }
}
