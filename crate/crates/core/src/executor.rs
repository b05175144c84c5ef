//! Bounded execution of built binaries and differential correctness verdicts.
//!
//! Children run with an empty stdin, a scrubbed environment
//! (`PATH=/usr/bin:/bin`, `LC_ALL=C`) and a fresh temporary working
//! directory. Limits are a wall-clock timeout and an output cap; there is
//! no OS-level sandboxing.
//!
//! Correctness runs share a process-wide gate; timed runs hold it exclusively
//! through [`ExclusiveExecution`], which also takes a machine-wide lock file.

use std::fs::{self, File};
use std::io::Read;
use std::os::unix::process::{CommandExt, ExitStatusExt};
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::sync::{RwLock, RwLockReadGuard, RwLockWriteGuard};
use std::thread;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use wait_timeout::ChildExt;

use crate::task::CheckerMode;
use crate::toolchain::{BuildProduct, FailureDiagnostics, FailureStage};

#[derive(Debug, thiserror::Error)]
pub enum ExecError {
    #[error("cannot run {path}: {message}")]
    Spawn { path: PathBuf, message: String },
    #[error("reference run is not a valid oracle: {0}")]
    OracleInvalid(String),
    #[error("cannot acquire exclusive execution lock {path}: {source}")]
    Lock {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExecutionLimits {
    #[serde(with = "duration_ms")]
    pub wall_timeout: Duration,
    pub max_output_bytes: usize,
    /// Parent of the per-run temporary directories.
    pub working_dir: PathBuf,
}

impl ExecutionLimits {
    pub fn new(wall_timeout: Duration, working_dir: impl Into<PathBuf>) -> Self {
        Self {
            wall_timeout,
            max_output_bytes: 1 << 20,
            working_dir: working_dir.into(),
        }
    }
}

pub(crate) mod duration_ms {
    use serde::{Deserialize, Deserializer, Serializer};
    use std::time::Duration;

    pub fn serialize<S: Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_u64(d.as_millis() as u64)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Duration, D::Error> {
        Ok(Duration::from_millis(u64::deserialize(d)?))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunResult {
    pub stdout: Vec<u8>,
    pub stderr: Vec<u8>,
    /// Process exit code; `128 + signal` when killed by a signal.
    pub exit_code: i32,
    pub signal: Option<i32>,
    pub wall_time: Duration,
    pub timeout: Duration,
    pub timed_out: bool,
    pub crashed: bool,
    pub output_truncated: bool,
}

impl RunResult {
    pub fn succeeded(&self) -> bool {
        !self.timed_out && !self.crashed
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum VerdictStatus {
    Pass,
    WrongOutput,
    RuntimeCrash,
    Timeout,
    AssembleFail,
    LinkFail,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Verdict {
    pub status: VerdictStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub diagnostics: Option<FailureDiagnostics>,
}

impl Verdict {
    pub fn pass() -> Self {
        Self {
            status: VerdictStatus::Pass,
            diagnostics: None,
        }
    }

    pub fn is_pass(&self) -> bool {
        self.status == VerdictStatus::Pass
    }

    /// Non-pass verdict; the status follows from the diagnostic stage.
    pub fn fail(diagnostics: FailureDiagnostics) -> Self {
        let status = match diagnostics.stage {
            FailureStage::Assemble => VerdictStatus::AssembleFail,
            FailureStage::Link => VerdictStatus::LinkFail,
            FailureStage::RunCrash => VerdictStatus::RuntimeCrash,
            FailureStage::RunTimeout => VerdictStatus::Timeout,
            FailureStage::WrongOutput => VerdictStatus::WrongOutput,
        };
        Self {
            status,
            diagnostics: Some(diagnostics),
        }
    }
}

/// Launches an executable and reports what it did. Implementations do not
/// touch the execution gate.
pub trait Runner: Send + Sync {
    fn run_path(&self, executable: &Path, limits: &ExecutionLimits) -> Result<RunResult, ExecError>;
}

/// Runs binaries as child processes, optionally behind an emulator prefix
/// (e.g. `qemu-aarch64 -L /usr/aarch64-linux-gnu`) and pinned to one CPU.
#[derive(Debug, Clone, Default)]
pub struct ProcessRunner {
    pub emulator: Vec<String>,
    pub cpu_affinity: Option<usize>,
}

static EXEC_GATE: RwLock<()> = RwLock::new(());

fn shared_gate() -> RwLockReadGuard<'static, ()> {
    EXEC_GATE.read().unwrap_or_else(|e| e.into_inner())
}

/// Proof of exclusive execution: no other run in this process overlaps, and
/// no other holder of the same lock file on this machine.
pub struct ExclusiveExecution {
    _gate: RwLockWriteGuard<'static, ()>,
    _file: Option<File>,
}

impl ExclusiveExecution {
    pub fn acquire(lock_file: Option<&Path>) -> Result<Self, ExecError> {
        let gate = EXEC_GATE.write().unwrap_or_else(|e| e.into_inner());
        let file = match lock_file {
            Some(path) => {
                let lock_err = |source| ExecError::Lock {
                    path: path.to_path_buf(),
                    source,
                };
                if let Some(parent) = path.parent() {
                    fs::create_dir_all(parent).map_err(lock_err)?;
                }
                let file = File::options()
                    .create(true)
                    .truncate(false)
                    .write(true)
                    .open(path)
                    .map_err(lock_err)?;
                file.lock().map_err(|source| ExecError::Lock {
                    path: path.to_path_buf(),
                    source,
                })?;
                Some(file)
            }
            None => None,
        };
        Ok(Self {
            _gate: gate,
            _file: file,
        })
    }
}

/// Runs a successful build under the shared execution gate.
pub fn run(runner: &dyn Runner, executable: &BuildProduct, limits: &ExecutionLimits) -> Result<RunResult, ExecError> {
    if !executable.success {
        return Err(ExecError::Spawn {
            path: executable.executable_path.clone(),
            message: "build did not succeed".into(),
        });
    }
    let _gate = shared_gate();
    runner.run_path(&executable.executable_path, limits)
}

/// Runs while exclusive execution is held by the caller.
pub fn run_exclusive(
    runner: &dyn Runner,
    _held: &ExclusiveExecution,
    executable: &Path,
    limits: &ExecutionLimits,
) -> Result<RunResult, ExecError> {
    runner.run_path(executable, limits)
}

fn capture(mut source: impl Read + Send + 'static, cap: usize) -> thread::JoinHandle<(Vec<u8>, bool)> {
    thread::spawn(move || {
        let mut kept = Vec::new();
        let mut truncated = false;
        let mut chunk = [0u8; 8192];
        loop {
            match source.read(&mut chunk) {
                Ok(0) | Err(_) => break,
                Ok(n) => {
                    let room = cap.saturating_sub(kept.len());
                    if n > room {
                        truncated = true;
                    }
                    kept.extend_from_slice(&chunk[..n.min(room)]);
                }
            }
        }
        (kept, truncated)
    })
}

fn pin_to_cpu(cmd: &mut Command, cpu: usize) {
    // SAFETY: the closure only calls async-signal-safe libc functions
    // between fork and exec.
    unsafe {
        cmd.pre_exec(move || {
            let mut set: libc::cpu_set_t = std::mem::zeroed();
            libc::CPU_ZERO(&mut set);
            libc::CPU_SET(cpu, &mut set);
            if libc::sched_setaffinity(0, std::mem::size_of::<libc::cpu_set_t>(), &set) != 0 {
                return Err(std::io::Error::last_os_error());
            }
            Ok(())
        });
    }
}

impl Runner for ProcessRunner {
    fn run_path(&self, executable: &Path, limits: &ExecutionLimits) -> Result<RunResult, ExecError> {
        let spawn_err = |message: String| ExecError::Spawn {
            path: executable.to_path_buf(),
            message,
        };
        fs::create_dir_all(&limits.working_dir).map_err(|e| spawn_err(e.to_string()))?;
        let scratch = tempfile::Builder::new()
            .prefix("run-")
            .tempdir_in(&limits.working_dir)
            .map_err(|e| spawn_err(e.to_string()))?;
        let executable = fs::canonicalize(executable).map_err(|e| spawn_err(e.to_string()))?;

        let mut cmd = match self.emulator.split_first() {
            Some((program, args)) => {
                let mut c = Command::new(program);
                c.args(args).arg(&executable);
                c
            }
            None => Command::new(&executable),
        };
        cmd.env_clear()
            .env("PATH", "/usr/bin:/bin")
            .env("LC_ALL", "C")
            .current_dir(scratch.path())
            .stdin(Stdio::null())
            .stdout(Stdio::piped())
            .stderr(Stdio::piped());
        if let Some(cpu) = self.cpu_affinity {
            pin_to_cpu(&mut cmd, cpu);
        }

        let start = Instant::now();
        let mut child = cmd.spawn().map_err(|e| spawn_err(e.to_string()))?;
        let out = capture(child.stdout.take().expect("piped stdout"), limits.max_output_bytes);
        let err = capture(child.stderr.take().expect("piped stderr"), limits.max_output_bytes);
        let (status, timed_out) = match child.wait_timeout(limits.wall_timeout) {
            Ok(Some(status)) => (status, false),
            Ok(None) => {
                let _ = child.kill();
                (child.wait().map_err(|e| spawn_err(e.to_string()))?, true)
            }
            Err(e) => return Err(spawn_err(e.to_string())),
        };
        let wall_time = start.elapsed();
        let (stdout, out_trunc) = out.join().unwrap_or_default();
        let (stderr, err_trunc) = err.join().unwrap_or_default();

        let signal = status.signal();
        let exit_code = status.code().unwrap_or_else(|| 128 + signal.unwrap_or(0));
        Ok(RunResult {
            stdout,
            stderr,
            exit_code,
            signal,
            wall_time,
            timeout: limits.wall_timeout,
            timed_out,
            crashed: !timed_out && signal.is_some(),
            output_truncated: out_trunc || err_trunc,
        })
    }
}

fn signal_name(signal: i32) -> &'static str {
    match signal {
        libc::SIGSEGV => "SIGSEGV",
        libc::SIGBUS => "SIGBUS",
        libc::SIGILL => "SIGILL",
        libc::SIGFPE => "SIGFPE",
        libc::SIGABRT => "SIGABRT",
        libc::SIGKILL => "SIGKILL",
        libc::SIGTRAP => "SIGTRAP",
        _ => "signal",
    }
}

fn tail(bytes: &[u8], max: usize) -> String {
    let text = String::from_utf8_lossy(bytes);
    let skip = text.chars().count().saturating_sub(max);
    text.chars().skip(skip).collect()
}

/// Describes the first differing line between two outputs, if any.
pub fn first_divergence(expected: &[u8], actual: &[u8]) -> Option<String> {
    let exp = String::from_utf8_lossy(expected);
    let act = String::from_utf8_lossy(actual);
    let mut exp_lines = exp.lines();
    let mut act_lines = act.lines();
    let mut line_no = 1;
    loop {
        match (exp_lines.next(), act_lines.next()) {
            (None, None) => return None,
            (e, a) if e == a => line_no += 1,
            (e, a) => {
                return Some(format!(
                    "first divergence at line {line_no}:\n  expected: {}\n  actual:   {}",
                    e.unwrap_or("<end of output>"),
                    a.unwrap_or("<end of output>")
                ))
            }
        }
    }
}

/// Differential verdict of `candidate` against the reference run.
///
/// Precedence: timeout, then crash, then output comparison.
pub fn check_correctness(candidate: &RunResult, reference: &RunResult, checker: CheckerMode) -> Result<Verdict, ExecError> {
    if reference.timed_out {
        return Err(ExecError::OracleInvalid("reference run timed out".into()));
    }
    if reference.crashed {
        return Err(ExecError::OracleInvalid(format!(
            "reference run terminated by {}",
            signal_name(reference.signal.unwrap_or(0))
        )));
    }
    if candidate.timed_out {
        return Ok(Verdict::fail(FailureDiagnostics::new(
            FailureStage::RunTimeout,
            format!(
                "execution exceeded the timeout of {:.3}s",
                candidate.timeout.as_secs_f64()
            ),
            None,
        )));
    }
    if candidate.crashed {
        let signal = candidate.signal.unwrap_or(0);
        let mut excerpt = format!("program terminated by signal {signal} ({})", signal_name(signal));
        let err_tail = tail(&candidate.stderr, 2048);
        if !err_tail.trim().is_empty() {
            excerpt.push_str("\nstderr:\n");
            excerpt.push_str(&err_tail);
        }
        return Ok(Verdict::fail(FailureDiagnostics::new(
            FailureStage::RunCrash,
            excerpt,
            Some(candidate.exit_code),
        )));
    }
    let mut problems = Vec::new();
    match checker {
        CheckerMode::StdoutExact => {
            if candidate.exit_code != reference.exit_code {
                problems.push(format!(
                    "exit code mismatch: expected {}, actual {}",
                    reference.exit_code, candidate.exit_code
                ));
            }
            if candidate.stdout != reference.stdout {
                problems.push(first_divergence(&reference.stdout, &candidate.stdout).unwrap_or_else(|| {
                    "output differs only in line terminators or trailing bytes".to_string()
                }));
            }
        }
        CheckerMode::ChecksumLines => {
            if let Some(d) = first_divergence(&reference.stdout, &candidate.stdout) {
                problems.push(d);
            }
        }
    }
    if problems.is_empty() {
        Ok(Verdict::pass())
    } else {
        Ok(Verdict::fail(FailureDiagnostics::new(
            FailureStage::WrongOutput,
            problems.join("\n"),
            Some(candidate.exit_code),
        )))
    }
}
