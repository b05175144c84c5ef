//! Reference and candidate builds through the system compiler driver.
//!
//! Layout under `work_dir`:
//!
//! ```text
//! <task>/driver/driver.o      compiled once per task (seed injected here)
//! <task>/ref_O0/              reference build at the reference opt level
//! <task>/ref_O3/              reference build at the optimized opt level
//! <task>/<attempt label>/     candidate.s, candidate.o, candidate
//! ```
//!
//! Every command line is logged verbatim into the build log, followed by the
//! tool's stderr.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::task::{ArchName, ArchTarget, TaskSpec};

#[derive(Debug, thiserror::Error)]
pub enum ToolchainError {
    #[error("compiler `{0}` not found or not executable")]
    Missing(String),
    #[error("reference build of task `{task_id}` at {opt} failed:\n{log}")]
    ReferenceBuild { task_id: String, opt: String, log: String },
    #[error("driver build of task `{task_id}` failed:\n{log}")]
    DriverBuild { task_id: String, log: String },
    #[error("I/O error in {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ToolchainError + '_ {
    move |source| ToolchainError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToolchainConfig {
    #[serde(default = "default_compiler")]
    pub compiler_path: PathBuf,
    #[serde(default = "default_ref_opt")]
    pub opt_level_reference: String,
    #[serde(default = "default_opt_opt")]
    pub opt_level_optimized: String,
    /// Optimization level for the task driver; identical for every build of
    /// a task.
    #[serde(default = "default_driver_opt")]
    pub opt_level_driver: String,
    #[serde(default)]
    pub extra_flags: Vec<String>,
    #[serde(default = "default_link_flags")]
    pub link_flags: Vec<String>,
    /// Overrides the triple derived from the task architecture.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_triple: Option<String>,
    #[serde(default = "default_work_dir")]
    pub work_dir: PathBuf,
}

fn default_compiler() -> PathBuf {
    PathBuf::from("clang")
}
fn default_ref_opt() -> String {
    "-O0".into()
}
fn default_opt_opt() -> String {
    "-O3".into()
}
fn default_driver_opt() -> String {
    "-O2".into()
}
fn default_link_flags() -> Vec<String> {
    vec!["-lm".into()]
}
fn default_work_dir() -> PathBuf {
    PathBuf::from("work")
}

impl Default for ToolchainConfig {
    fn default() -> Self {
        Self {
            compiler_path: default_compiler(),
            opt_level_reference: default_ref_opt(),
            opt_level_optimized: default_opt_opt(),
            opt_level_driver: default_driver_opt(),
            extra_flags: Vec::new(),
            link_flags: default_link_flags(),
            target_triple: None,
            work_dir: default_work_dir(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BuildKind {
    #[serde(rename = "reference_O0")]
    ReferenceO0,
    #[serde(rename = "reference_O3")]
    ReferenceO3,
    Candidate,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BuildProduct {
    pub kind: BuildKind,
    pub executable_path: PathBuf,
    pub build_log: String,
    pub success: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FailureStage {
    Assemble,
    Link,
    RunCrash,
    RunTimeout,
    WrongOutput,
}

impl FailureStage {
    pub fn label(self) -> &'static str {
        match self {
            FailureStage::Assemble => "assemble",
            FailureStage::Link => "link",
            FailureStage::RunCrash => "run_crash",
            FailureStage::RunTimeout => "run_timeout",
            FailureStage::WrongOutput => "wrong_output",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FailureDiagnostics {
    pub stage: FailureStage,
    pub excerpt: String,
    pub exit_code: Option<i32>,
}

impl FailureDiagnostics {
    pub fn new(stage: FailureStage, excerpt: impl Into<String>, exit_code: Option<i32>) -> Self {
        let mut excerpt = excerpt.into();
        if excerpt.trim().is_empty() {
            excerpt = format!("{} failed without diagnostic output", stage.label());
        }
        Self {
            stage,
            excerpt,
            exit_code,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum CandidateBuild {
    Built(BuildProduct),
    Failed(FailureDiagnostics),
}

/// File-system-safe directory name for an attempt label.
pub fn sanitize_label(label: &str) -> String {
    label
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.') { c } else { '_' })
        .collect()
}

pub struct Toolchain {
    config: ToolchainConfig,
    arch: ArchTarget,
    drivers: Mutex<HashMap<String, PathBuf>>,
}

struct ToolRun {
    ok: bool,
    stderr: String,
    exit_code: Option<i32>,
}

impl Toolchain {
    pub fn new(config: ToolchainConfig, arch: ArchTarget) -> Result<Self, ToolchainError> {
        if resolve_executable(&config.compiler_path).is_none() {
            return Err(ToolchainError::Missing(config.compiler_path.display().to_string()));
        }
        Ok(Self {
            config,
            arch,
            drivers: Mutex::new(HashMap::new()),
        })
    }

    pub fn config(&self) -> &ToolchainConfig {
        &self.config
    }

    pub fn arch(&self) -> ArchTarget {
        self.arch
    }

    /// Removes the whole work tree.
    pub fn clean(&self) -> std::io::Result<()> {
        match fs::remove_dir_all(&self.config.work_dir) {
            Err(e) if e.kind() != std::io::ErrorKind::NotFound => Err(e),
            _ => Ok(()),
        }
    }

    fn target_flags(&self) -> Vec<String> {
        if let Some(triple) = &self.config.target_triple {
            return vec![format!("--target={triple}")];
        }
        let host_is_x86 = cfg!(target_arch = "x86_64");
        let native = match self.arch.name {
            ArchName::X86_64 => host_is_x86,
            ArchName::Aarch64 => cfg!(target_arch = "aarch64"),
        };
        if native {
            Vec::new()
        } else {
            vec![format!("--target={}", self.arch.name.triple())]
        }
    }

    fn command(&self) -> Command {
        let mut cmd = Command::new(&self.config.compiler_path);
        cmd.args(self.target_flags()).args(&self.config.extra_flags);
        cmd
    }

    fn task_dir(&self, task: &TaskSpec) -> PathBuf {
        self.config.work_dir.join(sanitize_label(&task.id))
    }

    fn run_tool(cmd: &mut Command, log: &mut String) -> Result<ToolRun, ToolchainError> {
        let program = cmd.get_program().to_string_lossy().into_owned();
        let args: Vec<String> = cmd.get_args().map(|a| a.to_string_lossy().into_owned()).collect();
        let _ = writeln!(log, "$ {} {}", program, args.join(" "));
        let output = cmd.output().map_err(|_| ToolchainError::Missing(program.clone()))?;
        let stderr = String::from_utf8_lossy(&output.stderr).into_owned();
        log.push_str(&stderr);
        if !output.status.success() {
            let _ = writeln!(log, "[exit status: {}]", output.status);
        }
        Ok(ToolRun {
            ok: output.status.success(),
            stderr,
            exit_code: output.status.code(),
        })
    }

    /// Compiles the task driver once; every build of the task links this
    /// object, so all binaries see the same `TASK_SEED`.
    pub fn driver_object(&self, task: &TaskSpec) -> Result<PathBuf, ToolchainError> {
        let mut drivers = self.drivers.lock().expect("driver map poisoned");
        if let Some(path) = drivers.get(&task.id) {
            return Ok(path.clone());
        }
        let dir = self.task_dir(task).join("driver");
        fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        let src = dir.join("driver.c");
        fs::write(&src, &task.driver_source).map_err(io_err(&src))?;
        let obj = dir.join("driver.o");
        let mut log = String::new();
        let mut cmd = self.command();
        cmd.arg(&self.config.opt_level_driver).arg("-fPIC");
        if let Some(flag) = seed_define(task) {
            cmd.arg(flag);
        }
        cmd.arg("-c").arg(&src).arg("-o").arg(&obj);
        let run = Self::run_tool(&mut cmd, &mut log)?;
        if !run.ok {
            return Err(ToolchainError::DriverBuild {
                task_id: task.id.clone(),
                log,
            });
        }
        drivers.insert(task.id.clone(), obj.clone());
        Ok(obj)
    }

    /// Compiles the task IR at `opt` and links it with the driver. A failed
    /// compile or link is reported through `success = false`.
    pub fn build_reference(&self, task: &TaskSpec, opt: &str) -> Result<BuildProduct, ToolchainError> {
        let kind = if opt == self.config.opt_level_optimized {
            BuildKind::ReferenceO3
        } else {
            BuildKind::ReferenceO0
        };
        let dir = self.task_dir(task).join(format!("ref_{}", sanitize_label(opt.trim_start_matches('-'))));
        fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        let ir = dir.join("func.ll");
        fs::write(&ir, &task.ir_text).map_err(io_err(&ir))?;
        let obj = dir.join("func.o");
        let exe = dir.join("reference");
        let _ = fs::remove_file(&exe);
        let driver = self.driver_object(task)?;

        let mut log = String::new();
        let mut compile = self.command();
        compile
            .arg(opt)
            .arg("-fPIC")
            .arg("-Wno-override-module")
            .arg("-c")
            .arg(&ir)
            .arg("-o")
            .arg(&obj);
        let mut success = Self::run_tool(&mut compile, &mut log)?.ok;
        if success {
            let mut link = self.command();
            link.arg(&obj).arg(&driver).arg("-o").arg(&exe).args(&self.config.link_flags);
            success = Self::run_tool(&mut link, &mut log)?.ok;
        }
        Ok(BuildProduct {
            kind,
            executable_path: exe,
            build_log: log,
            success,
        })
    }

    /// Persists `asm_text` byte-for-byte, assembles it, and links it with the
    /// driver. Assembler and linker failures come back as diagnostics.
    pub fn build_candidate(&self, task: &TaskSpec, asm_text: &str, label: &str) -> Result<CandidateBuild, ToolchainError> {
        if asm_text.trim().is_empty() {
            return Ok(CandidateBuild::Failed(FailureDiagnostics::new(
                FailureStage::Assemble,
                "empty assembly listing",
                None,
            )));
        }
        let dir = self.task_dir(task).join(sanitize_label(label));
        fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        let src = dir.join("candidate.s");
        fs::write(&src, asm_text).map_err(io_err(&src))?;
        let obj = dir.join("candidate.o");
        let exe = dir.join("candidate");
        let _ = fs::remove_file(&obj);
        let _ = fs::remove_file(&exe);
        let driver = self.driver_object(task)?;

        let mut log = String::new();
        let mut assemble = self.command();
        assemble.arg("-c").arg(&src).arg("-o").arg(&obj);
        let run = Self::run_tool(&mut assemble, &mut log)?;
        if !run.ok {
            return Ok(CandidateBuild::Failed(FailureDiagnostics::new(
                FailureStage::Assemble,
                run.stderr,
                run.exit_code,
            )));
        }
        let mut link = self.command();
        link.arg(&obj).arg(&driver).arg("-o").arg(&exe).args(&self.config.link_flags);
        let run = Self::run_tool(&mut link, &mut log)?;
        if !run.ok {
            return Ok(CandidateBuild::Failed(FailureDiagnostics::new(
                FailureStage::Link,
                run.stderr,
                run.exit_code,
            )));
        }
        Ok(CandidateBuild::Built(BuildProduct {
            kind: BuildKind::Candidate,
            executable_path: exe,
            build_log: log,
            success: true,
        }))
    }

    /// Emits assembly for the task IR at `opt` (used to time the compiler's
    /// own output through the candidate path).
    pub fn emit_assembly(&self, task: &TaskSpec, opt: &str) -> Result<String, ToolchainError> {
        let dir = self.task_dir(task).join(format!("emit_{}", sanitize_label(opt.trim_start_matches('-'))));
        fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        let ir = dir.join("func.ll");
        fs::write(&ir, &task.ir_text).map_err(io_err(&ir))?;
        let out = dir.join("func.s");
        let mut log = String::new();
        let mut cmd = self.command();
        cmd.arg(opt)
            .arg("-fPIC")
            .arg("-Wno-override-module")
            .arg("-S")
            .arg(&ir)
            .arg("-o")
            .arg(&out);
        if !Self::run_tool(&mut cmd, &mut log)?.ok {
            return Err(ToolchainError::ReferenceBuild {
                task_id: task.id.clone(),
                opt: opt.to_string(),
                log,
            });
        }
        fs::read_to_string(&out).map_err(io_err(&out))
    }
}

impl BuildProduct {
    pub fn require_success(self, task_id: &str, opt: &str) -> Result<Self, ToolchainError> {
        if self.success {
            Ok(self)
        } else {
            Err(ToolchainError::ReferenceBuild {
                task_id: task_id.to_string(),
                opt: opt.to_string(),
                log: self.build_log,
            })
        }
    }
}

/// `-DTASK_SEED=<seed>ULL` for tasks that carry a seed.
pub fn seed_define(task: &TaskSpec) -> Option<String> {
    task.seed.map(|seed| format!("-DTASK_SEED={seed}ULL"))
}

/// Finds `program` either as a path or on `PATH`.
pub fn resolve_executable(program: &Path) -> Option<PathBuf> {
    use std::os::unix::fs::PermissionsExt;
    let is_exec = |p: &Path| {
        fs::metadata(p)
            .map(|m| m.is_file() && m.permissions().mode() & 0o111 != 0)
            .unwrap_or(false)
    };
    if program.components().count() > 1 {
        return is_exec(program).then(|| program.to_path_buf());
    }
    let path = std::env::var_os("PATH")?;
    std::env::split_paths(&path)
        .map(|dir| dir.join(program))
        .find(|candidate| is_exec(candidate))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn labels_are_sanitized() {
        assert_eq!(sanitize_label("gen/attempt 0"), "gen_attempt_0");
    }

    #[test]
    fn missing_compiler_is_reported() {
        let config = ToolchainConfig {
            compiler_path: PathBuf::from("/nonexistent/clang-xyz"),
            ..ToolchainConfig::default()
        };
        assert!(matches!(
            Toolchain::new(config, ArchTarget::X86_64_NATIVE),
            Err(ToolchainError::Missing(_))
        ));
    }

    #[test]
    fn empty_diagnostics_get_placeholder_text() {
        let d = FailureDiagnostics::new(FailureStage::Link, "  ", Some(1));
        assert!(!d.excerpt.trim().is_empty());
    }
}
