//! Experiment configuration file.
//!
//! ```toml
//! manifest = "suite/manifest.toml"
//! output_dir = "out"
//! arch = "x86_64"                # optional; defaults to the manifest's arch
//! prompt = "baseline"            # baseline | learned | minimal | file:PATH | store:ID
//! jobs = 1
//!
//! [split]                        # counts plus seed, or an explicit file
//! seed = 7
//! train = 10
//! validation = 5
//! test = 5
//! # file = "split.toml"
//!
//! [provider]
//! kind = "replay"
//! replay_script = "replay.toml"
//!
//! [generation]
//! model = "deepseek-reasoner"
//!
//! [pipeline]                     # unset budgets follow the task level
//! max_debug_rounds_generation = 2
//! optimization_rounds = 2
//! fresh_context = false
//!
//! [perf]
//! enabled = true                 # defaults to on for L2 tasks only
//! runs = 11
//!
//! [execution]
//! emulator = ["qemu-aarch64", "-L", "/usr/aarch64-linux-gnu"]
//! cpu_affinity = 2
//! lock_file = "/tmp/neucomp.lock"
//!
//! [toolchain]
//! compiler_path = "clang"
//!
//! [learn]
//! epochs = 3
//! batch_size = 5
//! ```
//!
//! Relative paths resolve against the directory holding the config file,
//! except `toolchain.work_dir`, which lives under `output_dir`.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::bench::PROTOCOL_RUNS;
use crate::digest::canonical_digest;
use crate::evolve::ValidationMetric;
use crate::executor::ExecutionLimits;
use crate::llm::{GenerationParams, ProviderConfig, ProviderKind};
use crate::pipeline::PipelineConfig;
use crate::task::{ArchName, ArchTarget, ExecutionMode, Level};
use crate::toolchain::ToolchainConfig;

use super::OrchestratorError;

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

fn default_prompt() -> String {
    "baseline".into()
}

fn default_jobs() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub manifest: PathBuf,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub arch: Option<String>,
    #[serde(default = "default_prompt")]
    pub prompt: String,
    #[serde(default = "default_jobs")]
    pub jobs: usize,
    #[serde(default)]
    pub split: SplitSection,
    pub provider: ProviderConfig,
    #[serde(default)]
    pub generation: GenerationParams,
    #[serde(default)]
    pub pipeline: PipelineSection,
    #[serde(default)]
    pub perf: PerfSection,
    #[serde(default)]
    pub execution: ExecutionSection,
    #[serde(default)]
    pub toolchain: ToolchainConfig,
    #[serde(default)]
    pub learn: LearnSection,
    /// Directory of the config file; relative paths resolve against it.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

/// Without counts or a file, every manifest task lands in `test`.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSection {
    #[serde(default)]
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub validation: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub file: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineSection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_debug_rounds_generation: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_debug_rounds_optimization: Option<usize>,
    /// Optimization rounds `T`; 2 for L2 and 0 for L1 when unset.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub optimization_rounds: Option<usize>,
    #[serde(default)]
    pub fresh_context: bool,
    #[serde(default = "default_max_output")]
    pub max_output_bytes: usize,
}

fn default_max_output() -> usize {
    1 << 20
}

impl Default for PipelineSection {
    fn default() -> Self {
        Self {
            max_debug_rounds_generation: None,
            max_debug_rounds_optimization: None,
            optimization_rounds: None,
            fresh_context: false,
            max_output_bytes: default_max_output(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PerfSection {
    /// Unset: measured for L2 tasks, skipped for L1.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub enabled: Option<bool>,
    #[serde(default = "default_runs")]
    pub runs: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub screening_runs: Option<usize>,
}

fn default_runs() -> usize {
    PROTOCOL_RUNS
}

impl Default for PerfSection {
    fn default() -> Self {
        Self {
            enabled: None,
            runs: default_runs(),
            screening_runs: None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExecutionSection {
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub emulator: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cpu_affinity: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lock_file: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LearnSection {
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_token_budget")]
    pub token_budget: usize,
    #[serde(default)]
    pub metric: ValidationMetric,
    /// Prompt source the evolution starts from.
    #[serde(default = "default_prompt")]
    pub root: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub propose_template: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub confirm_template: Option<PathBuf>,
}

fn default_epochs() -> usize {
    3
}
fn default_batch_size() -> usize {
    5
}
fn default_token_budget() -> usize {
    12_000
}

impl Default for LearnSection {
    fn default() -> Self {
        Self {
            epochs: default_epochs(),
            batch_size: default_batch_size(),
            token_budget: default_token_budget(),
            metric: ValidationMetric::default(),
            root: default_prompt(),
            propose_template: None,
            confirm_template: None,
        }
    }
}

/// Command-line values that take precedence over the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub arch: Option<String>,
    pub prompt: Option<String>,
    pub jobs: Option<usize>,
    pub output_dir: Option<PathBuf>,
}

/// Self-debug budget when nothing is configured: one round for L1, two for
/// L2, four on aarch64.
pub fn default_debug_rounds(level: Level, arch: ArchName) -> usize {
    match (arch, level) {
        (ArchName::Aarch64, _) => 4,
        (_, Level::L1) => 1,
        (_, Level::L2) => 2,
    }
}

/// Optimization rounds when nothing is configured.
pub fn default_optimization_rounds(level: Level) -> usize {
    match level {
        Level::L1 => 0,
        Level::L2 => 2,
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path, overrides: &Overrides) -> Result<Self, OrchestratorError> {
        let text = fs::read_to_string(path).map_err(|e| OrchestratorError::Config {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::parse(&text, &base, overrides).map_err(|message| OrchestratorError::Config {
            path: path.to_path_buf(),
            message,
        })
    }

    pub fn parse(text: &str, base_dir: &Path, overrides: &Overrides) -> Result<Self, String> {
        let mut config: ExperimentConfig = toml::from_str(text).map_err(|e| e.to_string())?;
        config.base_dir = base_dir.to_path_buf();
        if let Some(arch) = &overrides.arch {
            config.arch = Some(arch.clone());
        }
        if let Some(prompt) = &overrides.prompt {
            config.prompt = prompt.clone();
        }
        if let Some(jobs) = overrides.jobs {
            config.jobs = jobs;
        }
        if let Some(dir) = &overrides.output_dir {
            config.output_dir = dir.clone();
        }
        config.validate()?;
        Ok(config)
    }

    fn validate(&self) -> Result<(), String> {
        if let Some(arch) = &self.arch {
            if ArchName::parse(arch).is_none() {
                return Err(format!("unknown arch `{arch}` (expected x86_64 or aarch64)"));
            }
        }
        if self.jobs == 0 {
            return Err("jobs must be at least 1".into());
        }
        if self.perf.runs != PROTOCOL_RUNS {
            return Err(format!("perf.runs must be {PROTOCOL_RUNS}; the timing protocol keeps runs 4 to 8"));
        }
        if let Some(k) = self.perf.screening_runs {
            if k == 0 || k > PROTOCOL_RUNS {
                return Err(format!("perf.screening_runs must be within 1..={PROTOCOL_RUNS}"));
            }
        }
        if self.pipeline.max_output_bytes == 0 {
            return Err("pipeline.max_output_bytes must be positive".into());
        }
        if self.learn.epochs == 0 || self.learn.batch_size == 0 {
            return Err("learn.epochs and learn.batch_size must be positive".into());
        }
        let s = &self.split;
        let any_count = s.train.is_some() || s.validation.is_some() || s.test.is_some();
        if any_count && s.file.is_some() {
            return Err("split: give either counts or a file, not both".into());
        }
        self.provider.validate().map_err(|e| e.to_string())?;
        Ok(())
    }

    pub fn resolve(&self, path: &Path) -> PathBuf {
        if path.is_absolute() {
            path.to_path_buf()
        } else {
            self.base_dir.join(path)
        }
    }

    pub fn output_dir(&self) -> PathBuf {
        self.resolve(&self.output_dir)
    }

    pub fn manifest_path(&self) -> PathBuf {
        self.resolve(&self.manifest)
    }

    /// The configured architecture, or `manifest_arch` when unset. Anything
    /// other than the host architecture runs emulated.
    pub fn arch_target(&self, manifest_arch: ArchTarget) -> ArchTarget {
        let Some(name) = self.arch.as_deref().and_then(ArchName::parse) else {
            return manifest_arch;
        };
        if name == manifest_arch.name {
            return manifest_arch;
        }
        let execution_mode = if name.as_str() == std::env::consts::ARCH {
            ExecutionMode::Native
        } else {
            ExecutionMode::Emulated
        };
        ArchTarget { name, execution_mode }
    }

    /// Provider settings with paths resolved. HTTP responses are cached under
    /// the output directory unless a cache is configured; replay runs are
    /// not cached because a cache hit would skip a scripted step.
    pub fn provider_config(&self) -> ProviderConfig {
        let mut p = self.provider.clone();
        p.replay_script = p.replay_script.as_deref().map(|s| self.resolve(s));
        p.cache_dir = match (&p.cache_dir, p.kind) {
            (Some(dir), _) => Some(self.resolve(dir)),
            (None, ProviderKind::Http) => Some(self.output_dir().join("cache")),
            (None, ProviderKind::Replay) => None,
        };
        p
    }

    pub fn toolchain_config(&self) -> ToolchainConfig {
        let mut t = self.toolchain.clone();
        if !t.work_dir.is_absolute() {
            t.work_dir = self.output_dir().join(&t.work_dir);
        }
        if t.compiler_path.components().count() > 1 {
            t.compiler_path = self.resolve(&t.compiler_path);
        }
        t
    }

    pub fn perf_enabled(&self, level: Level) -> bool {
        self.perf.enabled.unwrap_or(level == Level::L2)
    }

    /// Effective pipeline settings for tasks of `level`.
    pub fn pipeline_config(&self, level: Level, arch: ArchName) -> PipelineConfig {
        let budget = default_debug_rounds(level, arch);
        let limits = ExecutionLimits {
            max_output_bytes: self.pipeline.max_output_bytes,
            ..ExecutionLimits::new(Duration::from_secs(10), self.output_dir().join("run"))
        };
        let mut c = PipelineConfig::new(budget, limits);
        c.max_debug_rounds_generation = self.pipeline.max_debug_rounds_generation.unwrap_or(budget);
        c.max_debug_rounds_optimization = self.pipeline.max_debug_rounds_optimization.unwrap_or(budget);
        c.optimization_rounds = self
            .pipeline
            .optimization_rounds
            .unwrap_or_else(|| default_optimization_rounds(level));
        c.measure_each_round = self.perf_enabled(level);
        c.fresh_context = self.pipeline.fresh_context;
        c.screening_runs = self.perf.screening_runs;
        c.generation = self.generation.clone();
        c
    }

    /// Digest of everything that can change results. The output location and
    /// the degree of parallelism are left out.
    pub fn digest(&self) -> String {
        let mut c = self.clone();
        c.output_dir = PathBuf::new();
        c.jobs = 1;
        canonical_digest(&c)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("experiment config serializes")
    }
}
