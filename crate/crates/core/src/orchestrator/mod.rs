//! Experiment orchestration: the config file, the run directory layout and
//! the commands behind the CLI.
//!
//! Everything a command writes lands under the configured output directory:
//!
//! - `effective_config.toml`: the config after command-line overrides
//! - `work/`, `run/`: build products and per-run scratch space
//! - `trajectories/<command>.jsonl`: one record per attempt
//! - `outcomes/`, `reports/`: per-task outcomes and aggregate reports
//! - `timings/`: 11-run timing series with kept/discarded flags
//! - `learn/`: prompt store, checkpoint and the selected prompt
//! - `cache/`: HTTP response cache (unless configured elsewhere)

mod commands;
mod config;

use std::path::PathBuf;

pub use commands::{
    ingest, BenchResult, Experiment, LearnSummary, EFFECTIVE_CONFIG_FILE, SELECTED_PROMPT_FILE,
};
pub use config::{
    default_debug_rounds, default_optimization_rounds, ExecutionSection, ExperimentConfig, LearnSection, Overrides,
    PerfSection, PipelineSection, SplitSection,
};

use crate::evolve::{LearnError, MetaError, StoreError};
use crate::llm::{GatewayError, TemplateError};
use crate::pipeline::PipelineError;
use crate::report::ReportError;
use crate::task::TaskError;
use crate::toolchain::ToolchainError;

/// Process exit status shared by every command.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExitStatus {
    Success,
    /// The task ran but the result is wrong (or was refused).
    TaskFailure,
    /// Configuration, provider, toolchain or I/O trouble.
    Operational,
}

impl ExitStatus {
    pub fn code(self) -> u8 {
        match self {
            ExitStatus::Success => 0,
            ExitStatus::TaskFailure => 1,
            ExitStatus::Operational => 2,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum OrchestratorError {
    #[error("config {path}: {message}")]
    Config { path: PathBuf, message: String },
    #[error(transparent)]
    Task(#[from] TaskError),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Toolchain(#[from] ToolchainError),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error(transparent)]
    Learn(#[from] LearnError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Report(#[from] ReportError),
    #[error(transparent)]
    Template(#[from] TemplateError),
    #[error(transparent)]
    Meta(#[from] MetaError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{0}")]
    Usage(String),
}

impl OrchestratorError {
    pub fn io(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Self {
        let path = path.into();
        move |source| OrchestratorError::Io { path, source }
    }
}
