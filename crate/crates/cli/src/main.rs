//! `neucomp`: neural compilation experiments from the command line.
//!
//! Exit codes: 0 success, 1 task-level failure, 2 operational error.

use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use neucomp_core::orchestrator::{ingest, Experiment, ExitStatus, OrchestratorError, Overrides};
use neucomp_core::report::{load_report, render_structured, render_table};
use neucomp_core::task::{ArchName, ArchTarget, ExecutionMode};

#[derive(Parser)]
#[command(name = "neucomp", version, about = "LLM-driven LLVM IR to assembly compilation harness")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Experiment config file.
    #[arg(long, short = 'c')]
    config: PathBuf,
    /// Target architecture (x86_64 or aarch64); overrides the config.
    #[arg(long)]
    arch: Option<String>,
    /// Prompt source: baseline, learned, minimal, file:PATH or store:ID.
    #[arg(long)]
    prompt: Option<String>,
    /// Maximum concurrent task compilations.
    #[arg(long)]
    jobs: Option<usize>,
    /// Output directory; overrides the config.
    #[arg(long)]
    output_dir: Option<PathBuf>,
    /// Remove build products and learning state before running.
    #[arg(long)]
    clean: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Validate a dataset and write it in canonical layout.
    Ingest {
        /// Manifest file, directory with manifest.toml, or directory of task directories.
        source: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        name: Option<String>,
        #[arg(long)]
        arch: Option<String>,
    },
    /// Compile one task.
    Compile {
        task: String,
        #[command(flatten)]
        common: Common,
    },
    /// Run the workflow on a split and write the report.
    Eval {
        /// train, validation, test or all.
        #[arg(default_value = "test")]
        split: String,
        #[command(flatten)]
        common: Common,
    },
    /// Evolve the prompt on the training split.
    Learn {
        /// Continue from the checkpoint in the output directory.
        #[arg(long)]
        resume: bool,
        #[command(flatten)]
        common: Common,
    },
    /// Verify a listing and time it against clang -O3.
    Bench {
        task: String,
        asm: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Print a stored report.
    Report {
        path: PathBuf,
        /// Print the structured form instead of the table.
        #[arg(long)]
        json: bool,
    },
}

fn experiment(common: &Common) -> Result<Experiment, OrchestratorError> {
    let overrides = Overrides {
        arch: common.arch.clone(),
        prompt: common.prompt.clone(),
        jobs: common.jobs,
        // Relative to the working directory, unlike paths inside the file.
        output_dir: common.output_dir.as_ref().map(|d| absolute(d)).transpose()?,
    };
    let exp = Experiment::load(&common.config, &overrides)?;
    if common.clean {
        exp.clean()?;
    }
    Ok(exp)
}

fn absolute(path: &Path) -> Result<PathBuf, OrchestratorError> {
    std::path::absolute(path).map_err(OrchestratorError::io(path))
}

fn parse_arch(name: &str) -> Result<ArchTarget, OrchestratorError> {
    let name = ArchName::parse(name)
        .ok_or_else(|| OrchestratorError::Usage(format!("unknown arch `{name}` (expected x86_64 or aarch64)")))?;
    let execution_mode = if name.as_str() == std::env::consts::ARCH {
        ExecutionMode::Native
    } else {
        ExecutionMode::Emulated
    };
    Ok(ArchTarget { name, execution_mode })
}

fn run(command: Command, out: &mut dyn Write) -> Result<ExitStatus, OrchestratorError> {
    match command {
        Command::Ingest { source, out: dir, name, arch } => {
            let arch = arch.as_deref().map(parse_arch).transpose()?;
            let manifest = ingest(&source, &dir, name.as_deref(), arch)?;
            writeln!(
                out,
                "ingested {} tasks into {} ({})",
                manifest.tasks.len(),
                dir.display(),
                manifest.arch.name
            )
            .map_err(OrchestratorError::io("stdout"))?;
            Ok(ExitStatus::Success)
        }
        Command::Compile { task, common } => experiment(&common)?.run_compile(&task, out),
        Command::Eval { split, common } => experiment(&common)?.run_eval(&split, out),
        Command::Learn { resume, common } => experiment(&common)?.run_learn(resume, out),
        Command::Bench { task, asm, common } => experiment(&common)?.run_bench(&task, &asm, out),
        Command::Report { path, json } => {
            let report = load_report(Path::new(&path))?;
            let body = if json { render_structured(&report) } else { render_table(&report) };
            out.write_all(body.as_bytes()).map_err(OrchestratorError::io("stdout"))?;
            Ok(ExitStatus::Success)
        }
    }
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_env("NEUCOMP_LOG")
                .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new("warn")),
        )
        .with_writer(io::stderr)
        .init();
    let cli = Cli::parse();
    let stdout = io::stdout();
    let status = match run(cli.command, &mut stdout.lock()) {
        Ok(status) => status,
        Err(e) => {
            eprintln!("error: {e}");
            ExitStatus::Operational
        }
    };
    ExitCode::from(status.code())
}
