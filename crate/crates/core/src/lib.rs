//! Neural compilation harness.
//!
//! Drives an LLM to translate LLVM IR into target assembly, verifies every
//! candidate differentially against a `clang -O0` reference, iteratively
//! optimizes correct candidates against a `clang -O3` baseline, and evolves
//! the generation prompt offline from self-debugging trajectories.
//!
//! Module map:
//!
//! - [`task`]: benchmark tasks, dataset manifests and seeded splits
//! - [`llm`]: chat-completion gateway (HTTP + replay), caching, prompt rendering
//! - [`toolchain`]: reference and candidate builds through `clang`
//! - [`executor`]: bounded execution and correctness verdicts
//! - [`bench`]: 11-run timing protocol and speedups
//! - [`pipeline`]: generation / self-debug / optimization state machine
//! - [`evolve`]: offline prompt evolution and the versioned prompt store
//! - [`report`]: ACC, ACC+Perf and self-debug round aggregation
//! - [`orchestrator`]: experiment configuration and the CLI commands

pub mod bench;
pub mod digest;
pub mod evolve;
pub mod executor;
pub mod fixtures;
pub mod llm;
pub mod orchestrator;
pub mod pipeline;
pub mod report;
pub mod task;
pub mod toolchain;

pub use evolve::PromptVersion;
pub use task::{ArchTarget, CheckerMode, DatasetManifest, Level, TaskSpec};
