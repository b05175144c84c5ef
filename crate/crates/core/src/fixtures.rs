//! Bundled prompt texts and the on-disk location of the bundled micro-tasks.
//!
//! Prompt templates carry two placeholders: [`IR_SLOT`] inside the fenced
//! `llvm ir` block and [`TARGET_SLOT`] where the architecture wording goes.

use std::path::PathBuf;

pub const IR_SLOT: &str = "{{IR}}";
pub const TARGET_SLOT: &str = "{{TARGET}}";

/// Baseline generation prompt.
pub const BASELINE_PROMPT: &str = include_str!("../fixtures/prompts/baseline.txt");

/// A prompt produced by a learning run on x86_64 loop kernels.
pub const LEARNED_PROMPT: &str = include_str!("../fixtures/prompts/learned.txt");

/// Smallest root prompt: the IR slot plus the mandatory output template.
pub const MINIMAL_PROMPT: &str = include_str!("../fixtures/prompts/minimal.txt");

pub const META_PROPOSE_TEMPLATE: &str = include_str!("../fixtures/prompts/meta_propose.txt");
pub const META_CONFIRM_TEMPLATE: &str = include_str!("../fixtures/prompts/meta_confirm.txt");

/// Instruction every root prompt must carry.
pub const MANDATORY_TEMPLATE_INSTRUCTION: &str = "You MUST use the following template";

/// Directory containing the bundled fixtures (tasks, listings, suites).
pub fn fixtures_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fixtures")
}
