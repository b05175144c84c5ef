//! Offline self-evolving prompt optimization.
//!
//! A single prompt is evolved batch by batch: trajectories of tasks that were
//! repaired by self-debugging are mined for insights by the compilation model
//! acting as a prompt optimizer, the proposed edits are reviewed by a second
//! call, and confirmed edits produce a child version. Versions form a tree
//! rooted at the baseline prompt; validation scores pick the final prompt.

mod edits;
mod learn;
mod meta;
mod signal;
mod store;
mod version;

pub use edits::{apply_edits, apply_to_text, parse_rules, EditError, RuleSection, ANCHOR_SEPARATOR, RULES_HEADER};
pub use learn::{
    learn, select_best, BatchReport, BatchResult, Checkpoint, LearnConfig, LearnError, LearnOutcome, ValidationMetric,
    CHECKPOINT_FILE,
};
pub use meta::{
    confirm_edits, CONFIRM_OUTPUT_FORMAT, PROPOSE_OUTPUT_FORMAT, parse_proposals, parse_review, propose_edits, render_confirm_prompt, render_propose_prompt,
    MetaError, MetaTemplates,
};
pub use signal::{collect_signal, LearningBatchSignal};
pub use store::{PromptStore, StoreError, LINEAGE_FILE};
pub use version::{init_prompt_store, CreatedAt, EditKind, EditProposal, PromptVersion};
