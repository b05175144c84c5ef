use serde::{Deserialize, Serialize};

use crate::digest::canonical_digest;
use crate::fixtures::{IR_SLOT, MANDATORY_TEMPLATE_INSTRUCTION};
use crate::llm::TemplateError;

/// (epoch, batch) of the update that produced a version, both 1-based.
/// The root is `(0, 0)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct CreatedAt {
    pub epoch: usize,
    pub batch: usize,
}

impl CreatedAt {
    pub const ROOT: CreatedAt = CreatedAt { epoch: 0, batch: 0 };

    pub fn new(epoch: usize, batch: usize) -> Self {
        Self { epoch, batch }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EditKind {
    AddRule,
    ModifyRule,
    RemoveRule,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EditProposal {
    pub kind: EditKind,
    /// `section` for additions, `section :: rule` for modifications and
    /// removals; both parts match case-insensitively by substring.
    pub anchor: String,
    #[serde(default)]
    pub content: String,
    #[serde(default)]
    pub rationale: String,
    #[serde(default)]
    pub confirmed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptVersion {
    pub version_id: String,
    pub parent_id: Option<String>,
    pub text: String,
    pub created_at: CreatedAt,
    /// Every reviewed edit, confirmed or not; only confirmed ones are applied.
    pub changelog: Vec<EditProposal>,
    #[serde(default)]
    pub validation_score: Option<f64>,
}

#[derive(Serialize)]
struct IdMaterial<'a> {
    parent_id: Option<&'a str>,
    created_at: CreatedAt,
    text: &'a str,
}

impl PromptVersion {
    pub fn compute_id(parent_id: Option<&str>, created_at: CreatedAt, text: &str) -> String {
        canonical_digest(&IdMaterial {
            parent_id,
            created_at,
            text,
        })
    }

    pub fn is_root(&self) -> bool {
        self.parent_id.is_none()
    }

    pub fn short_id(&self) -> &str {
        &self.version_id[..12.min(self.version_id.len())]
    }

    /// A free-standing prompt (e.g. loaded from a file) used directly for
    /// compilation, outside any store.
    pub fn standalone(text: impl Into<String>) -> Self {
        let text = text.into();
        Self {
            version_id: Self::compute_id(None, CreatedAt::ROOT, &text),
            parent_id: None,
            text,
            created_at: CreatedAt::ROOT,
            changelog: Vec::new(),
            validation_score: None,
        }
    }

    pub fn confirmed_edits(&self) -> impl Iterator<Item = &EditProposal> {
        self.changelog.iter().filter(|e| e.confirmed)
    }
}

/// Builds the root version. The text must carry the IR slot and the
/// mandatory output-template instruction.
pub fn init_prompt_store(baseline_text: &str) -> Result<PromptVersion, TemplateError> {
    if baseline_text.trim().is_empty() {
        return Err(TemplateError::EmptyInput("prompt text"));
    }
    if !baseline_text.contains(MANDATORY_TEMPLATE_INSTRUCTION) {
        return Err(TemplateError::MissingInstruction);
    }
    if !baseline_text.contains(IR_SLOT) {
        return Err(TemplateError::MissingPlaceholder(IR_SLOT.into()));
    }
    Ok(PromptVersion::standalone(baseline_text))
}
