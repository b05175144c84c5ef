//! Prompt rendering for generation and self-debug turns.

use super::{ChatMessage, Role};
use crate::digest::truncate_middle;
use crate::evolve::PromptVersion;
use crate::fixtures::{IR_SLOT, TARGET_SLOT};
use crate::task::{ArchName, ArchTarget};
use crate::toolchain::FailureDiagnostics;

/// Per-stage cap on diagnostic excerpts sent back to the model.
pub const DIAGNOSTIC_EXCERPT_LIMIT: usize = 4096;

/// The fenced output template every generation, repair and optimization turn
/// asks for.
pub const OUTPUT_TEMPLATE_INSTRUCTION: &str = "You MUST use the following template to give out the complete, final target assembly code, and MUST NOT apply this template to any other part of your response:\n```assembly\n...(Provide the assembly code here)\n```";

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum TemplateError {
    #[error("template is missing the required placeholder {0}")]
    MissingPlaceholder(String),
    #[error("template contains placeholder {0} more than once")]
    DuplicatePlaceholder(String),
    #[error("{0} is empty")]
    EmptyInput(&'static str),
    #[error("template lacks the mandatory output-template instruction")]
    MissingInstruction,
    #[error("precondition violated: {0}")]
    Precondition(String),
}

pub fn target_wording(arch: ArchTarget) -> &'static str {
    match arch.name {
        ArchName::X86_64 => "x86_64 GNU assembly code (using AT&T format)",
        ArchName::Aarch64 => "aarch64 GNU assembly code",
    }
}

/// Substitutes the architecture wording and the IR into a prompt template.
/// The target slot is optional; the IR slot must appear exactly once.
pub fn render_prompt_text(template: &str, ir_text: &str, arch: ArchTarget) -> Result<String, TemplateError> {
    if ir_text.trim().is_empty() {
        return Err(TemplateError::EmptyInput("IR text"));
    }
    match template.matches(IR_SLOT).count() {
        0 => return Err(TemplateError::MissingPlaceholder(IR_SLOT.into())),
        1 => {}
        _ => return Err(TemplateError::DuplicatePlaceholder(IR_SLOT.into())),
    }
    let with_target = template.replace(TARGET_SLOT, target_wording(arch));
    let ir = ir_text.strip_suffix('\n').unwrap_or(ir_text);
    Ok(with_target.replacen(IR_SLOT, ir, 1))
}

/// Single user message: the prompt template with the IR in its fenced block.
pub fn render_generation_prompt(
    prompt: &PromptVersion,
    ir_text: &str,
    arch: ArchTarget,
) -> Result<Vec<ChatMessage>, TemplateError> {
    Ok(vec![ChatMessage::user(render_prompt_text(&prompt.text, ir_text, arch)?)])
}

/// Feedback text for one failed attempt.
pub fn debug_feedback(diagnostics: &FailureDiagnostics) -> String {
    let mut text = format!(
        "The assembly code you provided failed verification.\n\nFailure stage: {}\n",
        diagnostics.stage.label()
    );
    if let Some(code) = diagnostics.exit_code {
        text.push_str(&format!("Exit code: {code}\n"));
    }
    text.push_str(&format!(
        "Diagnostics:\n```text\n{}\n```\n\nFix the problem and return the corrected, complete assembly code. {}",
        truncate_middle(&diagnostics.excerpt, DIAGNOSTIC_EXCERPT_LIMIT),
        OUTPUT_TEMPLATE_INSTRUCTION
    ));
    text
}

/// Continues `previous` with a user turn reporting `diagnostics`. The prior
/// conversation must already contain the model's failed attempt.
pub fn render_debug_prompt(
    previous: &[ChatMessage],
    diagnostics: &FailureDiagnostics,
) -> Result<Vec<ChatMessage>, TemplateError> {
    if !previous.iter().any(|m| m.role == Role::Assistant) {
        return Err(TemplateError::Precondition(
            "self-debug needs at least one prior attempt".into(),
        ));
    }
    let mut messages = previous.to_vec();
    messages.push(ChatMessage::user(debug_feedback(diagnostics)));
    Ok(messages)
}
