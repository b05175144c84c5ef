//! Meta-prompts: the compilation model acting as prompt optimizer (edit
//! proposal) and as reviewer (per-edit accept or reject).

use serde::Deserialize;
use serde_json::Value;

use super::signal::LearningBatchSignal;
use super::version::{EditKind, EditProposal, PromptVersion};
use crate::fixtures::{META_CONFIRM_TEMPLATE, META_PROPOSE_TEMPLATE};
use crate::llm::{ChatClient, ChatMessage, ChatRequest, GatewayError, GenerationParams, TemplateError};

pub const CURRENT_PROMPT_SLOT: &str = "{{CURRENT_PROMPT}}";
pub const TRAJECTORIES_SLOT: &str = "{{TRAJECTORIES}}";
pub const CHANGES_SLOT: &str = "{{CHANGES}}";
pub const OUTPUT_FORMAT_SLOT: &str = "{{OUTPUT_FORMAT}}";

pub const PROPOSE_OUTPUT_FORMAT: &str = "Return the edits as a JSON array inside a single ```json fenced block. Each element is an object with the fields \"kind\" (\"add_rule\", \"modify_rule\" or \"remove_rule\"), \"anchor\", \"content\" and \"rationale\". For add_rule the anchor is the title of the rules section the rule belongs to; a new section is created when no title matches. For modify_rule and remove_rule the anchor is \"<section title> :: <distinctive part of the existing rule>\". The content is the complete text of the new or modified rule, written as a single line; leave it empty for remove_rule.";

pub const CONFIRM_OUTPUT_FORMAT: &str = "Return your decisions as a JSON array inside a single ```json fenced block, with one object per proposed change: {\"index\": <change number>, \"accept\": true or false}. Changes you do not list are treated as rejected.";

#[derive(Debug, thiserror::Error)]
pub enum MetaError {
    #[error("unusable optimizer response: {0}")]
    Format(String),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Template(#[from] TemplateError),
    #[error("precondition violated: {0}")]
    Precondition(&'static str),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MetaTemplates {
    pub propose: String,
    pub confirm: String,
}

impl Default for MetaTemplates {
    fn default() -> Self {
        Self {
            propose: META_PROPOSE_TEMPLATE.to_string(),
            confirm: META_CONFIRM_TEMPLATE.to_string(),
        }
    }
}

impl MetaTemplates {
    pub fn validate(&self) -> Result<(), TemplateError> {
        let required = [
            (&self.propose, [CURRENT_PROMPT_SLOT, TRAJECTORIES_SLOT, OUTPUT_FORMAT_SLOT]),
            (&self.confirm, [CURRENT_PROMPT_SLOT, CHANGES_SLOT, OUTPUT_FORMAT_SLOT]),
        ];
        for (template, slots) in required {
            for slot in slots {
                match template.matches(slot).count() {
                    0 => return Err(TemplateError::MissingPlaceholder(slot.into())),
                    1 => {}
                    _ => return Err(TemplateError::DuplicatePlaceholder(slot.into())),
                }
            }
        }
        Ok(())
    }
}

/// Single-pass substitution: slot names appearing inside the values are
/// left alone.
fn fill(template: &str, slots: &[(&str, &str)]) -> String {
    let mut out = String::with_capacity(template.len());
    let mut rest = template;
    loop {
        let next = slots
            .iter()
            .filter_map(|(slot, value)| rest.find(slot).map(|at| (at, *slot, *value)))
            .min_by_key(|(at, _, _)| *at);
        match next {
            Some((at, slot, value)) => {
                out.push_str(&rest[..at]);
                out.push_str(value);
                rest = &rest[at + slot.len()..];
            }
            None => {
                out.push_str(rest);
                return out;
            }
        }
    }
}

pub fn render_propose_prompt(
    templates: &MetaTemplates,
    current: &PromptVersion,
    signal: &LearningBatchSignal,
) -> Result<String, MetaError> {
    templates.validate()?;
    if signal.is_empty() {
        return Err(MetaError::Precondition("the learning signal is empty"));
    }
    Ok(fill(
        &templates.propose,
        &[
            (CURRENT_PROMPT_SLOT, current.text.trim_end()),
            (TRAJECTORIES_SLOT, signal.token_budgeted_excerpts.trim_end()),
            (OUTPUT_FORMAT_SLOT, PROPOSE_OUTPUT_FORMAT),
        ],
    ))
}

fn kind_name(kind: EditKind) -> &'static str {
    match kind {
        EditKind::AddRule => "add_rule",
        EditKind::ModifyRule => "modify_rule",
        EditKind::RemoveRule => "remove_rule",
    }
}

pub fn render_confirm_prompt(
    templates: &MetaTemplates,
    current: &PromptVersion,
    proposals: &[EditProposal],
) -> Result<String, MetaError> {
    templates.validate()?;
    if proposals.is_empty() {
        return Err(MetaError::Precondition("there are no proposals to review"));
    }
    let changes: Vec<String> = proposals
        .iter()
        .enumerate()
        .map(|(i, p)| {
            format!(
                "Change {}: {}\n  anchor: {}\n  content: {}\n  rationale: {}",
                i + 1,
                kind_name(p.kind),
                p.anchor,
                p.content,
                p.rationale
            )
        })
        .collect();
    Ok(fill(
        &templates.confirm,
        &[
            (CURRENT_PROMPT_SLOT, current.text.trim_end()),
            (CHANGES_SLOT, &changes.join("\n\n")),
            (OUTPUT_FORMAT_SLOT, CONFIRM_OUTPUT_FORMAT),
        ],
    ))
}

/// Contents of the last fenced block tagged `json`; falls back to the whole
/// response when it is bare JSON.
fn json_payload(response: &str) -> Result<Value, MetaError> {
    let mut last = None;
    let mut open: Option<(bool, usize)> = None;
    let mut offset = 0;
    for line in response.split_inclusive('\n') {
        let bare = line.trim();
        match open {
            None => {
                if let Some(info) = bare.strip_prefix("```") {
                    open = Some((info.trim().eq_ignore_ascii_case("json"), offset + line.len()));
                }
            }
            Some((is_json, start)) => {
                if bare == "```" {
                    if is_json {
                        last = Some(&response[start..offset]);
                    }
                    open = None;
                }
            }
        }
        offset += line.len();
    }
    let body = match last {
        Some(body) => body,
        None => {
            let trimmed = response.trim();
            if !(trimmed.starts_with('[') || trimmed.starts_with('{')) {
                return Err(MetaError::Format("no ```json block in the response".into()));
            }
            trimmed
        }
    };
    serde_json::from_str(body).map_err(|e| MetaError::Format(format!("invalid JSON: {e}")))
}

#[derive(Deserialize)]
struct RawProposal {
    kind: EditKind,
    anchor: String,
    #[serde(default)]
    content: String,
    #[serde(default)]
    rationale: String,
}

fn check_proposal(value: Value) -> Result<EditProposal, String> {
    let raw: RawProposal = serde_json::from_value(value).map_err(|e| e.to_string())?;
    if raw.anchor.trim().is_empty() {
        return Err("empty anchor".into());
    }
    if raw.kind != EditKind::RemoveRule && raw.content.trim().is_empty() {
        return Err("empty content".into());
    }
    Ok(EditProposal {
        kind: raw.kind,
        anchor: raw.anchor.trim().to_string(),
        content: raw.content.trim().to_string(),
        rationale: raw.rationale.trim().to_string(),
        confirmed: false,
    })
}

/// Parses an optimizer response. Malformed entries are dropped with a
/// warning; a response yielding no valid entry is a format error.
pub fn parse_proposals(response: &str) -> Result<Vec<EditProposal>, MetaError> {
    let items = match json_payload(response)? {
        Value::Array(items) => items,
        Value::Object(mut map) => match map.remove("edits") {
            Some(Value::Array(items)) => items,
            _ => return Err(MetaError::Format("expected a JSON array of edits".into())),
        },
        _ => return Err(MetaError::Format("expected a JSON array of edits".into())),
    };
    let mut proposals = Vec::new();
    for (i, item) in items.into_iter().enumerate() {
        match check_proposal(item) {
            Ok(p) => proposals.push(p),
            Err(reason) => tracing::warn!(entry = i + 1, "dropping malformed edit proposal: {reason}"),
        }
    }
    if proposals.is_empty() {
        return Err(MetaError::Format("no valid edit proposals".into()));
    }
    Ok(proposals)
}

#[derive(Deserialize)]
struct RawDecision {
    index: usize,
    accept: bool,
}

/// Parses a review into one accept flag per proposal. Any malformed entry
/// invalidates the whole review; unlisted proposals count as rejected.
pub fn parse_review(response: &str, n_proposals: usize) -> Result<Vec<bool>, MetaError> {
    let Value::Array(items) = json_payload(response)? else {
        return Err(MetaError::Format("expected a JSON array of decisions".into()));
    };
    let mut decisions: Vec<Option<bool>> = vec![None; n_proposals];
    for item in items {
        let d: RawDecision =
            serde_json::from_value(item).map_err(|e| MetaError::Format(format!("malformed decision: {e}")))?;
        let slot = d
            .index
            .checked_sub(1)
            .and_then(|i| decisions.get_mut(i))
            .ok_or_else(|| MetaError::Format(format!("decision for unknown change {}", d.index)))?;
        if slot.is_some() {
            return Err(MetaError::Format(format!("change {} decided twice", d.index)));
        }
        *slot = Some(d.accept);
    }
    Ok(decisions.into_iter().map(|d| d.unwrap_or(false)).collect())
}

fn ask(
    client: &dyn ChatClient,
    params: &GenerationParams,
    prompt: String,
    conversation: &str,
) -> Result<String, MetaError> {
    let request = ChatRequest::new(params, vec![ChatMessage::user(prompt)])?;
    Ok(client.complete(&request, conversation)?.content)
}

pub fn propose_edits(
    client: &dyn ChatClient,
    params: &GenerationParams,
    templates: &MetaTemplates,
    current: &PromptVersion,
    signal: &LearningBatchSignal,
    conversation: &str,
) -> Result<Vec<EditProposal>, MetaError> {
    let prompt = render_propose_prompt(templates, current, signal)?;
    parse_proposals(&ask(client, params, prompt, conversation)?)
}

/// Returns `proposals` with `confirmed` set from the reviewer's decisions.
pub fn confirm_edits(
    client: &dyn ChatClient,
    params: &GenerationParams,
    templates: &MetaTemplates,
    current: &PromptVersion,
    proposals: &[EditProposal],
    conversation: &str,
) -> Result<Vec<EditProposal>, MetaError> {
    let prompt = render_confirm_prompt(templates, current, proposals)?;
    let decisions = parse_review(&ask(client, params, prompt, conversation)?, proposals.len())?;
    Ok(proposals
        .iter()
        .zip(decisions)
        .map(|(p, accept)| EditProposal {
            confirmed: accept,
            ..p.clone()
        })
        .collect())
}
