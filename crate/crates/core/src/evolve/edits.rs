//! Section-anchored edits on the rules block of a prompt.
//!
//! The rules block is a numbered item whose text is [`RULES_HEADER`],
//! followed by sections (`    - Title:`) holding rules (`        * rule`).
//! Edits touch only the lines of the rule or section they target; every
//! other byte of the prompt is preserved.

use crate::fixtures::IR_SLOT;

use super::version::{CreatedAt, EditKind, EditProposal, PromptVersion};

pub const RULES_HEADER: &str =
    "Additionally, to guarantee the correctness of the generated assembly code, please ensure that:";
pub const ANCHOR_SEPARATOR: &str = "::";

const SECTION_INDENT: &str = "    ";
const RULE_INDENT: &str = "        ";

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum EditError {
    #[error("anchor {anchor:?}: {reason}")]
    Anchor { anchor: String, reason: String },
    #[error("edit content is empty")]
    EmptyContent,
    #[error("edit content must not contain {0:?}")]
    Forbidden(&'static str),
    #[error("no confirmed edits to apply")]
    NothingConfirmed,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RuleSection {
    pub title: String,
    pub rules: Vec<String>,
    /// Line spans `[start, end)` of each rule, continuation lines included.
    spans: Vec<(usize, usize)>,
    /// One past the last non-blank line of the section.
    end: usize,
}

#[derive(Debug)]
struct Layout {
    header: Option<usize>,
    sections: Vec<RuleSection>,
    /// One past the last non-blank line of the rules block (or of the text
    /// when there is no block).
    content_end: usize,
    last_item: usize,
}

fn numbered_item(line: &str) -> Option<(usize, &str)> {
    let digits = line.bytes().take_while(u8::is_ascii_digit).count();
    if digits == 0 {
        return None;
    }
    let rest = line[digits..].strip_prefix(". ")?;
    Some((line[..digits].parse().ok()?, rest))
}

fn body(line: &str) -> &str {
    line.strip_suffix('\n').unwrap_or(line)
}

fn layout(lines: &[String]) -> Layout {
    let mut header = None;
    let mut last_item = 0;
    for (i, line) in lines.iter().enumerate() {
        if let Some((n, rest)) = numbered_item(body(line)) {
            last_item = last_item.max(n);
            if rest.trim_end() == RULES_HEADER && header.is_none() {
                header = Some(i);
            }
        }
    }
    let last_non_blank = |upto: usize| {
        (0..upto)
            .rev()
            .find(|&i| !body(&lines[i]).trim().is_empty())
            .map_or(0, |i| i + 1)
    };
    let Some(h) = header else {
        return Layout {
            header,
            sections: Vec::new(),
            content_end: last_non_blank(lines.len()),
            last_item,
        };
    };

    let mut sections: Vec<RuleSection> = Vec::new();
    let mut block_end = lines.len();
    for (i, line) in lines.iter().enumerate().skip(h + 1) {
        let text = body(line);
        let trimmed = text.trim_start();
        if trimmed.is_empty() {
            continue;
        }
        let indent = text.len() - trimmed.len();
        if indent == 0 {
            block_end = i;
            break;
        }
        if indent < RULE_INDENT.len() && trimmed.starts_with("- ") {
            let title = trimmed[2..].trim().trim_end_matches(':').trim().to_string();
            sections.push(RuleSection {
                title,
                rules: Vec::new(),
                spans: Vec::new(),
                end: i + 1,
            });
            continue;
        }
        let Some(section) = sections.last_mut() else {
            continue;
        };
        if let Some(rule) = trimmed.strip_prefix("* ") {
            section.rules.push(rule.trim_end().to_string());
            section.spans.push((i, i + 1));
        } else if let Some(span) = section.spans.last_mut() {
            span.1 = i + 1;
        }
        section.end = i + 1;
    }
    Layout {
        header,
        sections,
        content_end: last_non_blank(block_end).max(h + 1),
        last_item,
    }
}

fn split_lines(text: &str) -> Vec<String> {
    text.split_inclusive('\n').map(str::to_string).collect()
}

/// Sections and rules of the prompt's rules block, in textual order.
pub fn parse_rules(text: &str) -> Vec<RuleSection> {
    layout(&split_lines(text)).sections
}

fn anchor_error(anchor: &str, reason: impl Into<String>) -> EditError {
    EditError::Anchor {
        anchor: anchor.to_string(),
        reason: reason.into(),
    }
}

/// Unique case-insensitive substring match; an exact match wins over
/// partial ones.
fn match_unique<'a>(
    candidates: impl Iterator<Item = &'a str>,
    needle: &str,
    anchor: &str,
    what: &str,
) -> Result<Option<usize>, EditError> {
    let needle = needle.trim().trim_end_matches(':').trim().to_lowercase();
    if needle.is_empty() {
        return Err(anchor_error(anchor, format!("empty {what} anchor")));
    }
    let mut exact = Vec::new();
    let mut partial = Vec::new();
    for (i, c) in candidates.enumerate() {
        let c = c.to_lowercase();
        if c == needle {
            exact.push(i);
        } else if c.contains(&needle) {
            partial.push(i);
        }
    }
    let hits = if exact.is_empty() { partial } else { exact };
    match hits.len() {
        0 => Ok(None),
        1 => Ok(Some(hits[0])),
        n => Err(anchor_error(anchor, format!("matches {n} {what}s"))),
    }
}

fn normalize_content(content: &str) -> Result<String, EditError> {
    let joined = content.split_whitespace().collect::<Vec<_>>().join(" ");
    let stripped = joined
        .strip_prefix("* ")
        .or_else(|| joined.strip_prefix("- "))
        .unwrap_or(&joined)
        .trim()
        .to_string();
    if stripped.is_empty() {
        return Err(EditError::EmptyContent);
    }
    if stripped.contains(IR_SLOT) {
        return Err(EditError::Forbidden(IR_SLOT));
    }
    if stripped.contains("```") {
        return Err(EditError::Forbidden("```"));
    }
    Ok(stripped)
}

fn join(mut lines: Vec<String>, ends_with_newline: bool) -> String {
    if !ends_with_newline {
        if let Some(last) = lines.last_mut() {
            if last.ends_with('\n') {
                last.pop();
            }
        }
    }
    lines.concat()
}

fn insert(lines: &mut Vec<String>, at: usize, new: Vec<String>) {
    if at > 0 && !lines[at - 1].ends_with('\n') {
        lines[at - 1].push('\n');
    }
    lines.splice(at..at, new);
}

/// Applies one edit to a prompt text.
pub fn apply_to_text(text: &str, edit: &EditProposal) -> Result<String, EditError> {
    let ends_with_newline = text.is_empty() || text.ends_with('\n');
    let mut lines = split_lines(text);
    let layout = layout(&lines);
    let (section_part, rule_part) = match edit.anchor.split_once(ANCHOR_SEPARATOR) {
        Some((s, r)) => (s.trim(), Some(r.trim())),
        None => (edit.anchor.trim(), None),
    };
    let section = match_unique(
        layout.sections.iter().map(|s| s.title.as_str()),
        section_part,
        &edit.anchor,
        "section",
    )?;

    match edit.kind {
        EditKind::AddRule => {
            let rule = format!("{RULE_INDENT}* {}\n", normalize_content(&edit.content)?);
            match section {
                Some(s) => insert(&mut lines, layout.sections[s].end, vec![rule]),
                None => {
                    let title = section_part.trim_end_matches(':').trim();
                    let mut new = Vec::new();
                    if layout.header.is_none() {
                        new.push(format!("{}. {RULES_HEADER}\n", layout.last_item + 1));
                    }
                    new.push(format!("{SECTION_INDENT}- {title}:\n"));
                    new.push(rule);
                    insert(&mut lines, layout.content_end, new);
                }
            }
        }
        EditKind::ModifyRule | EditKind::RemoveRule => {
            let s = section.ok_or_else(|| anchor_error(&edit.anchor, "no such section"))?;
            let rule_part =
                rule_part.ok_or_else(|| anchor_error(&edit.anchor, "expected `section :: rule`"))?;
            let sec = &layout.sections[s];
            let r = match_unique(sec.rules.iter().map(String::as_str), rule_part, &edit.anchor, "rule")?
                .ok_or_else(|| anchor_error(&edit.anchor, "no such rule"))?;
            let (start, end) = sec.spans[r];
            let replacement = if edit.kind == EditKind::ModifyRule {
                vec![format!("{RULE_INDENT}* {}\n", normalize_content(&edit.content)?)]
            } else {
                Vec::new()
            };
            lines.splice(start..end, replacement);
        }
    }
    Ok(join(lines, ends_with_newline))
}

/// Applies the confirmed subset of `reviewed` to `current`, producing a
/// child whose changelog records every reviewed edit.
pub fn apply_edits(
    current: &PromptVersion,
    reviewed: &[EditProposal],
    created_at: CreatedAt,
) -> Result<PromptVersion, EditError> {
    let mut text = current.text.clone();
    let mut applied = 0;
    for edit in reviewed.iter().filter(|e| e.confirmed) {
        text = apply_to_text(&text, edit)?;
        applied += 1;
    }
    if applied == 0 {
        return Err(EditError::NothingConfirmed);
    }
    Ok(PromptVersion {
        version_id: PromptVersion::compute_id(Some(&current.version_id), created_at, &text),
        parent_id: Some(current.version_id.clone()),
        text,
        created_at,
        changelog: reviewed.to_vec(),
        validation_score: None,
    })
}
