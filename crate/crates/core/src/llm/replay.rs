//! Deterministic replay backend.
//!
//! Script format (TOML):
//!
//! ```toml
//! [[conversation]]
//! id = "l1_add/gen"
//!
//! [[conversation.step]]
//! hint = "translate"            # optional: must occur in the last user message
//! response = "```assembly\n...\n```"
//!
//! [[conversation.step]]
//! asm_file = "listings/l1_add.s"   # wrapped in an ```assembly fence
//! ```
//!
//! Each step supplies exactly one of `response`, `asm_file` or `text_file`
//! (paths relative to the script). Every conversation id keeps its own step
//! counter; step `k` answers the `k`-th request made under that id.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::{wrap_in_assembly_fence, ChatRequest, ChatResponse, GatewayError};
use crate::digest::estimate_tokens;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReplayStep {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hint: Option<String>,
    pub response: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ReplayScript {
    conversations: BTreeMap<String, Vec<ReplayStep>>,
}

#[derive(Debug, Default, Deserialize, Serialize)]
struct ScriptFile {
    #[serde(default)]
    conversation: Vec<ConversationFile>,
}

#[derive(Debug, Deserialize, Serialize)]
struct ConversationFile {
    id: String,
    #[serde(default)]
    step: Vec<StepFile>,
}

#[derive(Debug, Deserialize, Serialize)]
struct StepFile {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    hint: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    response: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    asm_file: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    text_file: Option<PathBuf>,
}

impl ReplayScript {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn load(path: &Path) -> Result<Self, GatewayError> {
        let text = fs::read_to_string(path)
            .map_err(|e| GatewayError::Config(format!("cannot read replay script {}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::parse(&text, base)
            .map_err(|e| GatewayError::Config(format!("replay script {}: {e}", path.display())))
    }

    pub fn parse(text: &str, base: &Path) -> Result<Self, String> {
        let file: ScriptFile = toml::from_str(text).map_err(|e| e.to_string())?;
        let mut script = Self::new();
        for conv in file.conversation {
            for (i, step) in conv.step.into_iter().enumerate() {
                let read = |p: &Path| {
                    fs::read_to_string(base.join(p))
                        .map_err(|e| format!("conversation `{}` step {i}: {}: {e}", conv.id, p.display()))
                };
                let response = match (step.response, step.asm_file, step.text_file) {
                    (Some(r), None, None) => r,
                    (None, Some(p), None) => wrap_in_assembly_fence(&read(&p)?),
                    (None, None, Some(p)) => read(&p)?,
                    _ => {
                        return Err(format!(
                            "conversation `{}` step {i}: exactly one of response, asm_file, text_file required",
                            conv.id
                        ))
                    }
                };
                script.push(&conv.id, step.hint, response);
            }
        }
        Ok(script)
    }

    pub fn push(&mut self, conversation: &str, hint: Option<String>, response: impl Into<String>) -> &mut Self {
        self.conversations
            .entry(conversation.to_string())
            .or_default()
            .push(ReplayStep {
                hint,
                response: response.into(),
            });
        self
    }

    pub fn steps(&self, conversation: &str) -> &[ReplayStep] {
        self.conversations.get(conversation).map(Vec::as_slice).unwrap_or(&[])
    }

    /// Serializes with inline responses.
    pub fn to_toml(&self) -> String {
        let file = ScriptFile {
            conversation: self
                .conversations
                .iter()
                .map(|(id, steps)| ConversationFile {
                    id: id.clone(),
                    step: steps
                        .iter()
                        .map(|s| StepFile {
                            hint: s.hint.clone(),
                            response: Some(s.response.clone()),
                            asm_file: None,
                            text_file: None,
                        })
                        .collect(),
                })
                .collect(),
        };
        toml::to_string(&file).expect("replay script serializes")
    }
}

pub struct ReplayProvider {
    script: ReplayScript,
    counters: Mutex<HashMap<String, usize>>,
}

impl ReplayProvider {
    pub fn new(script: ReplayScript) -> Self {
        Self {
            script,
            counters: Mutex::new(HashMap::new()),
        }
    }

    pub fn respond(&self, request: &ChatRequest, conversation: &str) -> Result<ChatResponse, GatewayError> {
        let mut counters = self.counters.lock().expect("replay counters poisoned");
        let step = *counters.get(conversation).unwrap_or(&0);
        let entry = self
            .script
            .steps(conversation)
            .get(step)
            .ok_or_else(|| GatewayError::ReplayExhausted {
                conversation: conversation.to_string(),
                step,
            })?;
        if let Some(hint) = &entry.hint {
            if !request.last_user_content().contains(hint.as_str()) {
                return Err(GatewayError::ReplayMismatch {
                    conversation: conversation.to_string(),
                    step,
                    hint: hint.clone(),
                });
            }
        }
        counters.insert(conversation.to_string(), step + 1);
        let prompt_chars: String = request.messages.iter().map(|m| m.content.as_str()).collect();
        Ok(ChatResponse {
            content: entry.response.clone(),
            prompt_tokens: estimate_tokens(&prompt_chars) as u64,
            completion_tokens: estimate_tokens(&entry.response) as u64,
            provider: "replay".into(),
            cached: false,
        })
    }
}
