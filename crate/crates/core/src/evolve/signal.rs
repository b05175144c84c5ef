//! Learning signal: generation-stage trajectories that started wrong and were
//! repaired by self-debugging, rendered for the prompt optimizer.

use serde::{Deserialize, Serialize};
use similar::TextDiff;

use crate::digest::{estimate_tokens, truncate_middle};
use crate::pipeline::{SelfDebugTrace, TaskOutcome};

/// Per-listing cap inside a rendered trajectory.
const LISTING_EXCERPT_CHARS: usize = 3000;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LearningBatchSignal {
    pub batch_tasks: Vec<String>,
    pub trajectories: Vec<SelfDebugTrace>,
    pub token_budgeted_excerpts: String,
}

impl LearningBatchSignal {
    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }
}

fn qualifies(trace: &SelfDebugTrace) -> bool {
    trace.resolved && trace.rounds_used >= 1
}

struct Rendered {
    heading: String,
    /// One block per failed attempt, oldest first; `None` once dropped.
    failures: Vec<Option<String>>,
    fix: String,
}

impl Rendered {
    fn text(&self) -> String {
        let mut out = self.heading.clone();
        for (i, block) in self.failures.iter().enumerate() {
            match block {
                Some(b) => out.push_str(b),
                None => out.push_str(&format!("[attempt {i} omitted]\n\n")),
            }
        }
        out.push_str(&self.fix);
        out
    }
}

fn render_trace(trace: &SelfDebugTrace) -> Rendered {
    let heading = format!(
        "### Task {} (correct after {} self-debug round{})\n\n",
        trace.task_id,
        trace.rounds_used,
        if trace.rounds_used == 1 { "" } else { "s" }
    );
    let (last, failed) = trace.attempts.split_last().expect("qualifying traces have attempts");
    let failures = failed
        .iter()
        .map(|a| {
            let listing = match &a.asm_text {
                Some(asm) => format!(
                    "```assembly\n{}\n```\n",
                    truncate_middle(asm.trim_end(), LISTING_EXCERPT_CHARS)
                ),
                None => "(the response contained no assembly block)\n".to_string(),
            };
            let diag = a
                .verdict
                .diagnostics
                .as_ref()
                .map(|d| format!("Stage: {}\n```text\n{}\n```\n", d.stage.label(), d.excerpt.trim_end()))
                .unwrap_or_default();
            Some(format!("#### Attempt {} (failed)\n{listing}{diag}\n", a.index))
        })
        .collect();
    let correct = last.asm_text.as_deref().unwrap_or_default();
    let previous = failed.iter().rev().find_map(|a| a.asm_text.as_deref());
    let fix = match previous {
        Some(prev) => {
            let diff = TextDiff::from_lines(prev, correct)
                .unified_diff()
                .context_radius(2)
                .header("failed", "correct")
                .to_string();
            format!(
                "#### Attempt {} (correct), as a diff against the last failed listing\n```diff\n{}```\n\n",
                last.index,
                truncate_middle(&diff, LISTING_EXCERPT_CHARS)
            )
        }
        None => format!(
            "#### Attempt {} (correct)\n```assembly\n{}\n```\n\n",
            last.index,
            truncate_middle(correct.trim_end(), LISTING_EXCERPT_CHARS)
        ),
    };
    Rendered {
        heading,
        failures,
        fix,
    }
}

/// Filters the batch's generation traces to repaired ones and renders them
/// within `budget` tokens, dropping the oldest failed attempts first.
pub fn collect_signal(outcomes: &[TaskOutcome], batch: &[String], budget: usize) -> LearningBatchSignal {
    let mut trajectories = Vec::new();
    for id in batch {
        match outcomes.iter().find(|o| &o.task_id == id) {
            Some(o) if qualifies(&o.generation_trace) => trajectories.push(o.generation_trace.clone()),
            Some(_) => {}
            None => tracing::warn!(task = %id, "no outcome for batch task; left out of the signal"),
        }
    }
    let mut rendered: Vec<Rendered> = trajectories.iter().map(render_trace).collect();
    let total = |r: &[Rendered]| r.iter().map(|x| x.text()).collect::<String>();

    let mut text = total(&rendered);
    let deepest = rendered.iter().map(|r| r.failures.len()).max().unwrap_or(0);
    'drop: for position in 0..deepest {
        for i in 0..rendered.len() {
            if estimate_tokens(&text) <= budget {
                break 'drop;
            }
            // The most recent failure is kept so every trajectory still
            // shows what went wrong.
            let r = &mut rendered[i];
            if position + 1 < r.failures.len() && r.failures[position].is_some() {
                r.failures[position] = None;
                text = total(&rendered);
            }
        }
    }
    if estimate_tokens(&text) > budget {
        text = truncate_middle(&text, budget.saturating_mul(4));
    }
    LearningBatchSignal {
        batch_tasks: batch.to_vec(),
        trajectories,
        token_budgeted_excerpts: text,
    }
}
