//! Prompt templates and placeholder substitution.
//!
//! Template text lives in `assets/templates/*.txt` and is embedded at compile
//! time. Rendering is a single pass over the template: `{name}` tokens are
//! replaced by the matching [`PromptContext`] field, and substituted values
//! are never re-scanned, so rule text containing braces is safe.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Bullet prepended to each line of `{remaining_subtask_str}`.
pub const DEFAULT_SUBTASK_BULLET: &str = "- ";

/// Default system prompt placed at the top of the fixed head.
pub const DEFAULT_SYSTEM_PROMPT: &str = include_str!("../assets/system_prompt.txt");
/// Rule text for the built-in kitchen environment.
pub const KITCHEN_RULES: &str = include_str!("../assets/rules_kitchen.txt");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemplateKind {
    InitialDecomposition,
    RecursiveDownward,
    LeafBacktrack,
    NonleafBacktrack,
    LeafCompletion,
    NonleafJudgeDone,
    LeafFailure,
    ToolcallActionTaken,
    ToolcallDownward,
    ToolcallBacktrack,
}

impl TemplateKind {
    pub const ALL: [TemplateKind; 10] = [
        TemplateKind::InitialDecomposition,
        TemplateKind::RecursiveDownward,
        TemplateKind::LeafBacktrack,
        TemplateKind::NonleafBacktrack,
        TemplateKind::LeafCompletion,
        TemplateKind::NonleafJudgeDone,
        TemplateKind::LeafFailure,
        TemplateKind::ToolcallActionTaken,
        TemplateKind::ToolcallDownward,
        TemplateKind::ToolcallBacktrack,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            TemplateKind::InitialDecomposition => "initial_decomposition",
            TemplateKind::RecursiveDownward => "recursive_downward",
            TemplateKind::LeafBacktrack => "leaf_backtrack",
            TemplateKind::NonleafBacktrack => "nonleaf_backtrack",
            TemplateKind::LeafCompletion => "leaf_completion",
            TemplateKind::NonleafJudgeDone => "nonleaf_judge_done",
            TemplateKind::LeafFailure => "leaf_failure",
            TemplateKind::ToolcallActionTaken => "toolcall_action_taken",
            TemplateKind::ToolcallDownward => "toolcall_downward",
            TemplateKind::ToolcallBacktrack => "toolcall_backtrack",
        }
    }

    pub fn template(self) -> &'static str {
        match self {
            TemplateKind::InitialDecomposition => {
                include_str!("../assets/templates/initial_decomposition.txt")
            }
            TemplateKind::RecursiveDownward => {
                include_str!("../assets/templates/recursive_downward.txt")
            }
            TemplateKind::LeafBacktrack => include_str!("../assets/templates/leaf_backtrack.txt"),
            TemplateKind::NonleafBacktrack => {
                include_str!("../assets/templates/nonleaf_backtrack.txt")
            }
            TemplateKind::LeafCompletion => include_str!("../assets/templates/leaf_completion.txt"),
            TemplateKind::NonleafJudgeDone => {
                include_str!("../assets/templates/nonleaf_judge_done.txt")
            }
            TemplateKind::LeafFailure => include_str!("../assets/templates/leaf_failure.txt"),
            TemplateKind::ToolcallActionTaken => {
                include_str!("../assets/templates/toolcall_action_taken.txt")
            }
            TemplateKind::ToolcallDownward => {
                include_str!("../assets/templates/toolcall_downward.txt")
            }
            TemplateKind::ToolcallBacktrack => {
                include_str!("../assets/templates/toolcall_backtrack.txt")
            }
        }
    }

    /// Backtracking templates carry the parent's think.
    pub fn carries_parent_think(self) -> bool {
        matches!(
            self,
            TemplateKind::LeafBacktrack
                | TemplateKind::NonleafBacktrack
                | TemplateKind::LeafCompletion
                | TemplateKind::NonleafJudgeDone
                | TemplateKind::LeafFailure
                | TemplateKind::ToolcallBacktrack
        )
    }
}

impl fmt::Display for TemplateKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for TemplateKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        TemplateKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| format!("unknown template kind {s:?}"))
    }
}

/// Values available for substitution. `None` means "not provided".
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptContext {
    pub system_prompt: Option<String>,
    pub rules: Option<String>,
    pub init_obs: Option<String>,
    pub task_name: Option<String>,
    pub done_task_name: Option<String>,
    pub fail_task_name: Option<String>,
    pub obs: Option<String>,
    pub previous_stage_task_name: Option<String>,
    pub previous_stage_think: Option<String>,
    pub remaining_subtask_str: Option<String>,
}

impl PromptContext {
    /// Looks up a placeholder. The initial-decomposition template spells the
    /// rules placeholder `{rule}`.
    fn lookup(&self, name: &str) -> Option<(&Option<String>, bool)> {
        // (value, may be empty)
        let entry = match name {
            "system_prompt" => (&self.system_prompt, false),
            "rule" | "rules" => (&self.rules, false),
            "init_obs" => (&self.init_obs, false),
            "task_name" => (&self.task_name, false),
            "done_task_name" => (&self.done_task_name, false),
            "fail_task_name" => (&self.fail_task_name, false),
            "obs" => (&self.obs, true),
            "previous_stage_task_name" => (&self.previous_stage_task_name, false),
            "previous_stage_think" => (&self.previous_stage_think, true),
            "remaining_subtask_str" => (&self.remaining_subtask_str, true),
            _ => return None,
        };
        Some(entry)
    }
}

/// Renders `S[1:]` one subtask per line, each prefixed with `bullet`.
pub fn format_remaining(subtasks: &[String], bullet: &str) -> String {
    subtasks
        .iter()
        .map(|s| format!("{bullet}{s}"))
        .collect::<Vec<_>>()
        .join("\n")
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum RenderError {
    #[error("template {template} needs placeholder {{{placeholder}}}, which is missing or empty")]
    MissingPlaceholder {
        template: TemplateKind,
        placeholder: String,
    },
    #[error("template {template} uses unknown placeholder {{{placeholder}}}")]
    UnknownPlaceholder {
        template: TemplateKind,
        placeholder: String,
    },
}

/// Names of the `{placeholder}` tokens in a template, in order of appearance.
pub fn placeholders(template: &str) -> Vec<&str> {
    let mut out = Vec::new();
    let mut rest = template;
    while let Some(start) = rest.find('{') {
        let after = &rest[start + 1..];
        match placeholder_len(after) {
            Some(len) => {
                out.push(&after[..len]);
                rest = &after[len + 1..];
            }
            None => rest = after,
        }
    }
    out
}

// Length of an identifier followed by '}', if `s` starts with one.
fn placeholder_len(s: &str) -> Option<usize> {
    let len = s
        .bytes()
        .take_while(|b| b.is_ascii_lowercase() || *b == b'_')
        .count();
    (len > 0 && s.as_bytes().get(len) == Some(&b'}')).then_some(len)
}

pub fn render(kind: TemplateKind, ctx: &PromptContext) -> Result<String, RenderError> {
    let template = kind.template();
    let mut out = String::with_capacity(template.len() * 2);
    let mut rest = template;
    while let Some(start) = rest.find('{') {
        out.push_str(&rest[..start]);
        let after = &rest[start + 1..];
        let Some(len) = placeholder_len(after) else {
            out.push('{');
            rest = after;
            continue;
        };
        let name = &after[..len];
        let (value, may_be_empty) =
            ctx.lookup(name)
                .ok_or_else(|| RenderError::UnknownPlaceholder {
                    template: kind,
                    placeholder: name.to_string(),
                })?;
        match value {
            Some(v) if may_be_empty || !v.is_empty() => out.push_str(v),
            _ => {
                return Err(RenderError::MissingPlaceholder {
                    template: kind,
                    placeholder: name.to_string(),
                })
            }
        }
        rest = &after[len + 1..];
    }
    out.push_str(rest);
    Ok(out)
}

pub fn initial_decomposition(ctx: &PromptContext) -> Result<String, RenderError> {
    render(TemplateKind::InitialDecomposition, ctx)
}

pub fn recursive_downward(ctx: &PromptContext) -> Result<String, RenderError> {
    render(TemplateKind::RecursiveDownward, ctx)
}

pub fn leaf_backtrack(ctx: &PromptContext) -> Result<String, RenderError> {
    render(TemplateKind::LeafBacktrack, ctx)
}

pub fn nonleaf_backtrack(ctx: &PromptContext) -> Result<String, RenderError> {
    render(TemplateKind::NonleafBacktrack, ctx)
}

pub fn leaf_completion(ctx: &PromptContext) -> Result<String, RenderError> {
    render(TemplateKind::LeafCompletion, ctx)
}

pub fn nonleaf_judge_done(ctx: &PromptContext) -> Result<String, RenderError> {
    render(TemplateKind::NonleafJudgeDone, ctx)
}

pub fn leaf_failure(ctx: &PromptContext) -> Result<String, RenderError> {
    render(TemplateKind::LeafFailure, ctx)
}

pub fn toolcall_action_taken(ctx: &PromptContext) -> Result<String, RenderError> {
    render(TemplateKind::ToolcallActionTaken, ctx)
}

pub fn toolcall_downward(ctx: &PromptContext) -> Result<String, RenderError> {
    render(TemplateKind::ToolcallDownward, ctx)
}

pub fn toolcall_backtrack(ctx: &PromptContext) -> Result<String, RenderError> {
    render(TemplateKind::ToolcallBacktrack, ctx)
}

/// Structural ablations.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VariantMode {
    #[default]
    Original,
    /// Model emits only `subtasks`; think is always empty.
    NoThink,
    /// Backtracking prompts omit the parent's think.
    NameOnly,
    /// Backtracking prompts carry the whole think history of the path.
    ThinkMany,
}

impl VariantMode {
    pub fn as_str(self) -> &'static str {
        match self {
            VariantMode::Original => "original",
            VariantMode::NoThink => "no_think",
            VariantMode::NameOnly => "name_only",
            VariantMode::ThinkMany => "think_many",
        }
    }
}

impl fmt::Display for VariantMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for VariantMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "original" => Ok(VariantMode::Original),
            "no_think" => Ok(VariantMode::NoThink),
            "name_only" => Ok(VariantMode::NameOnly),
            "think_many" => Ok(VariantMode::ThinkMany),
            other => Err(format!(
                "unknown variant {other:?} (expected original, no_think, name_only or think_many)"
            )),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VariantConfig {
    pub mode: VariantMode,
    pub depth_cap: Option<usize>,
}

/// Adjusts the context for a variant. `think_history` holds every think on
/// the path to the node being refined, oldest first; only `think_many` reads
/// it.
pub fn apply_variant(
    mut ctx: PromptContext,
    variant: &VariantConfig,
    think_history: &[String],
) -> PromptContext {
    match variant.mode {
        VariantMode::Original | VariantMode::NoThink => {}
        VariantMode::NameOnly => {
            if ctx.previous_stage_think.is_some() {
                ctx.previous_stage_think = Some(String::new());
            }
        }
        VariantMode::ThinkMany => {
            if ctx.previous_stage_think.is_some() {
                ctx.previous_stage_think = Some(think_history.join("\n"));
            }
        }
    }
    ctx
}
