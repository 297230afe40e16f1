//! Model backends and the guarded call protocol around them.

mod call;
mod http;
mod parse;
mod scripted;

use serde::{Deserialize, Serialize};

use crate::context::Message;
use crate::prompts::TemplateKind;

pub use call::{call_llm, CallFailure, CallReport, RetryPolicy};
pub use http::{HttpChatBackend, API_BASE_ENV, API_KEY_ENV};
pub use parse::{parse_plan, plan_to_json, ParseError};
pub use scripted::{ScriptError, ScriptRecord, ScriptedBackend, ScriptedFault, ScriptedReply};

/// Sampling temperature used unless configured otherwise.
pub const DEFAULT_TEMPERATURE: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecodeParams {
    pub temperature: f64,
    pub max_output_tokens: Option<u32>,
    pub model_name: String,
}

impl Default for DecodeParams {
    fn default() -> Self {
        Self {
            temperature: DEFAULT_TEMPERATURE,
            max_output_tokens: None,
            model_name: "gpt-4o".to_string(),
        }
    }
}

/// Which node a call plans for and which template produced its prompt.
/// Live backends ignore it; the scripted backend matches on it.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CallKey {
    pub task_name: String,
    pub template_kind: TemplateKind,
}

impl CallKey {
    pub fn new(task_name: impl Into<String>, template_kind: TemplateKind) -> Self {
        Self {
            task_name: task_name.into(),
            template_kind,
        }
    }
}

pub struct CompletionRequest<'a> {
    pub messages: &'a [Message],
    pub params: &'a DecodeParams,
    pub key: &'a CallKey,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum BackendResult {
    Text(String),
    /// The prompt exceeded the model's context length.
    Overflow,
    Transport { detail: String, retryable: bool },
}

/// A chat model. Implementations must be shareable across threads; a single
/// run never has two calls in flight.
pub trait ChatBackend: Send + Sync {
    fn complete(&self, request: &CompletionRequest<'_>) -> BackendResult;
}

impl<B: ChatBackend + ?Sized> ChatBackend for Box<B> {
    fn complete(&self, request: &CompletionRequest<'_>) -> BackendResult {
        (**self).complete(request)
    }
}

impl<B: ChatBackend + ?Sized> ChatBackend for std::sync::Arc<B> {
    fn complete(&self, request: &CompletionRequest<'_>) -> BackendResult {
        (**self).complete(request)
    }
}
