use std::path::Path;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{BackendResult, CallKey, ChatBackend, CompletionRequest};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScriptedFault {
    Overflow,
    Transport,
}

/// One canned reply: either response text or an injected fault.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScriptRecord {
    #[serde(rename = "match")]
    pub key: CallKey,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub response: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<ScriptedFault>,
}

impl ScriptRecord {
    pub fn text(key: CallKey, response: impl Into<String>) -> Self {
        Self {
            key,
            response: Some(response.into()),
            error: None,
        }
    }

    pub fn fault(key: CallKey, fault: ScriptedFault) -> Self {
        Self {
            key,
            response: None,
            error: Some(fault),
        }
    }

    fn reply(&self) -> ScriptedReply {
        match (&self.response, self.error) {
            (_, Some(ScriptedFault::Overflow)) => ScriptedReply::Overflow,
            (_, Some(ScriptedFault::Transport)) => ScriptedReply::Transport,
            (Some(text), None) => ScriptedReply::Text(text.clone()),
            (None, None) => unreachable!("validated on load"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ScriptedReply {
    Text(String),
    Overflow,
    Transport,
}

#[derive(Debug, Error)]
pub enum ScriptError {
    #[error("cannot read script {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("invalid script: {0}")]
    Json(#[from] serde_json::Error),
    #[error("script record {0} needs exactly one of \"response\" or \"error\"")]
    Record(usize),
}

/// Replays canned responses keyed by (task name, template kind).
///
/// Each call consumes the first unused record whose key matches. A call with
/// no matching record fails immediately with a non-retryable error.
#[derive(Debug)]
pub struct ScriptedBackend {
    records: Mutex<Vec<(ScriptRecord, bool)>>,
    message_limit: Option<usize>,
}

impl ScriptedBackend {
    pub fn new(records: Vec<ScriptRecord>) -> Result<Self, ScriptError> {
        if let Some(i) = records
            .iter()
            .position(|r| r.response.is_some() == r.error.is_some())
        {
            return Err(ScriptError::Record(i));
        }
        Ok(Self {
            records: Mutex::new(records.into_iter().map(|r| (r, false)).collect()),
            message_limit: None,
        })
    }

    pub fn from_json(text: &str) -> Result<Self, ScriptError> {
        Self::new(serde_json::from_str(text)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ScriptError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| ScriptError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_json(&text)
    }

    /// Simulates a model context limit: any request with more than `limit`
    /// messages gets an overflow error without consuming a record.
    pub fn with_message_limit(mut self, limit: usize) -> Self {
        self.message_limit = Some(limit);
        self
    }

    pub fn unused(&self) -> Vec<CallKey> {
        self.records
            .lock()
            .expect("script lock")
            .iter()
            .filter(|(_, used)| !used)
            .map(|(r, _)| r.key.clone())
            .collect()
    }

    fn next(&self, key: &CallKey) -> Result<ScriptedReply, String> {
        let mut records = self.records.lock().expect("script lock");
        if let Some((record, used)) = records.iter_mut().find(|(r, used)| !used && r.key == *key) {
            *used = true;
            return Ok(record.reply());
        }
        let expected: Vec<String> = records
            .iter()
            .filter(|(_, used)| !used)
            .map(|(r, _)| format!("({:?}, {})", r.key.task_name, r.key.template_kind))
            .collect();
        Err(format!(
            "no scripted response for ({:?}, {}); unused keys: [{}]",
            key.task_name,
            key.template_kind,
            expected.join(", ")
        ))
    }
}

impl ChatBackend for ScriptedBackend {
    fn complete(&self, request: &CompletionRequest<'_>) -> BackendResult {
        if self.message_limit.is_some_and(|limit| request.messages.len() > limit) {
            return BackendResult::Overflow;
        }
        match self.next(request.key) {
            Ok(ScriptedReply::Text(text)) => BackendResult::Text(text),
            Ok(ScriptedReply::Overflow) => BackendResult::Overflow,
            Ok(ScriptedReply::Transport) => BackendResult::Transport {
                detail: "scripted transport fault".to_string(),
                retryable: true,
            },
            Err(detail) => BackendResult::Transport {
                detail,
                retryable: false,
            },
        }
    }
}
